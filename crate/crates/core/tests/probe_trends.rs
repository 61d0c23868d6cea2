//! Caption-recall probe on a pretrained seed: the regularized update should
//! stay within one point (×100) of the base encoder and forget less than the
//! unregularized one.

use polar_kit::metrics::{evaluate, EvalOptions};
use polar_kit::personalize::TrainConfig;
use polar_kit::pipeline::{personalize_all, prepare, PipelineConfig, Prepared};
use polar_kit::synth::build_eval_suite;

fn probe_drop(p: &Prepared, lambda: f64) -> f64 {
    let cfg = TrainConfig {
        lambda,
        ..TrainConfig::default()
    };
    let (store, _) = personalize_all(&p.encoder, &p.world, 0, &cfg, false).unwrap();
    let suite = build_eval_suite(&p.world);
    let r = evaluate(&p.encoder, &p.world.eval_index(), &suite.queries, &store, &EvalOptions::default()).unwrap();
    r.caption_recall_at_10_base.unwrap() - r.caption_recall_at_10.unwrap()
}

#[test]
fn regularized_probe_stays_near_base_and_forgets_less() {
    let p = prepare(0, &PipelineConfig::default()).unwrap();
    let reg = probe_drop(&p, 0.35);
    let free = probe_drop(&p, 0.0);
    assert!(free > reg, "λ=0 drop {free} should exceed λ=0.35 drop {reg}");
    assert!(reg.abs() * 100.0 <= 1.0, "λ=0.35 probe moved {:.2} points from base", reg * 100.0);
}
