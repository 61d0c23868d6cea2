//! Combines two concepts' updates with each merge strategy and scores the
//! multi-concept queries they co-occur in. Usage: `merge_concepts [seed]`.

use polar_kit::lora::{merge, MergeStrategy};
use polar_kit::metrics::{evaluate, EvalOptions, QueryKind};
use polar_kit::personalize::TrainConfig;
use polar_kit::pipeline::{personalize_all, prepare, PipelineConfig};
use polar_kit::synth::build_eval_suite;

fn main() -> polar_kit::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let p = prepare(seed, &PipelineConfig::default())?;
    let (store, _) = personalize_all(&p.encoder, &p.world, seed, &TrainConfig::default(), false)?;

    let (a, b) = p.world.multi_pairs[0];
    let ids = [&p.world.concepts[a].spec.concept_id, &p.world.concepts[b].spec.concept_id];
    let pair = [&store[ids[0]], &store[ids[1]]];
    let last = p.encoder.config().n_layers;
    let site = polar_kit::encoder::SiteAddress::new(last, polar_kit::encoder::Site::V);
    for strategy in MergeStrategy::ALL {
        let m = merge(&pair, strategy)?;
        let dw = m.materialize(site)?;
        println!("{strategy}: ‖ΔW‖ = {:.4}, stacked rank {:?}", dw.frobenius(), m.stacked_rank(site));
    }

    let suite = build_eval_suite(&p.world);
    let multi = suite.of_kind(QueryKind::ContextMulti);
    for strategy in MergeStrategy::ALL {
        let opts = EvalOptions {
            merge: strategy,
            caption_probe: false,
            ..EvalOptions::default()
        };
        let r = evaluate(&p.encoder, &p.world.eval_index(), &multi, &store, &opts)?;
        println!("{strategy}: multi-concept context mRR {:.3}", r.mrr(QueryKind::ContextMulti).unwrap_or(0.0));
    }
    Ok(())
}
