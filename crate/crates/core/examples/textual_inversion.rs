//! Compares the textual-inversion baseline (a learned placeholder embedding)
//! with the weight update on one concept's queries. Usage:
//! `textual_inversion [seed] [concept_id]`.

use polar_kit::metrics::{reciprocal_rank, QueryKind};
use polar_kit::personalize::{train_polar, train_textual_inversion, InversionConfig, TrainConfig};
use polar_kit::pipeline::{derive_seed, prepare, train_config_for, PipelineConfig};
use polar_kit::synth::build_eval_suite;

fn main() -> polar_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let concept = args.next().unwrap_or_else(|| "cat0".into());

    let p = prepare(seed, &PipelineConfig::default())?;
    let spec = &p.world.concept(&concept)?.spec;
    let (delta, _) = train_polar(&p.encoder, spec, &p.world.images, &train_config_for(seed, &TrainConfig::default(), None))?;
    let inv_cfg = InversionConfig {
        seed: derive_seed(seed, "inversion"),
        ..InversionConfig::default()
    };
    let (inv, _) = train_textual_inversion(&p.encoder, spec, &p.world.images, &inv_cfg)?;

    let index = p.world.eval_index();
    let suite = build_eval_suite(&p.world);
    let mine: Vec<_> = suite
        .queries
        .iter()
        .filter(|q| q.kind == QueryKind::ContextSingle && q.concepts == [concept.clone()])
        .collect();
    let (mut rr_polar, mut rr_inv) = (0.0, 0.0);
    for q in &mine {
        let rank = |emb: Vec<f32>| -> polar_kit::Result<f64> {
            let ids: Vec<String> = index.rank(&emb, index.len())?.into_iter().map(|h| h.id).collect();
            reciprocal_rank(&ids, &q.ground_truth)
        };
        rr_polar += rank(p.encoder.encode(&q.text, &[&delta])?)?;
        rr_inv += rank(inv.encode(&p.encoder, &q.text)?)?;
    }
    let n = mine.len() as f64;
    println!("{concept}: {} context queries", mine.len());
    println!("  weight update       mRR {:.3}", rr_polar / n);
    println!("  textual inversion   mRR {:.3}", rr_inv / n);
    Ok(())
}
