//! Personalizes every concept and prints the full evaluation table next to
//! the base encoder's. Usage: `evaluate_suite [seed]`.

use polar_kit::metrics::{evaluate, evaluate_base, EvalOptions};
use polar_kit::personalize::TrainConfig;
use polar_kit::pipeline::{personalize_all, prepare, PipelineConfig};
use polar_kit::synth::build_eval_suite;

fn main() -> polar_kit::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let p = prepare(seed, &PipelineConfig::default())?;
    let (store, reports) = personalize_all(&p.encoder, &p.world, seed, &TrainConfig::default(), false)?;
    let secs: f64 = reports.iter().map(|r| r.wall_seconds).sum();
    println!("personalized {} concepts in {secs:.2} s\n", reports.len());

    let suite = build_eval_suite(&p.world);
    let index = p.world.eval_index();
    let opts = EvalOptions::default();
    println!("base encoder\n{}", evaluate_base(&p.encoder, &index, &suite.queries, &opts)?.to_table());
    println!("personalized\n{}", evaluate(&p.encoder, &index, &suite.queries, &store, &opts)?.to_table());
    Ok(())
}
