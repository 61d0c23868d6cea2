//! Learns one concept's rank-one update on the last layer's value projection
//! and saves it. Usage: `personalize_concept [seed] [concept_id]`.

use polar_kit::lora::save_delta;
use polar_kit::pipeline::{prepare, train_config_for, PipelineConfig};
use polar_kit::personalize::TrainConfig;

fn main() -> polar_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let concept = args.next().unwrap_or_else(|| "cat0".into());

    let p = prepare(seed, &PipelineConfig::default())?;
    let spec = &p.world.concept(&concept)?.spec;
    let cfg = train_config_for(seed, &TrainConfig::default(), None);
    let (delta, report) = polar_kit::personalize::train_polar(&p.encoder, spec, &p.world.images, &cfg)?;
    report.check()?;

    for (i, it) in report.trace.iter().enumerate().step_by(100) {
        println!("iter {i:>3}  mse {:.4}  ΣB² {:.4}  total {:.4}", it.mse, it.reg, it.total);
    }
    println!(
        "{concept}: {} iterations in {:.3} s, ΣB² {:.4}, ‖A‖ rows {:?}",
        report.trace.len(),
        report.wall_seconds,
        report.final_b_sum_squares,
        report.final_a_row_norms
    );
    let path = std::env::temp_dir().join(format!("{concept}.json"));
    save_delta(&delta, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
