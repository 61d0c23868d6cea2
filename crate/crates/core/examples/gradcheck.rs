//! Checks the loss gradients against central differences on the 16-wide
//! toy tower, once with f32 activations and once unrounded.

use polar_kit::cli::{check_pairs, gradcheck_toy};
use polar_kit::personalize::{gradcheck, train_polar, GradCheckOptions, TrainConfig};
use polar_kit::pipeline::train_config_for;

fn main() -> polar_kit::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (world, enc) = gradcheck_toy(seed)?;
    let pairs = check_pairs(&enc, &world, 0)?;
    for iterations in [0, 50] {
        let cfg = train_config_for(
            seed,
            &TrainConfig {
                iterations,
                ..TrainConfig::default()
            },
            None,
        );
        let (delta, _) = train_polar(&enc, &world.concepts[0].spec, &world.images, &cfg)?;
        for (name, opts) in [("f32, step 1e-3", GradCheckOptions::default()), ("f64, step 1e-5", GradCheckOptions::exact())] {
            let r = gradcheck(&enc, &delta, &pairs, None, &opts)?;
            let detail: Vec<String> = r.params.iter().map(|p| format!("{} {:.2e}", p.name, p.rel_error)).collect();
            println!(
                "after {iterations:>2} steps, {name}: {} (tolerance {:.0e}) [{}]",
                if r.passed { "pass" } else { "fail" },
                r.tolerance,
                detail.join(", ")
            );
        }
    }
    Ok(())
}
