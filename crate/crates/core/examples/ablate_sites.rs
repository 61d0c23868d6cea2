//! Sweeps the adapted site over the last layer's projections on two seeds
//! and prints the sweep CSV. Usage: `ablate_sites [grid]`, e.g. `V,Q,K,O`.

use polar_kit::metrics::EvalOptions;
use polar_kit::personalize::TrainConfig;
use polar_kit::pipeline::{prepare, PipelineConfig};
use polar_kit::sweep::{parse_grid, run_sweep, write_csv, Axis, Replicate, SweepSpec};

fn main() -> polar_kit::Result<()> {
    let grid = std::env::args().nth(1).unwrap_or_else(|| "V,Q,K,O".into());
    let prepared = [prepare(0, &PipelineConfig::default())?, prepare(1, &PipelineConfig::default())?];
    let reps: Vec<Replicate<'_>> = prepared
        .iter()
        .zip([0, 1])
        .map(|(p, seed)| Replicate {
            seed,
            world: &p.world,
            encoder: &p.encoder,
        })
        .collect();
    let spec = SweepSpec {
        axis: Axis::Sites,
        grid: parse_grid(Axis::Sites, &grid, prepared[0].encoder.config().n_layers)?,
        train: TrainConfig::default(),
        eval: EvalOptions::default(),
    };
    let rows = run_sweep(&reps, &spec)?;
    write_csv(Axis::Sites, &rows, std::io::stdout())
}
