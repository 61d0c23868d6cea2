//! Pretrains the toy text tower on context-only captions and shows the loss
//! curve and caption retrieval before and after. Usage:
//! `pretrain_encoder [seed] [steps]`.

use polar_kit::encoder::{pretrain, EncoderConfig, FrozenEncoder, PretrainConfig};
use polar_kit::metrics::{evaluate_base, EvalOptions, QueryKind};
use polar_kit::pipeline::{derive_seed, world_for_seed};
use polar_kit::synth::{build_eval_suite, WorldConfig};

fn main() -> polar_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);

    let world = world_for_seed(seed, &WorldConfig::default())?;
    let init = FrozenEncoder::init(EncoderConfig::toy(world.vocab.clone(), derive_seed(seed, "encoder-init")))?;
    let suite = build_eval_suite(&world);
    let captions = suite.of_kind(QueryKind::GeneralCaption);
    let index = world.eval_index();
    let opts = EvalOptions {
        caption_probe: false,
        ..EvalOptions::default()
    };

    let before = evaluate_base(&init, &index, &captions, &opts)?;
    let cfg = PretrainConfig {
        steps,
        seed: derive_seed(seed, "pretrain"),
        ..PretrainConfig::default()
    };
    let (enc, report) = pretrain(&init, &world.pretrain_pairs()?, &cfg)?;
    let after = evaluate_base(&enc, &index, &captions, &opts)?;

    let every = (steps / 10).max(1);
    for (i, loss) in report.losses.iter().enumerate().step_by(every) {
        println!("step {i:>5}  loss {loss:.4}");
    }
    println!("{steps} steps in {:.1} s", report.wall_seconds);
    println!(
        "general-caption mRR: {:.3} at init, {:.3} pretrained",
        before.mrr(QueryKind::GeneralCaption).unwrap_or(0.0),
        after.mrr(QueryKind::GeneralCaption).unwrap_or(0.0)
    );
    Ok(())
}
