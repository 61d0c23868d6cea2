//! Generates the seeded synthetic world and its evaluation suite, then saves
//! both. Usage: `gen_world [seed] [out_dir]`.

use polar_kit::images::Split;
use polar_kit::metrics::QueryKind;
use polar_kit::pipeline::world_for_seed;
use polar_kit::synth::{build_eval_suite, WorldConfig};

fn main() -> polar_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.next().map_or_else(std::env::temp_dir, Into::into);

    let world = world_for_seed(seed, &WorldConfig::default())?;
    let suite = build_eval_suite(&world);

    println!("concepts: {}", world.concept_ids().join(", "));
    println!("contexts: {}", world.contexts.iter().map(|c| c.phrase.as_str()).collect::<Vec<_>>().join(" | "));
    for split in [Split::Train, Split::Eval, Split::Pretrain] {
        println!("{split:?} images: {}", world.images.with_split(split).len());
    }
    for kind in QueryKind::ALL {
        println!("{} queries: {}", kind.name(), suite.of_kind(kind).len());
    }

    let (w, s) = (out.join("world.bin"), out.join("eval.json"));
    world.save(&w)?;
    suite.save(&s)?;
    println!("wrote {} and {}", w.display(), s.display());
    Ok(())
}
