//! Ranks the image database for a personalized query with and without the
//! concept's update. Usage: `retrieve [seed] [concept_id] [context_index]`.

use polar_kit::lora::WeightUpdate;
use polar_kit::personalize::{train_polar, TrainConfig};
use polar_kit::pipeline::{prepare, train_config_for, PipelineConfig};

fn main() -> polar_kit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let concept = args.next().unwrap_or_else(|| "dog1".into());
    let ctx: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let p = prepare(seed, &PipelineConfig::default())?;
    let spec = &p.world.concept(&concept)?.spec;
    let (delta, _) = train_polar(&p.encoder, spec, &p.world.images, &train_config_for(seed, &TrainConfig::default(), None))?;
    let index = p.world.eval_index();
    let phrase = p.world.contexts[ctx].phrase.as_str();
    let query = format!("an image of {} {phrase}", spec.placeholder());

    let updates: [(&str, Vec<&dyn WeightUpdate>); 2] = [("base", vec![]), ("personalized", vec![&delta])];
    for (name, deltas) in updates {
        let emb = p.encoder.encode(&query, &deltas)?;
        println!("{name}: \"{query}\"");
        for (rank, hit) in index.rank(&emb, 5)?.iter().enumerate() {
            let i = index.ids().iter().position(|id| *id == hit.id).unwrap_or(0);
            let label = index.label(i);
            println!("  {}. {:<10} {:.4}  {:?} {}", rank + 1, hit.id, hit.score, label.concepts, label.context.as_deref().unwrap_or("-"));
        }
        let full = index.rank(&emb, index.len())?;
        let first = full.iter().position(|h| {
            let i = index.ids().iter().position(|id| *id == h.id).unwrap_or(0);
            let l = index.label(i);
            l.concepts == [concept.clone()] && l.context.as_deref() == Some(phrase)
        });
        println!("  first {concept} image {phrase}: rank {}", first.map_or(0, |r| r + 1));
    }
    Ok(())
}
