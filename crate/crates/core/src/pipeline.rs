//! End-to-end building blocks shared by the command line, the examples and
//! the acceptance suite: one seed in, a pretrained encoder and a set of
//! concept deltas out.

use serde::{Deserialize, Serialize};

use crate::encoder::{pretrain, EncoderConfig, FrozenEncoder, PretrainConfig, PretrainReport};
use crate::error::Result;
use crate::linalg::Rng;
use crate::metrics::DeltaStore;
use crate::personalize::{train_polar, OrthoSlot, TrainConfig, TrainReport};
use crate::synth::{generate_world, SyntheticWorld, WorldConfig};

/// Sub-seed for one pipeline stage: the first draw of the stream derived from
/// `seed` and the stage label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    Rng::derive(seed, label).next_u64()
}

/// Everything a run needs besides its seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

/// A generated world and the text tower pretrained on its captions.
pub struct Prepared {
    pub world: SyntheticWorld,
    pub encoder: FrozenEncoder,
    pub pretrain: PretrainReport,
}

pub fn world_for_seed(seed: u64, cfg: &WorldConfig) -> Result<SyntheticWorld> {
    generate_world(&WorldConfig {
        seed: derive_seed(seed, "gen-world"),
        ..cfg.clone()
    })
}

/// Toy encoder for `world`, initialized and pretrained from `seed`.
pub fn pretrained_encoder(seed: u64, world: &SyntheticWorld, cfg: &PretrainConfig) -> Result<(FrozenEncoder, PretrainReport)> {
    let init = FrozenEncoder::init(EncoderConfig::toy(world.vocab.clone(), derive_seed(seed, "encoder-init")))?;
    let cfg = PretrainConfig {
        seed: derive_seed(seed, "pretrain"),
        ..cfg.clone()
    };
    pretrain(&init, &world.pretrain_pairs()?, &cfg)
}

/// `gen-world` followed by `pretrain`.
pub fn prepare(seed: u64, cfg: &PipelineConfig) -> Result<Prepared> {
    let world = world_for_seed(seed, &cfg.world)?;
    let (encoder, pretrain) = pretrained_encoder(seed, &world, &cfg.pretrain)?;
    Ok(Prepared {
        world,
        encoder,
        pretrain,
    })
}

/// Training config for `seed`; with `ortho`, concept `slot` of `n_slots`
/// gets its rows of a shared frozen basis.
pub fn train_config_for(seed: u64, base: &TrainConfig, ortho: Option<(usize, usize)>) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, "personalize"),
        orthogonal: ortho.map(|(slot, n_slots)| OrthoSlot {
            basis_seed: derive_seed(seed, "ortho-basis"),
            slot,
            n_slots,
        }),
        ..base.clone()
    }
}

/// Trains every concept of `world`; reports come back in concept order.
pub fn personalize_all(
    enc: &FrozenEncoder,
    world: &SyntheticWorld,
    seed: u64,
    base: &TrainConfig,
    ortho: bool,
) -> Result<(DeltaStore, Vec<TrainReport>)> {
    let n = world.concepts.len();
    let mut store = DeltaStore::new();
    let mut reports = Vec::with_capacity(n);
    for (i, c) in world.concepts.iter().enumerate() {
        let cfg = train_config_for(seed, base, ortho.then_some((i, n)));
        let (delta, report) = train_polar(enc, &c.spec, &world.images, &cfg)?;
        report.check()?;
        store.insert(c.spec.concept_id.clone(), delta);
        reports.push(report);
    }
    Ok((store, reports))
}
