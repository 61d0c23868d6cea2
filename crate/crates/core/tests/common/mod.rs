#![allow(dead_code)]

use polar_kit::encoder::{EncoderConfig, FrozenEncoder, SiteAddress};
use polar_kit::linalg::{Matrix, Rng};
use polar_kit::lora::{ConceptDelta, HyperRecord, SiteFactors};
use polar_kit::synth::{generate_world, SyntheticWorld, WorldConfig};

/// Three concepts in four contexts, with an untrained 16-wide, 2-layer tower.
pub fn small_setup(seed: u64) -> (SyntheticWorld, FrozenEncoder) {
    let world = generate_world(&WorldConfig {
        n_concepts: 3,
        n_contexts: 4,
        multi_pairs: 2,
        multi_contexts: 2,
        seed,
        ..WorldConfig::default()
    })
    .unwrap();
    let enc = FrozenEncoder::init(EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ..EncoderConfig::toy(world.vocab.clone(), seed ^ 0x5eed)
    })
    .unwrap();
    (world, enc)
}

/// Gaussian factors at each site.
pub fn random_delta(rng: &mut Rng, enc: &FrozenEncoder, id: &str, sites: &[SiteAddress], rank: usize, scale: f64) -> ConceptDelta {
    let factors = sites
        .iter()
        .map(|&addr| {
            let (m, n) = enc.site_shape(addr).unwrap();
            SiteFactors {
                address: addr,
                a: Matrix::new(rank, n, rng.gaussian_vec(rank * n, 1.0)).unwrap(),
                b: Matrix::new(m, rank, rng.gaussian_vec(m * rank, scale)).unwrap(),
            }
        })
        .collect();
    ConceptDelta::new(id, enc.fingerprint(), rank, factors, HyperRecord::default()).unwrap()
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i:02}")).collect()
}
