//! Merging, persistence and the zero-update identity over random deltas.

use polar_kit::encoder::{Site, SiteAddress};
use polar_kit::linalg::Rng;
use polar_kit::lora::{load_delta, load_merged, merge, merge_add, save_delta, save_merged, ConceptDelta, MergeStrategy, WeightUpdate};
use proptest::prelude::*;

mod common;

const SITES: [SiteAddress; 3] = [
    SiteAddress { layer: 2, site: Site::V },
    SiteAddress { layer: 1, site: Site::Q },
    SiteAddress { layer: 2, site: Site::O },
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn add_merge_is_the_exact_sum(seed in any::<u64>(), r1 in 1usize..4, r2 in 1usize..4, n_sites in 1usize..4) {
        let (_, enc) = common::small_setup(1);
        let mut rng = Rng::new(seed);
        let sites = &SITES[..n_sites];
        let d1 = common::random_delta(&mut rng, &enc, "a", sites, r1, 0.1);
        let d2 = common::random_delta(&mut rng, &enc, "b", sites, r2, 0.1);
        let m = merge_add(&[&d1, &d2]).unwrap();
        for &s in sites {
            prop_assert_eq!(m.stacked_rank(s), Some(r1 + r2));
            let sum = d1.materialize(s).unwrap().add(&d2.materialize(s).unwrap()).unwrap();
            prop_assert_eq!(m.materialize(s).unwrap(), sum);
        }
        let text = "a photo of sks in the snow";
        let merged = enc.encode(text, &[&m]).unwrap();
        let both = enc.encode(text, &[&d1, &d2]).unwrap();
        for (x, y) in merged.iter().zip(&both) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn dense_merges_follow_their_definitions(seed in any::<u64>()) {
        let (_, enc) = common::small_setup(1);
        let mut rng = Rng::new(seed);
        let ds: Vec<ConceptDelta> = (0..3).map(|i| common::random_delta(&mut rng, &enc, &format!("c{i}"), &SITES[..1], 1, 0.2)).collect();
        let refs: Vec<&ConceptDelta> = ds.iter().collect();
        let dense: Vec<_> = ds.iter().map(|d| d.materialize(SITES[0]).unwrap()).collect();
        let avg = merge(&refs, MergeStrategy::Avg).unwrap().materialize(SITES[0]).unwrap();
        let max = merge(&refs, MergeStrategy::Max).unwrap().materialize(SITES[0]).unwrap();
        for i in 0..avg.data().len() {
            let vals: Vec<f32> = dense.iter().map(|m| m.data()[i]).collect();
            let mean = (vals[0] + vals[1] + vals[2]) / 3.0;
            prop_assert!((avg.data()[i] - mean).abs() <= 1e-6 * (1.0 + mean.abs()));
            prop_assert_eq!(max.data()[i], vals.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        }
    }

    #[test]
    fn delta_files_round_trip_bitwise(seed in any::<u64>(), rank in 1usize..4) {
        let (_, enc) = common::small_setup(1);
        let mut rng = Rng::new(seed);
        let d = common::random_delta(&mut rng, &enc, "cat0", &SITES[..2], rank, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        save_delta(&d, &path).unwrap();
        prop_assert_eq!(load_delta(&path, Some(&enc)).unwrap(), d.clone());

        let other = common::random_delta(&mut rng, &enc, "dog1", &SITES[..2], rank, 1.0);
        for strategy in MergeStrategy::ALL {
            let m = merge(&[&d, &other], strategy).unwrap();
            let mpath = dir.path().join(format!("{strategy}.json"));
            save_merged(&m, &mpath).unwrap();
            prop_assert_eq!(load_merged(&mpath, Some(&enc)).unwrap(), m);
        }
    }

    #[test]
    fn zero_b_leaves_embeddings_bitwise_unchanged(seed in any::<u64>(), rank in 1usize..4, n_sites in 1usize..4) {
        let (world, enc) = common::small_setup(seed % 4);
        let d = ConceptDelta::zeros(&enc, "z", &SITES[..n_sites], rank).unwrap();
        for c in &world.concepts {
            let text = format!("an image of {} {}", c.spec.placeholder(), world.contexts[0].phrase);
            prop_assert_eq!(enc.encode(&text, &[&d as &dyn WeightUpdate]).unwrap(), enc.encode(&text, &[]).unwrap());
        }
    }
}

#[test]
fn merges_reject_mismatched_inputs() {
    let (_, enc) = common::small_setup(1);
    let (_, other_enc) = common::small_setup(2);
    let mut rng = Rng::new(3);
    let a = common::random_delta(&mut rng, &enc, "a", &SITES[..1], 1, 0.1);
    let b = common::random_delta(&mut rng, &enc, "b", &SITES[1..2], 1, 0.1);
    let c = common::random_delta(&mut rng, &other_enc, "c", &SITES[..1], 1, 0.1);
    assert!(merge_add(&[&a, &b]).is_err());
    assert_eq!(merge_add(&[&a, &c]).unwrap_err().kind(), "fingerprint");
    assert!(merge_add(&[]).is_err());
}
