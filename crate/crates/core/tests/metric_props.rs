//! Ranking metrics against brute-force definitions.

use polar_kit::metrics::{average_precision, recall_at_k, reciprocal_rank};
use proptest::prelude::*;

mod common;

fn ranking_and_truth() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
    (Just(common::ids(20)).prop_shuffle(), proptest::collection::btree_set(0usize..20, 1..8)).prop_map(
        |(ranked, gt)| {
            let gt = gt.into_iter().map(|i| format!("img{i:02}")).collect();
            (ranked, gt)
        },
    )
}

fn positions(ranked: &[String], gt: &[String]) -> Vec<usize> {
    (0..ranked.len()).filter(|&i| gt.contains(&ranked[i])).map(|i| i + 1).collect()
}

proptest! {
    #[test]
    fn metrics_match_definitions((ranked, gt) in ranking_and_truth()) {
        let pos = positions(&ranked, &gt);
        prop_assert_eq!(reciprocal_rank(&ranked, &gt).unwrap(), 1.0 / pos[0] as f64);
        for k in [1, 5, 10, 20] {
            let hit = if pos[0] <= k { 1.0 } else { 0.0 };
            prop_assert_eq!(recall_at_k(&ranked, &gt, k).unwrap(), hit);
        }
        let ap: f64 = pos.iter().enumerate().map(|(j, &p)| (j + 1) as f64 / p as f64).sum::<f64>() / gt.len() as f64;
        prop_assert!((average_precision(&ranked, &gt).unwrap() - ap).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_bounded_and_recall_grows_with_k((ranked, gt) in ranking_and_truth()) {
        let ap = average_precision(&ranked, &gt).unwrap();
        let rr = reciprocal_rank(&ranked, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&rr));
        // The first hit alone contributes rr / |gt| to AP.
        prop_assert!(ap + 1e-12 >= rr / gt.len() as f64);
        prop_assert_eq!(rr == 1.0, recall_at_k(&ranked, &gt, 1).unwrap() == 1.0);
        let mut prev = 0.0;
        for k in 1..=20 {
            let r = recall_at_k(&ranked, &gt, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn ground_truth_at_the_top_scores_one(n in 1usize..10) {
        let ranked = common::ids(20);
        let gt = ranked[..n].to_vec();
        prop_assert_eq!(average_precision(&ranked, &gt).unwrap(), 1.0);
        prop_assert_eq!(reciprocal_rank(&ranked, &gt).unwrap(), 1.0);
        prop_assert_eq!(recall_at_k(&ranked, &gt, n).unwrap(), 1.0);
    }
}

#[test]
fn worked_average_precision() {
    let ranked = ["a", "x", "b", "y"];
    assert!((average_precision(&ranked, &["a", "b"]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn empty_ground_truth_is_an_error() {
    let none: [&str; 0] = [];
    assert!(reciprocal_rank(&["a"], &none).is_err());
    assert!(average_precision(&["a"], &none).is_err());
}
