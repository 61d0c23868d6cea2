//! Synthetic world and eval suite properties.

use std::collections::BTreeSet;

use polar_kit::images::Split;
use polar_kit::linalg::{cosine_sim, norm};
use polar_kit::metrics::QueryKind;
use polar_kit::synth::{build_eval_suite, generate_world, SyntheticWorld, WorldConfig, SEPARATION};
use proptest::prelude::*;

fn world(seed: u64, n_concepts: usize, sigma: f64) -> SyntheticWorld {
    generate_world(&WorldConfig {
        n_concepts,
        n_contexts: 5,
        multi_pairs: 2,
        multi_contexts: 2,
        sigma,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_a_function_of_the_config(seed in any::<u64>()) {
        let (a, b) = (world(seed, 4, 0.05), world(seed, 4, 0.05));
        prop_assert_eq!(&a, &b);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        prop_assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        prop_assert_eq!(SyntheticWorld::load(&pa).unwrap(), a);
    }

    #[test]
    fn latents_are_unit_and_separated(seed in any::<u64>()) {
        let w = world(seed, 6, 0.05);
        for (i, c) in w.concepts.iter().enumerate() {
            prop_assert!((norm(&c.latent) - 1.0).abs() < 1e-5);
            for d in &w.concepts[i + 1..] {
                prop_assert!(cosine_sim(&c.latent, &d.latent).unwrap().abs() < SEPARATION as f32);
            }
        }
        for r in w.images.iter() {
            prop_assert!((norm(&r.embedding) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn suite_ground_truth_is_consistent(seed in any::<u64>()) {
        let w = world(seed, 4, 0.05);
        let suite = build_eval_suite(&w);
        let index = w.eval_index();
        suite.check_against(&index).unwrap();
        for q in &suite.queries {
            let labels: Vec<_> = q.ground_truth.iter().map(|id| w.images.get(id).unwrap().label.clone()).collect();
            prop_assert!(labels.iter().all(|l| l.split == Some(Split::Eval)));
            match q.kind {
                QueryKind::ContextSingle | QueryKind::ContextMulti => {
                    let context = labels[0].context.clone();
                    prop_assert!(labels.iter().all(|l| l.concepts == q.concepts && l.context == context));
                    let expected: BTreeSet<&str> = index
                        .ids()
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| index.label(*i).concepts == q.concepts && index.label(*i).context == context)
                        .map(|(_, id)| id.as_str())
                        .collect();
                    prop_assert_eq!(q.ground_truth.iter().map(String::as_str).collect::<BTreeSet<_>>(), expected);
                }
                QueryKind::ConceptOnly => {
                    let expected = w.images.iter().filter(|r| r.label.split == Some(Split::Eval) && r.label.concepts == q.concepts).count();
                    prop_assert_eq!(q.ground_truth.len(), expected);
                }
                QueryKind::GeneralCaption => {
                    prop_assert!(q.concepts.is_empty());
                    prop_assert!(labels.iter().all(|l| l.concepts.is_empty()));
                    prop_assert!(q.ground_truth.contains(q.source_image.as_ref().unwrap()));
                }
            }
        }
    }
}

#[test]
fn pretraining_never_sees_concepts() {
    let w = world(3, 4, 0.05);
    let pretrain: BTreeSet<&str> = w.pretrain_captions.iter().map(|p| p.image_id.as_str()).collect();
    for id in &pretrain {
        let l = &w.images.get(id).unwrap().label;
        assert!(l.concepts.is_empty() && l.split == Some(Split::Pretrain));
    }
    for p in &w.pretrain_captions {
        assert!(!p.caption.split_whitespace().any(|t| t == "sks"));
    }
}

#[test]
fn noiseless_single_pair_images_coincide() {
    let w = generate_world(&WorldConfig {
        n_concepts: 1,
        n_contexts: 1,
        multi_pairs: 0,
        multi_contexts: 0,
        sigma: 0.0,
        ..WorldConfig::default()
    })
    .unwrap();
    let pair: Vec<_> = w.images.iter().filter(|r| !r.label.concepts.is_empty()).collect();
    assert!(pair.len() > 1);
    assert!(pair.iter().all(|r| r.embedding == pair[0].embedding));
}

#[test]
fn impossible_separation_is_reported() {
    let err = generate_world(&WorldConfig {
        n_concepts: 16,
        d_out: 2,
        multi_pairs: 0,
        ..WorldConfig::default()
    })
    .unwrap_err();
    assert!(err.to_string().contains("d_out"), "{err}");
}
