//! Seeded synthetic benchmark: latent concept and context directions, image
//! embeddings built from them, captions, and labeled query suites.

mod io;
mod suite;

pub use suite::{build_eval_suite, EvalSuite};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoder::{CaptionPair, DEFAULT_EOS, DEFAULT_V_STAR};
use crate::error::{PolarError, Result};
use crate::images::{ImageLabel, ImageStore, Split};
use crate::linalg::{dot, l2_normalize, Rng};
use crate::lora::ConceptSpec;
use crate::personalize::TEMPLATES;

/// Context phrases a world draws its contexts from.
pub const CONTEXT_POOL: [&str; 24] = [
    "on the beach",
    "in the snow",
    "near the window",
    "on a sofa",
    "in the garden",
    "on the grass",
    "in the kitchen",
    "under a tree",
    "on the street",
    "in a forest",
    "on a table",
    "by the lake",
    "in the desert",
    "on a bed",
    "at the park",
    "in the rain",
    "on a boat",
    "near a wall",
    "in the city",
    "on a rock",
    "in a box",
    "on the road",
    "at night",
    "in the water",
];

/// Words that fill the template slot in pretraining captions.
pub const FILLERS: [&str; 6] = ["thing", "object", "scene", "something", "item", "thing and object"];

const CONCEPT_NAMES: [&str; 16] = [
    "cat", "dog", "mug", "toy", "bag", "shoe", "lamp", "vase", "hat", "doll", "clock", "chair", "kite", "bowl", "ring",
    "plant",
];

/// Concept latents are redrawn until all pairwise |cos| fall below this.
pub const SEPARATION: f64 = 0.3;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_concepts: usize,
    pub n_contexts: usize,
    pub d_out: usize,
    /// Eval images per (concept, context).
    pub images_per_pair: usize,
    /// Context-only images per context in the retrieval database.
    pub context_only_eval: usize,
    /// Context-only images per context used for pretraining.
    pub context_only_pretrain: usize,
    /// Concept pairs that appear together.
    pub multi_pairs: usize,
    /// Contexts each pair appears in.
    pub multi_contexts: usize,
    /// Images per (pair, context).
    pub multi_images: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Training images per concept (`N_c`).
    pub train_per_concept: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_concepts: 8,
            n_contexts: 12,
            d_out: 32,
            images_per_pair: 3,
            context_only_eval: 4,
            context_only_pretrain: 6,
            multi_pairs: 6,
            multi_contexts: 3,
            multi_images: 2,
            sigma: 0.05,
            alpha: 1.0,
            beta: 1.0,
            train_per_concept: 5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PolarError::Config(m));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive".into());
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma must be non-negative".into());
        }
        if self.train_per_concept == 0 {
            return bad("train_per_concept must be at least 1".into());
        }
        if self.n_concepts == 0 || self.n_contexts == 0 || self.d_out == 0 {
            return bad("world needs concepts, contexts and a dimension".into());
        }
        if self.n_concepts > CONCEPT_NAMES.len() {
            return bad(format!("at most {} concepts", CONCEPT_NAMES.len()));
        }
        if self.n_contexts > CONTEXT_POOL.len() {
            return bad(format!("at most {} contexts", CONTEXT_POOL.len()));
        }
        let max_pairs = self.n_concepts * (self.n_concepts - 1) / 2;
        if self.multi_pairs > max_pairs || self.multi_contexts > self.n_contexts {
            return bad("too many multi-concept pairs or contexts".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub spec: ConceptSpec,
    pub latent: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub phrase: String,
    pub latent: Vec<f32>,
}

/// A caption and the pretraining image it describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainCaption {
    pub caption: String,
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub vocab: Vec<String>,
    pub concepts: Vec<Concept>,
    pub contexts: Vec<Context>,
    /// Concept index pairs that co-occur in multi-concept images.
    pub multi_pairs: Vec<(usize, usize)>,
    pub images: ImageStore,
    pub pretrain_captions: Vec<PretrainCaption>,
}

impl SyntheticWorld {
    pub fn concept(&self, id: &str) -> Result<&Concept> {
        self.concepts
            .iter()
            .find(|c| c.spec.concept_id == id)
            .ok_or_else(|| PolarError::UnknownId(format!("concept {id}")))
    }

    pub fn concept_ids(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.spec.concept_id.clone()).collect()
    }

    /// Caption/embedding pairs for pretraining the text tower.
    pub fn pretrain_pairs(&self) -> Result<Vec<CaptionPair>> {
        self.pretrain_captions
            .iter()
            .map(|p| {
                Ok(CaptionPair {
                    caption: p.caption.clone(),
                    target: self.images.embedding(&p.image_id)?.to_vec(),
                })
            })
            .collect()
    }
}

fn unit(rng: &mut Rng, d: usize) -> Result<Vec<f32>> {
    l2_normalize(&rng.gaussian_vec(d, 1.0))
}

/// `count` unit vectors with pairwise |cos| below [`SEPARATION`].
fn separated(rng: &mut Rng, count: usize, d: usize, what: &str) -> Result<Vec<Vec<f32>>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(count);
    let mut rejections = 0;
    while out.len() < count {
        let v = unit(rng, d)?;
        if out.iter().all(|u| dot(u, &v).abs() < SEPARATION) {
            out.push(v);
        } else {
            rejections += 1;
            if rejections > MAX_REJECTIONS {
                return Err(PolarError::Config(format!(
                    "could not separate {count} {what} latents in {d} dimensions; increase d_out"
                )));
            }
        }
    }
    Ok(out)
}

fn mix(parts: &[(f64, &[f32])], sigma: f64, rng: &mut Rng) -> Vec<f32> {
    let d = parts[0].1.len();
    (0..d)
        .map(|i| {
            let s: f64 = parts.iter().map(|(w, v)| w * f64::from(v[i])).sum();
            (s + sigma * rng.gaussian()) as f32
        })
        .collect()
}

/// Every word a world's captions and queries can use.
pub fn world_vocab() -> Vec<String> {
    let mut words = BTreeSet::new();
    let texts = TEMPLATES
        .iter()
        .chain(CONTEXT_POOL.iter())
        .chain(FILLERS.iter())
        .copied()
        .chain(["and"]);
    for t in texts {
        for w in t.replace("{}", " ").split_whitespace() {
            words.insert(w.to_string());
        }
    }
    let mut vocab = vec![DEFAULT_EOS.to_string(), DEFAULT_V_STAR.to_string()];
    vocab.extend(words);
    vocab
}

/// Deterministic world for `cfg`.
pub fn generate_world(cfg: &WorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let d = cfg.d_out;
    let mut rng = Rng::derive(cfg.seed, "world");

    let concept_latents = separated(&mut rng, cfg.n_concepts, d, "concept")?;
    let context_latents = separated(&mut rng, cfg.n_contexts, d, "context")?;
    let mut pool: Vec<usize> = (0..CONTEXT_POOL.len()).collect();
    rng.shuffle(&mut pool);
    let contexts: Vec<Context> = pool[..cfg.n_contexts]
        .iter()
        .zip(context_latents)
        .map(|(&p, latent)| Context {
            phrase: CONTEXT_POOL[p].to_string(),
            latent,
        })
        .collect();

    let mut images = ImageStore::new(d);
    let label = |concepts: Vec<String>, x: Option<usize>, split| ImageLabel {
        concepts,
        context: x.map(|x| contexts[x].phrase.clone()),
        split: Some(split),
    };
    let mut concepts = Vec::with_capacity(cfg.n_concepts);
    for (c, latent) in concept_latents.into_iter().enumerate() {
        let id = format!("{}{c}", CONCEPT_NAMES[c]);
        let mut train_ids = Vec::with_capacity(cfg.train_per_concept);
        for t in 0..cfg.train_per_concept {
            let x = rng.below(cfg.n_contexts);
            let e = mix(&[(cfg.alpha, &latent), (cfg.beta, &contexts[x].latent)], cfg.sigma, &mut rng);
            let img = format!("train-{id}-{t:02}");
            images.insert(&img, &e, label(vec![id.clone()], Some(x), Split::Train))?;
            train_ids.push(img);
        }
        for (x, ctx) in contexts.iter().enumerate() {
            for i in 0..cfg.images_per_pair {
                let e = mix(&[(cfg.alpha, &latent), (cfg.beta, &ctx.latent)], cfg.sigma, &mut rng);
                images.insert(format!("eval-{id}-x{x:02}-{i}"), &e, label(vec![id.clone()], Some(x), Split::Eval))?;
            }
        }
        concepts.push(Concept {
            spec: ConceptSpec::new(id, train_ids),
            latent,
        });
    }

    for (x, ctx) in contexts.iter().enumerate() {
        for i in 0..cfg.context_only_eval {
            let e = mix(&[(1.0, &ctx.latent)], cfg.sigma, &mut rng);
            images.insert(format!("eval-ctx-x{x:02}-{i}"), &e, label(vec![], Some(x), Split::Eval))?;
        }
    }

    let mut all_pairs: Vec<(usize, usize)> = (0..cfg.n_concepts)
        .flat_map(|a| (a + 1..cfg.n_concepts).map(move |b| (a, b)))
        .collect();
    rng.shuffle(&mut all_pairs);
    let multi_pairs: Vec<(usize, usize)> = all_pairs[..cfg.multi_pairs].to_vec();
    for &(a, b) in &multi_pairs {
        let mut xs: Vec<usize> = (0..cfg.n_contexts).collect();
        rng.shuffle(&mut xs);
        let (ua, ub) = (&concepts[a].latent, &concepts[b].latent);
        let ids = vec![concepts[a].spec.concept_id.clone(), concepts[b].spec.concept_id.clone()];
        for &x in &xs[..cfg.multi_contexts] {
            for i in 0..cfg.multi_images {
                let e = mix(
                    &[(cfg.alpha, ua), (cfg.alpha, ub), (cfg.beta, &contexts[x].latent)],
                    cfg.sigma,
                    &mut rng,
                );
                images.insert(
                    format!("eval-multi-{}-{}-x{x:02}-{i}", ids[0], ids[1]),
                    &e,
                    label(ids.clone(), Some(x), Split::Eval),
                )?;
            }
        }
    }

    let mut pretrain_captions = Vec::new();
    for (x, ctx) in contexts.iter().enumerate() {
        for i in 0..cfg.context_only_pretrain {
            let e = mix(&[(1.0, &ctx.latent)], cfg.sigma, &mut rng);
            let img = format!("pre-ctx-x{x:02}-{i}");
            images.insert(&img, &e, label(vec![], Some(x), Split::Pretrain))?;
            for t in TEMPLATES {
                for f in FILLERS {
                    pretrain_captions.push(PretrainCaption {
                        caption: format!("{} {}", t.replace("{}", f), ctx.phrase),
                        image_id: img.clone(),
                    });
                }
            }
        }
    }

    Ok(SyntheticWorld {
        config: cfg.clone(),
        vocab: world_vocab(),
        concepts,
        contexts,
        multi_pairs,
        images,
        pretrain_captions,
    })
}
