use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loss::{evaluate, LossTerms, TrainPair};
use super::{default_templates, fill_template};
use crate::encoder::{FrozenEncoder, PrefixCache, Site, SiteAddress};
use crate::error::{PolarError, Result};
use crate::images::{ImageStore, Split};
use crate::linalg::{l2_normalize, norm, Matrix, Rng};
use crate::lora::{orthogonal_basis, ConceptDelta, ConceptSpec, HyperRecord, SiteFactors};
use crate::optim::{Adam, AdamConfig};

/// Frozen-`A` training: the concept takes rows `slot·r .. (slot+1)·r` of a
/// basis of `n_slots·r` orthonormal vectors shared by every concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrthoSlot {
    pub basis_seed: u64,
    pub slot: usize,
    pub n_slots: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 decay inside Adam, applied to `A` and `B`.
    pub weight_decay: f64,
    pub templates: Vec<String>,
    pub rank: usize,
    /// Empty means the value transform of the last layer.
    pub sites: Vec<SiteAddress>,
    pub seed: u64,
    pub constrain_a: bool,
    pub use_negatives: bool,
    pub neg_weight: f64,
    pub orthogonal: Option<OrthoSlot>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.35,
            iterations: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            templates: default_templates(),
            rank: 1,
            sites: Vec::new(),
            seed: 0,
            constrain_a: true,
            use_negatives: false,
            neg_weight: 1.0,
            orthogonal: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PolarError::Config(m.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a finite non-negative number");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if self.templates.is_empty() {
            return bad("at least one template is required");
        }
        if let Some(t) = self.templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(PolarError::Config(format!("template '{t}' needs exactly one {{}} slot")));
        }
        if let Some(o) = self.orthogonal {
            if o.slot >= o.n_slots {
                return bad("orthogonal slot out of range");
            }
        }
        Ok(())
    }

    /// Sites to train, with the empty list resolved to the last layer's V.
    pub fn resolved_sites(&self, enc: &FrozenEncoder) -> Vec<SiteAddress> {
        if self.sites.is_empty() {
            vec![SiteAddress::new(enc.config().n_layers, Site::V)]
        } else {
            self.sites.clone()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub mse: f64,
    pub reg: f64,
    pub neg: f64,
    pub total: f64,
    /// Largest `|‖a_row‖ − 1|` after this iteration's update.
    pub a_norm_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub concept_id: String,
    pub trace: Vec<IterationRecord>,
    pub final_b_sum_squares: f64,
    pub final_a_row_norms: Vec<f64>,
    pub wall_seconds: f64,
    /// Iteration whose loss was non-finite; training stopped before it.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    pub fn check(&self) -> Result<()> {
        match self.diverged_at {
            Some(iteration) => Err(PolarError::Diverged { iteration }),
            None => Ok(()),
        }
    }
}

fn initial_a(cfg: &TrainConfig, rng: &mut Rng, n: usize) -> Result<Matrix> {
    match cfg.orthogonal {
        Some(o) => {
            let basis = orthogonal_basis(o.basis_seed, o.n_slots * cfg.rank, n)?;
            let start = o.slot * cfg.rank * n;
            Matrix::new(cfg.rank, n, basis.data()[start..start + cfg.rank * n].to_vec())
        }
        None => {
            let mut data = Vec::with_capacity(cfg.rank * n);
            for _ in 0..cfg.rank {
                data.extend(l2_normalize(&rng.gaussian_vec(n, 1.0))?);
            }
            Matrix::new(cfg.rank, n, data)
        }
    }
}

fn project_rows(a: &mut Matrix) {
    for r in 0..a.rows() {
        let n = norm(a.row(r));
        if n > 0.0 {
            for v in a.row_mut(r) {
                *v = (f64::from(*v) / n) as f32;
            }
        }
    }
}

/// Trains one concept's factors. `A` rows start as seeded random unit
/// vectors (or fixed basis rows), `B` starts at zero. Every iteration draws a
/// template per training image, takes one Adam step on the full batch and,
/// with `constrain_a`, rescales each `A` row back to unit norm.
pub fn train_polar(
    enc: &FrozenEncoder,
    spec: &ConceptSpec,
    images: &ImageStore,
    cfg: &TrainConfig,
) -> Result<(ConceptDelta, TrainReport)> {
    cfg.validate()?;
    spec.validate(enc)?;
    let started = Instant::now();
    let sites = cfg.resolved_sites(enc);
    let placeholder = spec.placeholder();
    let queries = cfg
        .templates
        .iter()
        .map(|t| enc.tokenize(&fill_template(t, &placeholder)))
        .collect::<Result<Vec<_>>>()?;
    let targets = spec
        .train_image_ids
        .iter()
        .map(|id| images.embedding(id).map(<[f32]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let negative_pool: Vec<&[f32]> = if cfg.use_negatives {
        let pool: Vec<&[f32]> = images
            .iter()
            .filter(|r| {
                r.label.split == Some(Split::Train)
                    && !r.label.concepts.is_empty()
                    && !r.label.concepts.contains(&spec.concept_id)
            })
            .map(|r| r.embedding.as_slice())
            .collect();
        if pool.is_empty() {
            return Err(PolarError::Empty(format!(
                "negative images for concept {}",
                spec.concept_id
            )));
        }
        pool
    } else {
        Vec::new()
    };

    let mut rng = Rng::derive(cfg.seed, &format!("personalize/{}", spec.concept_id));
    let mut factors = Vec::with_capacity(sites.len());
    for &addr in &sites {
        let (m, n) = enc.site_shape(addr)?;
        factors.push(SiteFactors {
            address: addr,
            a: initial_a(cfg, &mut rng, n)?,
            b: Matrix::zeros(m, cfg.rank),
        });
    }
    let hyper = HyperRecord {
        lambda: cfg.lambda,
        iterations: cfg.iterations,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        constrain_a: cfg.constrain_a,
        use_negatives: cfg.use_negatives,
        weight_decay: cfg.weight_decay,
        frozen_a: cfg.orthogonal.is_some(),
    };
    let mut delta = ConceptDelta::new(spec.concept_id.clone(), enc.fingerprint(), cfg.rank, factors, hyper)?;
    let train_a = cfg.orthogonal.is_none();
    let sizes: Vec<usize> = delta
        .sites
        .iter()
        .flat_map(|s| [s.a.data().len(), s.b.data().len()])
        .collect();
    let mut adam = Adam::new(cfg.adam(), &sizes);
    let mut cache = PrefixCache::new();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut diverged_at = None;

    for it in 0..cfg.iterations {
        let pairs: Vec<TrainPair> = targets
            .iter()
            .map(|t| TrainPair {
                tokens: queries[rng.below(queries.len())].clone(),
                target: t.clone(),
            })
            .collect();
        let negatives: Vec<TrainPair> = pairs
            .iter()
            .take(if cfg.use_negatives { pairs.len() } else { 0 })
            .map(|p| TrainPair {
                tokens: p.tokens.clone(),
                target: negative_pool[rng.below(negative_pool.len())].to_vec(),
            })
            .collect();
        let terms = LossTerms {
            pairs: &pairs,
            negatives: cfg.use_negatives.then_some(negatives.as_slice()),
            lambda: cfg.lambda,
            neg_weight: cfg.neg_weight,
            train_a,
            exact: false,
        };
        let (loss, grads) = evaluate(enc, &mut cache, &delta, &terms, true)?;
        if !loss.total.is_finite() {
            diverged_at = Some(it);
            break;
        }
        adam.tick();
        let mut deviation: f64 = 0.0;
        for (i, (site, g)) in delta.sites.iter_mut().zip(&grads).enumerate() {
            if train_a {
                adam.update(2 * i, site.a.data_mut(), Some(&g.a));
            }
            adam.update(2 * i + 1, site.b.data_mut(), Some(&g.b));
            if cfg.constrain_a && train_a {
                project_rows(&mut site.a);
            }
            for r in 0..site.a.rows() {
                deviation = deviation.max((norm(site.a.row(r)) - 1.0).abs());
            }
        }
        trace.push(IterationRecord {
            mse: loss.mse,
            reg: loss.reg,
            neg: loss.neg,
            total: loss.total,
            a_norm_deviation: deviation,
        });
    }

    let report = TrainReport {
        concept_id: spec.concept_id.clone(),
        trace,
        final_b_sum_squares: delta.b_sum_squares(),
        final_a_row_norms: delta.a_row_norms(),
        wall_seconds: started.elapsed().as_secs_f64(),
        diverged_at,
    };
    Ok((delta, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::WeightUpdate;
    use crate::personalize::testkit::small;

    fn cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let (w, enc) = small();
        let (d, rep) = train_polar(&enc, &w.concepts[0].spec, &w.images, &cfg(0)).unwrap();
        assert!(rep.trace.is_empty());
        assert!(d.sites.iter().all(|s| s.b.is_zero()));
        let tokens = enc.tokenize("an image of sks in the snow").unwrap();
        assert_eq!(enc.encode_text(&tokens, &[]).unwrap(), enc.encode_text(&tokens, &[&d as &dyn WeightUpdate]).unwrap());
        assert_eq!(rep.final_a_row_norms.len(), 1);
        assert!((rep.final_a_row_norms[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_and_constrained() {
        let (w, enc) = small();
        let before = enc.fingerprint().to_string();
        let spec = &w.concepts[1].spec;
        let c = TrainConfig { rank: 2, ..cfg(40) };
        let (d1, r1) = train_polar(&enc, spec, &w.images, &c).unwrap();
        let (d2, _) = train_polar(&enc, spec, &w.images, &c).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(enc.fingerprint(), before);
        assert_eq!(r1.trace.len(), 40);
        assert!(r1.trace.iter().all(|t| t.a_norm_deviation <= 1e-6 && t.total.is_finite()));
        assert!(d1.b_sum_squares() > 0.0);
        let other = train_polar(&enc, spec, &w.images, &TrainConfig { seed: 9, ..c }).unwrap().0;
        assert_ne!(d1, other);
    }

    #[test]
    fn unconstrained_a_drifts_from_unit_norm() {
        let (w, enc) = small();
        let c = TrainConfig {
            constrain_a: false,
            lambda: 0.0,
            learning_rate: 1e-2,
            ..cfg(30)
        };
        let (_, rep) = train_polar(&enc, &w.concepts[0].spec, &w.images, &c).unwrap();
        assert!(rep.trace.last().unwrap().a_norm_deviation > 1e-4);
    }

    #[test]
    fn orthogonal_slot_keeps_basis_rows() {
        let (w, enc) = small();
        let slot = OrthoSlot {
            basis_seed: 5,
            slot: 1,
            n_slots: 2,
        };
        let c = TrainConfig {
            orthogonal: Some(slot),
            ..cfg(20)
        };
        let (d, _) = train_polar(&enc, &w.concepts[0].spec, &w.images, &c).unwrap();
        let n = d.sites[0].a.cols();
        let basis = orthogonal_basis(5, 2, n).unwrap();
        assert_eq!(d.sites[0].a.row(0), basis.row(1));
        assert!(d.hyper.frozen_a);
    }

    #[test]
    fn fitting_lowers_the_loss() {
        let (w, enc) = small();
        let c = TrainConfig {
            lambda: 0.0,
            learning_rate: 1e-2,
            ..cfg(150)
        };
        let (_, rep) = train_polar(&enc, &w.concepts[0].spec, &w.images, &c).unwrap();
        let first = rep.trace[0].mse;
        let last = rep.trace.last().unwrap().mse;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn huge_penalty_keeps_delta_tiny() {
        let (w, enc) = small();
        let c = TrainConfig { lambda: 1e6, ..cfg(100) };
        let (d, _) = train_polar(&enc, &w.concepts[0].spec, &w.images, &c).unwrap();
        assert!(d.delta_frobenius().unwrap() < 1e-3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (w, enc) = small();
        let spec = &w.concepts[0].spec;
        for bad in [
            TrainConfig { lambda: -1.0, ..cfg(1) },
            TrainConfig { rank: 0, ..cfg(1) },
            TrainConfig { templates: vec![], ..cfg(1) },
            TrainConfig { templates: vec!["no slot".into()], ..cfg(1) },
        ] {
            assert!(matches!(train_polar(&enc, spec, &w.images, &bad), Err(PolarError::Config(_))));
        }
        let mut missing = spec.clone();
        missing.train_image_ids.push("nope".into());
        assert!(train_polar(&enc, &missing, &w.images, &cfg(1)).is_err());
    }

    #[test]
    fn negatives_need_other_concepts() {
        let (w, enc) = small();
        let c = TrainConfig { use_negatives: true, ..cfg(5) };
        let (_, rep) = train_polar(&enc, &w.concepts[0].spec, &w.images, &c).unwrap();
        assert!(rep.trace.iter().all(|t| t.neg < 0.0));
        let lonely = w.images.filter(|r| r.label.concepts.iter().all(|c| c == &w.concepts[0].spec.concept_id));
        assert!(matches!(
            train_polar(&enc, &w.concepts[0].spec, &lonely, &c),
            Err(PolarError::Empty(_))
        ));
    }
}
