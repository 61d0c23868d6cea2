use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{Binding, FrozenEncoder, Input};
use super::weights::{ParamKey, Weights};
use crate::error::{PolarError, Result};
use crate::linalg::{l2_normalize, Matrix, Rng, Tape};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 6e-5,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub wall_seconds: f64,
}

/// Caption paired with the image embedding it should land on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub caption: String,
    pub target: Vec<f32>,
}

/// Full-parameter training of `enc` so normalized caption embeddings match
/// their normalized targets under per-entry MSE. Minibatches are drawn with
/// replacement from a stream seeded by `cfg.seed`.
pub fn pretrain(
    enc: &FrozenEncoder,
    pairs: &[CaptionPair],
    cfg: &PretrainConfig,
) -> Result<(FrozenEncoder, PretrainReport)> {
    if pairs.is_empty() {
        return Err(PolarError::Empty("pretraining pairs".into()));
    }
    if cfg.batch_size == 0 {
        return Err(PolarError::Config("batch_size must be at least 1".into()));
    }
    let started = Instant::now();
    let d_out = enc.config().d_out;
    let mut data = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.target.len() != d_out {
            return Err(PolarError::shape(format!(
                "target for '{}' has {} dims, encoder outputs {d_out}",
                p.caption,
                p.target.len()
            )));
        }
        data.push((enc.tokenize(&p.caption)?, l2_normalize(&p.target)?));
    }

    let config = enc.config().clone();
    let keys = Weights::keys(&config);
    let sizes: Vec<usize> = keys.iter().map(|&k| enc.weights().get(k).data().len()).collect();
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate), &sizes);
    let mut current = enc.clone();
    let mut rng = Rng::derive(cfg.seed, "pretrain");
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(data.len())).collect();
        let mut tape = Tape::new();
        let mut binding = Binding::trainable();
        let mut outs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * d_out);
        for &i in &batch {
            let (tokens, target) = &data[i];
            let out = current.forward(&mut tape, &mut binding, Input::Tokens { tokens, replace: None }, &[])?;
            outs.push(out.output);
            targets.extend_from_slice(target);
        }
        let stacked = tape.concat_rows(outs)?;
        let normed = tape.normalize_rows(stacked)?;
        let target = tape.constant(Matrix::new(batch.len(), d_out, targets)?);
        let diff = tape.sub(normed, target)?;
        let loss = tape.mean_squares(diff);
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            return Err(PolarError::Diverged { iteration: step });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        let bound: HashMap<ParamKey, _> = binding.bound().collect();
        drop(tape);
        let weights = current.weights_mut();
        adam.tick();
        for (slot, &key) in keys.iter().enumerate() {
            let g = bound.get(&key).and_then(|&id| grads.get(id));
            adam.update(slot, weights.get_mut(key).data_mut(), g);
        }
        if let Some((key, _)) = weights.iter().find(|(_, m)| m.data().iter().any(|v| !v.is_finite())) {
            return Err(PolarError::NonFinite(format!("{key:?} after step {step}")));
        }
    }
    current.refresh_fingerprint();
    Ok((
        current,
        PretrainReport {
            losses,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}
