use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::train::{IterationRecord, TrainReport};
use super::{default_templates, fill_template};
use crate::encoder::{Binding, FrozenEncoder, Input, ParamKey};
use crate::error::{PolarError, Result};
use crate::images::ImageStore;
use crate::linalg::{Matrix, NodeId, Rng, Tape};
use crate::lora::ConceptSpec;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    /// Learned vectors substituted for each placeholder occurrence (1 or 2).
    pub n_tokens: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub templates: Vec<String>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            n_tokens: 1,
            iterations: 500,
            learning_rate: 1e-3,
            seed: 0,
            templates: default_templates(),
        }
    }
}

/// Learned input embeddings that stand in for the placeholder token.
#[derive(Clone, Debug, PartialEq)]
pub struct TextualInversion {
    pub concept_id: String,
    pub encoder_fingerprint: String,
    /// `n_tokens × d_model`.
    pub embeddings: Matrix,
}

/// Token ids with every placeholder widened to `n` slots, plus the slot
/// positions.
fn expand(enc: &FrozenEncoder, text: &str, n: usize) -> Result<(Vec<u32>, Vec<usize>)> {
    let v_star = enc.tokenizer().v_star();
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for t in enc.tokenize(text)? {
        if t == v_star {
            for _ in 0..n {
                positions.push(tokens.len());
                tokens.push(t);
            }
        } else {
            tokens.push(t);
        }
    }
    let max = enc.config().max_seq;
    if tokens.len() > max {
        return Err(PolarError::TooLong { len: tokens.len(), max });
    }
    Ok((tokens, positions))
}

fn forward_query(
    enc: &FrozenEncoder,
    tape: &mut Tape,
    binding: &mut Binding,
    emb: NodeId,
    n_tokens: usize,
    tokens: &[u32],
    positions: &[usize],
) -> Result<NodeId> {
    let replace = if positions.is_empty() {
        None
    } else {
        let copies = vec![emb; positions.len() / n_tokens];
        let rows = if copies.len() == 1 { emb } else { tape.concat_rows(copies)? };
        Some((positions.to_vec(), rows))
    };
    Ok(enc.forward(tape, binding, Input::Tokens { tokens, replace }, &[])?.output)
}

impl TextualInversion {
    pub fn n_tokens(&self) -> usize {
        self.embeddings.rows()
    }

    /// Unnormalized text embedding of `text` with the learned vectors in
    /// place of the placeholder.
    pub fn encode(&self, enc: &FrozenEncoder, text: &str) -> Result<Vec<f32>> {
        if enc.fingerprint() != self.encoder_fingerprint {
            return Err(PolarError::Fingerprint {
                expected: enc.fingerprint().to_string(),
                found: self.encoder_fingerprint.clone(),
            });
        }
        let (tokens, positions) = expand(enc, text, self.n_tokens())?;
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let emb = tape.constant(self.embeddings.clone());
        let out = forward_query(enc, &mut tape, &mut binding, emb, self.n_tokens(), &tokens, &positions)?;
        Ok(tape.value(out).data().to_vec())
    }
}

fn initial_embedding(enc: &FrozenEncoder, spec: &ConceptSpec, n_tokens: usize) -> Result<Matrix> {
    let word = spec.class_name.as_deref().unwrap_or(&spec.v_star);
    let id = enc
        .tokenizer()
        .id(word)
        .ok_or_else(|| PolarError::UnknownWord(word.to_string()))?;
    let table = enc.weights().get(ParamKey::TokenEmbedding);
    let row = table.row(id as usize);
    let data = (0..n_tokens).flat_map(|_| row.iter().copied()).collect();
    Matrix::new(n_tokens, row.len(), data)
}

/// Optimizes the placeholder's input embedding(s) with the encoder frozen,
/// under the same per-entry MSE as POLAR and no penalty. Placeholder text is
/// the bare `v_star`; the class name, when given, only seeds the initial
/// vector.
pub fn train_textual_inversion(
    enc: &FrozenEncoder,
    spec: &ConceptSpec,
    images: &ImageStore,
    cfg: &InversionConfig,
) -> Result<(TextualInversion, TrainReport)> {
    if !(1..=2).contains(&cfg.n_tokens) {
        return Err(PolarError::Config("textual inversion supports 1 or 2 tokens".into()));
    }
    if cfg.templates.is_empty() {
        return Err(PolarError::Config("at least one template is required".into()));
    }
    spec.validate(enc)?;
    let started = Instant::now();
    let queries = cfg
        .templates
        .iter()
        .map(|t| expand(enc, &fill_template(t, &spec.v_star), cfg.n_tokens))
        .collect::<Result<Vec<_>>>()?;
    let targets = spec
        .train_image_ids
        .iter()
        .map(|id| images.embedding(id).map(<[f32]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let d_out = enc.config().d_out;
    let mut embeddings = initial_embedding(enc, spec, cfg.n_tokens)?;
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate), &[embeddings.data().len()]);
    let mut rng = Rng::derive(cfg.seed, &format!("inversion/{}", spec.concept_id));
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut diverged_at = None;

    for it in 0..cfg.iterations {
        let picks: Vec<usize> = targets.iter().map(|_| rng.below(queries.len())).collect();
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let emb = tape.leaf(Arc::new(embeddings.clone()), true);
        let mut rows: HashMap<usize, usize> = HashMap::new();
        let mut outs = Vec::new();
        for &q in &picks {
            if rows.contains_key(&q) {
                continue;
            }
            let (tokens, positions) = &queries[q];
            rows.insert(q, outs.len());
            outs.push(forward_query(enc, &mut tape, &mut binding, emb, cfg.n_tokens, tokens, positions)?);
        }
        let stacked = tape.concat_rows(outs)?;
        let normed = tape.normalize_rows(stacked)?;
        let text = tape.select_rows(normed, picks.iter().map(|q| rows[q]).collect())?;
        let target: Vec<f32> = targets.iter().flatten().copied().collect();
        let target = tape.constant(Matrix::new(targets.len(), d_out, target)?);
        let diff = tape.sub(text, target)?;
        let loss = tape.sum_squares(diff);
        let value = tape.scalar(loss)?;
        if !value.is_finite() {
            diverged_at = Some(it);
            break;
        }
        let grads = tape.backward(loss)?;
        adam.tick();
        adam.update(0, embeddings.data_mut(), grads.get(emb));
        trace.push(IterationRecord {
            mse: value,
            reg: 0.0,
            neg: 0.0,
            total: value,
            a_norm_deviation: 0.0,
        });
    }

    let report = TrainReport {
        concept_id: spec.concept_id.clone(),
        trace,
        final_b_sum_squares: 0.0,
        final_a_row_norms: Vec::new(),
        wall_seconds: started.elapsed().as_secs_f64(),
        diverged_at,
    };
    Ok((
        TextualInversion {
            concept_id: spec.concept_id.clone(),
            encoder_fingerprint: enc.fingerprint().to_string(),
            embeddings,
        },
        report,
    ))
}
