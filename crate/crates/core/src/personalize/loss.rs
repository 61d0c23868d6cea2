use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{BoundKind, BoundUpdate, FrozenEncoder, Input, PrefixCache, SiteAddress, Binding};
use crate::error::{PolarError, Result};
use crate::linalg::{l2_normalize, Matrix, NodeId, Tape};
use crate::lora::ConceptDelta;

/// A tokenized query and the (normalized) image embedding it should match.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub tokens: Vec<u32>,
    pub target: Vec<f32>,
}

impl TrainPair {
    pub fn new(tokens: Vec<u32>, target: &[f32]) -> Result<Self> {
        Ok(Self {
            tokens,
            target: l2_normalize(target)?,
        })
    }
}

/// Loss components. `mse` is the squared error summed over pairs and
/// dimensions, `neg` is the same sum over negatives, already negated, and
/// `total = mse + neg_weight·neg + λ·reg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub reg: f64,
    pub neg: f64,
    pub total: f64,
}

/// Gradients of the total loss for one site's factors, row-major like the
/// factors themselves. `a` is empty when `A` was frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteGrads {
    pub address: SiteAddress,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub(crate) struct LossTerms<'a> {
    pub pairs: &'a [TrainPair],
    pub negatives: Option<&'a [TrainPair]>,
    pub lambda: f64,
    pub neg_weight: f64,
    pub train_a: bool,
    /// Evaluate on an unrounded tape.
    pub exact: bool,
}

/// Forward and backward pass over all pairs at once. Each distinct query is
/// encoded a single time; rows are then gathered per pair.
pub(crate) fn evaluate(
    enc: &FrozenEncoder,
    cache: &mut PrefixCache,
    delta: &ConceptDelta,
    terms: &LossTerms<'_>,
    want_grads: bool,
) -> Result<(LossBreakdown, Vec<SiteGrads>)> {
    if terms.pairs.is_empty() {
        return Err(PolarError::Empty("training pairs".into()));
    }
    if let Some(neg) = terms.negatives {
        if neg.is_empty() {
            return Err(PolarError::Empty("negative pairs".into()));
        }
    }
    enc.check_updates(&[delta])?;
    let n_layers = enc.config().n_layers;
    let d_out = enc.config().d_out;
    let start = delta
        .sites
        .iter()
        .map(|s| s.address.first_layer(n_layers))
        .min()
        .ok_or_else(|| PolarError::Empty("delta sites".into()))?;

    let mut tape = if terms.exact { Tape::exact() } else { Tape::new() };
    let mut updates = Vec::with_capacity(delta.sites.len());
    let mut leaves = Vec::with_capacity(delta.sites.len());
    for s in &delta.sites {
        let a = tape.leaf(std::sync::Arc::new(s.a.clone()), want_grads && terms.train_a);
        let b = tape.leaf(std::sync::Arc::new(s.b.clone()), want_grads);
        updates.push(BoundUpdate {
            addr: s.address,
            kind: BoundKind::LowRank { a, b },
        });
        leaves.push((a, b));
    }

    let mut binding = Binding::frozen();
    let mut rows: HashMap<&[u32], usize> = HashMap::new();
    let mut outputs: Vec<NodeId> = Vec::new();
    let all = terms.pairs.iter().chain(terms.negatives.unwrap_or(&[]).iter());
    for p in all {
        if p.target.len() != d_out {
            return Err(PolarError::shape(format!("target has {} dims, expected {d_out}", p.target.len())));
        }
        if rows.contains_key(p.tokens.as_slice()) {
            continue;
        }
        let hidden = enc.prefix_hidden(cache, &p.tokens, start)?;
        let h = tape.leaf(hidden, false);
        let out = enc.forward(
            &mut tape,
            &mut binding,
            Input::Hidden {
                layer: start,
                hidden: h,
                seq_len: p.tokens.len(),
            },
            &updates,
        )?;
        rows.insert(p.tokens.as_slice(), outputs.len());
        outputs.push(out.output);
    }
    let stacked = tape.concat_rows(outputs)?;
    let normed = tape.normalize_rows(stacked)?;

    let mse_of = |tape: &mut Tape, set: &[TrainPair]| -> Result<NodeId> {
        let idx = set.iter().map(|p| rows[p.tokens.as_slice()]).collect();
        let text = tape.select_rows(normed, idx)?;
        let target: Vec<f32> = set.iter().flat_map(|p| p.target.iter().copied()).collect();
        let target = tape.constant(Matrix::new(set.len(), d_out, target)?);
        let diff = tape.sub(text, target)?;
        Ok(tape.sum_squares(diff))
    };

    let mse = mse_of(&mut tape, terms.pairs)?;
    let mut total = mse;
    let mut reg: Option<NodeId> = None;
    for &(_, b) in &leaves {
        let sq = tape.sum_squares(b);
        reg = Some(match reg {
            None => sq,
            Some(r) => tape.add(r, sq)?,
        });
    }
    let reg = reg.expect("at least one site");
    if terms.lambda != 0.0 {
        let weighted = tape.scale(reg, terms.lambda)?;
        total = tape.add(total, weighted)?;
    }
    let mut neg_value = 0.0;
    if let Some(neg) = terms.negatives {
        let m = mse_of(&mut tape, neg)?;
        let negated = tape.scale(m, -terms.neg_weight)?;
        neg_value = -tape.scalar(m)?;
        total = tape.add(total, negated)?;
    }

    let breakdown = LossBreakdown {
        mse: tape.scalar(mse)?,
        reg: tape.scalar(reg)?,
        neg: neg_value,
        total: tape.scalar(total)?,
    };
    if !want_grads {
        return Ok((breakdown, Vec::new()));
    }
    let grads = tape.backward(total)?;
    let site_grads = delta
        .sites
        .iter()
        .zip(&leaves)
        .map(|(s, &(a, b))| SiteGrads {
            address: s.address,
            a: if terms.train_a {
                grads.get(a).map_or_else(|| vec![0.0; s.a.data().len()], <[f64]>::to_vec)
            } else {
                Vec::new()
            },
            b: grads.get(b).map_or_else(|| vec![0.0; s.b.data().len()], <[f64]>::to_vec),
        })
        .collect();
    Ok((breakdown, site_grads))
}

/// Value and gradients of `Σ‖text − image‖² + λ·ΣB²` over `pairs` for the given
/// delta state.
pub fn polar_loss(
    enc: &FrozenEncoder,
    delta: &ConceptDelta,
    pairs: &[TrainPair],
    lambda: f64,
) -> Result<(LossBreakdown, Vec<SiteGrads>)> {
    if lambda < 0.0 {
        return Err(PolarError::Config("lambda must be non-negative".into()));
    }
    let terms = LossTerms {
        pairs,
        negatives: None,
        lambda,
        neg_weight: 0.0,
        train_a: true,
        exact: false,
    };
    evaluate(enc, &mut PrefixCache::new(), delta, &terms, true)
}

/// The (non-positive) negative-pair term: minus the summed squared distance
/// between each query's normalized embedding and its negative image.
pub fn negative_loss(enc: &FrozenEncoder, delta: &ConceptDelta, neg_pairs: &[TrainPair]) -> Result<f64> {
    if neg_pairs.is_empty() {
        return Err(PolarError::Empty("negative pairs".into()));
    }
    let terms = LossTerms {
        pairs: neg_pairs,
        negatives: None,
        lambda: 0.0,
        neg_weight: 0.0,
        train_a: false,
        exact: false,
    };
    let (b, _) = evaluate(enc, &mut PrefixCache::new(), delta, &terms, false)?;
    Ok(-b.mse)
}
