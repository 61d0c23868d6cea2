use serde::{Deserialize, Serialize};

use super::loss::{evaluate, LossTerms, TrainPair};
use crate::encoder::{FrozenEncoder, PrefixCache};
use crate::error::Result;
use crate::lora::ConceptDelta;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference half step applied to each `f32` entry.
    pub step: f64,
    /// Evaluate the loss without rounding activations to `f32`, which
    /// supports steps far below `f32` resolution.
    pub exact: bool,
    pub tolerance: f64,
    pub lambda: f64,
    pub neg_weight: f64,
    pub train_a: bool,
    /// Added to every analytic gradient entry; a negative control.
    pub corrupt: f64,
}

impl GradCheckOptions {
    /// Step 1e-5 with relative tolerance 1e-5 on an unrounded tape.
    pub fn exact() -> Self {
        Self {
            step: 1e-5,
            exact: true,
            tolerance: 1e-5,
            ..Self::default()
        }
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            exact: false,
            tolerance: 1e-3,
            lambda: 0.35,
            neg_weight: 1.0,
            train_a: true,
            corrupt: 0.0,
        }
    }
}

/// Agreement for one factor matrix. `rel_error` is
/// `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖)` (0 when both vanish).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> ParamCheck {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let na = l2(&mut analytic.iter().copied());
    let nn = l2(&mut numeric.iter().copied());
    let denom = na.max(nn);
    ParamCheck {
        name,
        entries: analytic.len(),
        rel_error: if denom == 0.0 { 0.0 } else { diff / denom },
        max_abs_error: analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max),
        grad_norm: na,
    }
}

fn slot(d: &mut ConceptDelta, site: usize, which: usize, i: usize) -> &mut f32 {
    let s = &mut d.sites[site];
    let m = if which == 0 { &mut s.a } else { &mut s.b };
    &mut m.data_mut()[i]
}

/// Compares reverse-mode gradients of the full loss against central
/// differences for every entry of every trainable factor.
pub fn gradcheck(
    enc: &FrozenEncoder,
    delta: &ConceptDelta,
    pairs: &[TrainPair],
    negatives: Option<&[TrainPair]>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut cache = PrefixCache::new();
    let terms = LossTerms {
        pairs,
        negatives,
        lambda: opts.lambda,
        neg_weight: opts.neg_weight,
        train_a: opts.train_a,
        exact: opts.exact,
    };
    let (loss, grads) = evaluate(enc, &mut cache, delta, &terms, true)?;
    let mut loss_at = |d: &ConceptDelta| -> Result<f64> { Ok(evaluate(enc, &mut cache, d, &terms, false)?.0.total) };

    let mut params = Vec::new();
    for (si, g) in grads.iter().enumerate() {
        for which in [0usize, 1] {
            if which == 0 && !opts.train_a {
                continue;
            }
            let analytic: Vec<f64> = if which == 0 { &g.a } else { &g.b }
                .iter()
                .map(|x| x + opts.corrupt)
                .collect();
            let mut numeric = Vec::with_capacity(analytic.len());
            let mut probe = delta.clone();
            for i in 0..analytic.len() {
                let x = *slot(&mut probe, si, which, i);
                let plus = (f64::from(x) + opts.step) as f32;
                let minus = (f64::from(x) - opts.step) as f32;
                *slot(&mut probe, si, which, i) = plus;
                let lp = loss_at(&probe)?;
                *slot(&mut probe, si, which, i) = minus;
                let lm = loss_at(&probe)?;
                *slot(&mut probe, si, which, i) = x;
                numeric.push((lp - lm) / (f64::from(plus) - f64::from(minus)));
            }
            let name = format!("{}.{}", g.address, if which == 0 { "A" } else { "B" });
            params.push(compare(name, &analytic, &numeric));
        }
    }
    let passed = params.iter().all(|p| p.rel_error < opts.tolerance);
    Ok(GradCheckReport {
        loss: loss.total,
        tolerance: opts.tolerance,
        params,
        passed,
    })
}
