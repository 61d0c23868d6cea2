use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ConceptDelta, UpdateRef, WeightUpdate};
use crate::encoder::SiteAddress;
use crate::error::{PolarError, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    /// Concatenate factors along the rank dimension; `ΔW = Σ ΔW_i`.
    Add,
    /// Dense mean of the materialized updates.
    Avg,
    /// Dense elementwise maximum over signed entries.
    Max,
    /// Additive merge of deltas whose `A` rows come from a shared orthonormal
    /// basis and were frozen during training.
    Ortho,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 4] = [
        MergeStrategy::Add,
        MergeStrategy::Avg,
        MergeStrategy::Max,
        MergeStrategy::Ortho,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Add => "add",
            MergeStrategy::Avg => "avg",
            MergeStrategy::Max => "max",
            MergeStrategy::Ortho => "ortho",
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeStrategy {
    type Err = PolarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "add" => Ok(MergeStrategy::Add),
            "avg" | "mean" => Ok(MergeStrategy::Avg),
            "max" => Ok(MergeStrategy::Max),
            "ortho" | "orthogonal" => Ok(MergeStrategy::Ortho),
            other => Err(PolarError::Config(format!("unknown merge strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MergedSite {
    /// `B = [B_1 … B_k]`, `A = [A_1; …; A_k]`; `blocks` holds each source's rank.
    Stacked { a: Matrix, b: Matrix, blocks: Vec<usize> },
    Dense(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedDelta {
    pub sources: Vec<String>,
    pub encoder_fingerprint: String,
    pub strategy: MergeStrategy,
    pub sites: Vec<(SiteAddress, MergedSite)>,
}

impl MergedDelta {
    pub fn site(&self, addr: SiteAddress) -> Option<&MergedSite> {
        self.sites.iter().find(|(a, _)| *a == addr).map(|(_, s)| s)
    }

    /// Stacked rank at a site (`None` for dense merges).
    pub fn stacked_rank(&self, addr: SiteAddress) -> Option<usize> {
        match self.site(addr)? {
            MergedSite::Stacked { a, .. } => Some(a.rows()),
            MergedSite::Dense(_) => None,
        }
    }

    /// Dense ΔW at a site. Stacked sites are summed block by block in source
    /// order, so the result is exactly `ΔW_1 + ΔW_2 + …`.
    pub fn materialize(&self, addr: SiteAddress) -> Result<Matrix> {
        match self
            .site(addr)
            .ok_or_else(|| PolarError::MissingSite(addr.to_string()))?
        {
            MergedSite::Dense(dw) => Ok(dw.clone()),
            MergedSite::Stacked { a, b, blocks } => {
                let mut acc: Option<Matrix> = None;
                let mut start = 0;
                for &r in blocks {
                    let a_blk = row_block(a, start, r);
                    let b_blk = col_block(b, start, r);
                    let dw = b_blk.matmul(&a_blk)?;
                    acc = Some(match acc {
                        None => dw,
                        Some(prev) => prev.add(&dw)?,
                    });
                    start += r;
                }
                acc.ok_or_else(|| PolarError::Empty("merged site".into()))
            }
        }
    }
}

impl WeightUpdate for MergedDelta {
    fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    fn site_updates(&self) -> Vec<(SiteAddress, UpdateRef<'_>)> {
        self.sites
            .iter()
            .map(|(addr, s)| {
                let u = match s {
                    MergedSite::Stacked { a, b, .. } => UpdateRef::LowRank { a, b },
                    MergedSite::Dense(dw) => UpdateRef::Dense(dw),
                };
                (*addr, u)
            })
            .collect()
    }

    fn concept_ids(&self) -> Vec<String> {
        self.sources.clone()
    }
}

fn row_block(m: &Matrix, start: usize, len: usize) -> Matrix {
    let cols = m.cols();
    Matrix::from_raw(len, cols, m.data()[start * cols..(start + len) * cols].to_vec())
}

fn col_block(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * len);
    for r in 0..m.rows() {
        data.extend_from_slice(&m.row(r)[start..start + len]);
    }
    Matrix::from_raw(m.rows(), len, data)
}

fn check_compatible(deltas: &[&ConceptDelta]) -> Result<Vec<SiteAddress>> {
    let first = deltas
        .first()
        .ok_or_else(|| PolarError::Empty("deltas to merge".into()))?;
    let mut sites = first.addresses();
    sites.sort();
    for d in &deltas[1..] {
        if d.encoder_fingerprint != first.encoder_fingerprint {
            return Err(PolarError::Fingerprint {
                expected: first.encoder_fingerprint.clone(),
                found: d.encoder_fingerprint.clone(),
            });
        }
        let mut other = d.addresses();
        other.sort();
        if other != sites {
            return Err(PolarError::Config(format!(
                "site sets differ between {} and {}",
                first.concept_id, d.concept_id
            )));
        }
    }
    Ok(first.addresses())
}

fn sources(deltas: &[&ConceptDelta]) -> Vec<String> {
    deltas.iter().map(|d| d.concept_id.clone()).collect()
}

pub fn merge_add(deltas: &[&ConceptDelta]) -> Result<MergedDelta> {
    let sites = check_compatible(deltas)?;
    let mut merged = Vec::new();
    for addr in sites {
        let parts: Vec<_> = deltas.iter().map(|d| d.site(addr).expect("checked")).collect();
        let (m, n) = (parts[0].b.rows(), parts[0].a.cols());
        let total: usize = parts.iter().map(|p| p.a.rows()).sum();
        let mut a = Vec::with_capacity(total * n);
        for p in &parts {
            if p.a.cols() != n || p.b.rows() != m {
                return Err(PolarError::shape(format!("factor shapes differ at {addr}")));
            }
            a.extend_from_slice(p.a.data());
        }
        let mut b = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in &parts {
                b.extend_from_slice(p.b.row(r));
            }
        }
        merged.push((
            addr,
            MergedSite::Stacked {
                a: Matrix::from_raw(total, n, a),
                b: Matrix::from_raw(m, total, b),
                blocks: parts.iter().map(|p| p.a.rows()).collect(),
            },
        ));
    }
    Ok(MergedDelta {
        sources: sources(deltas),
        encoder_fingerprint: deltas[0].encoder_fingerprint.clone(),
        strategy: MergeStrategy::Add,
        sites: merged,
    })
}

fn merge_dense(
    deltas: &[&ConceptDelta],
    strategy: MergeStrategy,
    combine: impl Fn(&[Matrix]) -> Result<Matrix>,
) -> Result<MergedDelta> {
    let sites = check_compatible(deltas)?;
    let mut merged = Vec::new();
    for addr in sites {
        let dws = deltas
            .iter()
            .map(|d| d.materialize(addr))
            .collect::<Result<Vec<_>>>()?;
        merged.push((addr, MergedSite::Dense(combine(&dws)?)));
    }
    Ok(MergedDelta {
        sources: sources(deltas),
        encoder_fingerprint: deltas[0].encoder_fingerprint.clone(),
        strategy,
        sites: merged,
    })
}

pub fn merge_avg(deltas: &[&ConceptDelta]) -> Result<MergedDelta> {
    merge_dense(deltas, MergeStrategy::Avg, |dws| {
        let mut acc = dws[0].clone();
        for dw in &dws[1..] {
            acc = acc.add(dw)?;
        }
        let k = dws.len() as f32;
        let data = acc.data().iter().map(|v| v / k).collect();
        Matrix::new(acc.rows(), acc.cols(), data)
    })
}

pub fn merge_max(deltas: &[&ConceptDelta]) -> Result<MergedDelta> {
    merge_dense(deltas, MergeStrategy::Max, |dws| {
        let mut acc = dws[0].clone();
        for dw in &dws[1..] {
            for (o, &v) in acc.data_mut().iter_mut().zip(dw.data()) {
                *o = o.max(v);
            }
        }
        Ok(acc)
    })
}

pub fn merge(deltas: &[&ConceptDelta], strategy: MergeStrategy) -> Result<MergedDelta> {
    match strategy {
        MergeStrategy::Add => merge_add(deltas),
        MergeStrategy::Avg => merge_avg(deltas),
        MergeStrategy::Max => merge_max(deltas),
        MergeStrategy::Ortho => {
            let mut m = merge_add(deltas)?;
            m.strategy = MergeStrategy::Ortho;
            Ok(m)
        }
    }
}

/// `count` mutually orthonormal `n`-vectors (one per row) from seeded
/// Gaussian draws and two-pass modified Gram–Schmidt in `f64`.
pub fn orthogonal_basis(seed: u64, count: usize, n: usize) -> Result<Matrix> {
    if count > n {
        return Err(PolarError::Config(format!(
            "cannot fit {count} orthogonal rows in dimension {n}"
        )));
    }
    let mut rng = Rng::derive(seed, "orthogonal-basis");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len < 1e-6 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / len).collect());
    }
    let data = basis.iter().flatten().map(|&x| x as f32).collect();
    Ok(Matrix::from_raw(count, n, data))
}
