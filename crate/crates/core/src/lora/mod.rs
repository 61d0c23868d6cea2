//! Per-concept low-rank updates `ΔW = B·A`, their merges, and the delta file
//! format.

mod io;
mod merge;

pub use io::{load_delta, load_merged, save_delta, save_merged, DELTA_FORMAT_VERSION};
pub use merge::{merge, merge_add, merge_avg, merge_max, orthogonal_basis, MergeStrategy, MergedDelta, MergedSite};

use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenEncoder, SiteAddress};
use crate::error::{PolarError, Result};
use crate::linalg::{norm, Matrix};

/// Borrowed view of one site's update as the encoder consumes it.
#[derive(Clone, Copy, Debug)]
pub enum UpdateRef<'a> {
    LowRank { a: &'a Matrix, b: &'a Matrix },
    Dense(&'a Matrix),
}

/// Anything the encoder can add to its frozen weights during a forward pass.
pub trait WeightUpdate {
    fn encoder_fingerprint(&self) -> &str;
    fn site_updates(&self) -> Vec<(SiteAddress, UpdateRef<'_>)>;
    /// Concepts this update encodes, for result echoes.
    fn concept_ids(&self) -> Vec<String> {
        Vec::new()
    }
}

/// A personal concept: its placeholder token, optional class name, and the
/// ids of its training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept_id: String,
    #[serde(default = "default_v_star")]
    pub v_star: String,
    #[serde(default)]
    pub class_name: Option<String>,
    pub train_image_ids: Vec<String>,
}

fn default_v_star() -> String {
    crate::encoder::DEFAULT_V_STAR.to_string()
}

impl ConceptSpec {
    pub fn new(concept_id: impl Into<String>, train_image_ids: Vec<String>) -> Self {
        Self {
            concept_id: concept_id.into(),
            v_star: default_v_star(),
            class_name: None,
            train_image_ids,
        }
    }

    /// Text substituted into template slots: `"sks"` or `"sks dress"`.
    pub fn placeholder(&self) -> String {
        match &self.class_name {
            Some(c) => format!("{} {c}", self.v_star),
            None => self.v_star.clone(),
        }
    }

    pub fn validate(&self, enc: &FrozenEncoder) -> Result<()> {
        if self.train_image_ids.is_empty() {
            return Err(PolarError::Empty(format!(
                "training images for concept {}",
                self.concept_id
            )));
        }
        if enc.tokenizer().id(&self.v_star).is_none() {
            return Err(PolarError::UnknownWord(self.v_star.clone()));
        }
        Ok(())
    }
}

/// Factors for one site: `A` is r×n, `B` is m×r.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteFactors {
    pub address: SiteAddress,
    pub a: Matrix,
    pub b: Matrix,
}

/// Training settings stored alongside the factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct HyperRecord {
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub constrain_a: bool,
    #[serde(default)]
    pub use_negatives: bool,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub frozen_a: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDelta {
    pub concept_id: String,
    pub encoder_fingerprint: String,
    pub rank: usize,
    pub sites: Vec<SiteFactors>,
    pub hyper: HyperRecord,
}

impl ConceptDelta {
    /// Checks factor shapes against `rank` and against each other.
    pub fn new(
        concept_id: impl Into<String>,
        encoder_fingerprint: impl Into<String>,
        rank: usize,
        sites: Vec<SiteFactors>,
        hyper: HyperRecord,
    ) -> Result<Self> {
        let delta = Self {
            concept_id: concept_id.into(),
            encoder_fingerprint: encoder_fingerprint.into(),
            rank,
            sites,
            hyper,
        };
        delta.validate()?;
        Ok(delta)
    }

    /// Delta with `B = 0` at each site and `A` rows set to the first basis
    /// vectors; a no-op on the encoder.
    pub fn zeros(enc: &FrozenEncoder, concept_id: &str, sites: &[SiteAddress], rank: usize) -> Result<Self> {
        let mut factors = Vec::new();
        for &addr in sites {
            let (m, n) = enc.site_shape(addr)?;
            let mut a = Matrix::zeros(rank, n);
            for r in 0..rank.min(n) {
                a.set(r, r, 1.0);
            }
            factors.push(SiteFactors {
                address: addr,
                a,
                b: Matrix::zeros(m, rank),
            });
        }
        Self::new(concept_id, enc.fingerprint(), rank, factors, HyperRecord::default())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(PolarError::Config("rank must be at least 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.sites {
            if !seen.insert(s.address) {
                return Err(PolarError::Config(format!("duplicate site {}", s.address)));
            }
            if s.a.rows() != self.rank || s.b.cols() != self.rank {
                return Err(PolarError::shape(format!(
                    "site {}: A is {:?}, B is {:?}, rank {}",
                    s.address,
                    s.a.shape(),
                    s.b.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    pub fn site(&self, addr: SiteAddress) -> Option<&SiteFactors> {
        self.sites.iter().find(|s| s.address == addr)
    }

    pub fn addresses(&self) -> Vec<SiteAddress> {
        self.sites.iter().map(|s| s.address).collect()
    }

    /// Dense `B·A` for one site.
    pub fn materialize(&self, addr: SiteAddress) -> Result<Matrix> {
        let s = self
            .site(addr)
            .ok_or_else(|| PolarError::MissingSite(addr.to_string()))?;
        s.b.matmul(&s.a)
    }

    /// Σ over sites of ‖B‖², the quantity the regularizer penalizes.
    pub fn b_sum_squares(&self) -> f64 {
        self.sites.iter().map(|s| s.b.sum_squares()).sum()
    }

    /// L2 norm of every row of every `A`, in site order.
    pub fn a_row_norms(&self) -> Vec<f64> {
        self.sites
            .iter()
            .flat_map(|s| (0..s.a.rows()).map(move |r| norm(s.a.row(r))))
            .collect()
    }

    pub fn delta_frobenius(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.sites {
            total += s.b.matmul(&s.a)?.sum_squares();
        }
        Ok(total.sqrt())
    }
}

impl WeightUpdate for ConceptDelta {
    fn encoder_fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    fn site_updates(&self) -> Vec<(SiteAddress, UpdateRef<'_>)> {
        self.sites
            .iter()
            .map(|s| (s.address, UpdateRef::LowRank { a: &s.a, b: &s.b }))
            .collect()
    }

    fn concept_ids(&self) -> Vec<String> {
        vec![self.concept_id.clone()]
    }
}
