//! Exact cosine-similarity retrieval over a fixed image database.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::encoder::{FrozenEncoder, PrefixCache};
use crate::error::{PolarError, Result};
use crate::images::{ImageLabel, ImageStore};
use crate::linalg::l2_normalize;
use crate::lora::WeightUpdate;

const KIND: &str = "retrieval_index";

/// Image database: ids in ascending order with unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<ImageLabel>,
    data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Top-k images for one query, best first; equal scores are ordered by
/// ascending id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query: String,
    pub concepts: Vec<String>,
    pub hits: Vec<Hit>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<ImageLabel>,
}

impl RetrievalIndex {
    pub fn from_store(store: &ImageStore) -> Self {
        let mut index = Self {
            dim: store.dim(),
            ids: Vec::with_capacity(store.len()),
            labels: Vec::with_capacity(store.len()),
            data: Vec::with_capacity(store.len() * store.dim()),
        };
        for r in store.iter() {
            index.ids.push(r.id.clone());
            index.labels.push(r.label.clone());
            index.data.extend_from_slice(&r.embedding);
        }
        index
    }

    /// Builds an unlabeled index; embeddings are normalized and ids must be
    /// unique.
    pub fn from_embeddings(dim: usize, items: &[(String, Vec<f32>)]) -> Result<Self> {
        let mut store = ImageStore::new(dim);
        for (id, e) in items {
            store.insert(id.clone(), e, ImageLabel::default())?;
        }
        Ok(Self::from_store(&store))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn label(&self, i: usize) -> &ImageLabel {
        &self.labels[i]
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).is_ok()
    }

    /// Images whose label satisfies `keep`, in the same order.
    pub fn subset(&self, keep: impl Fn(&str, &ImageLabel) -> bool) -> Self {
        let mut out = Self {
            dim: self.dim,
            ids: Vec::new(),
            labels: Vec::new(),
            data: Vec::new(),
        };
        for i in 0..self.len() {
            if keep(&self.ids[i], &self.labels[i]) {
                out.ids.push(self.ids[i].clone());
                out.labels.push(self.labels[i].clone());
                out.data.extend_from_slice(self.embedding(i));
            }
        }
        out
    }

    /// Ranks every image against an (unnormalized) query vector and keeps
    /// the first `k`.
    pub fn rank(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(PolarError::Config("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(PolarError::Empty("retrieval index".into()));
        }
        if query.len() != self.dim {
            return Err(PolarError::shape(format!(
                "query has {} dims, index holds {}",
                query.len(),
                self.dim
            )));
        }
        let q = l2_normalize(query)?;
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let s = self
                    .embedding(i)
                    .iter()
                    .zip(&q)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum::<f64>();
                (i, s)
            })
            .collect();
        // Ids are sorted, so the index order breaks ties by ascending id.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, score)| Hit {
                id: self.ids[i].clone(),
                score,
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = IndexHeader {
            dim: self.dim,
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        };
        container::write(path.as_ref(), KIND, &header, &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (h, data): (IndexHeader, Vec<f32>) = container::read(path, KIND)?;
        let corrupt = |reason: &str| PolarError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if h.ids.len() != h.labels.len() || data.len() != h.ids.len() * h.dim {
            return Err(corrupt("index tables disagree in length"));
        }
        if h.ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(corrupt("index ids are not strictly ascending"));
        }
        Ok(Self {
            dim: h.dim,
            ids: h.ids,
            labels: h.labels,
            data,
        })
    }
}

fn concept_echo(deltas: &[&dyn WeightUpdate]) -> Vec<String> {
    deltas.iter().flat_map(|d| d.concept_ids()).collect()
}

/// Encodes `text` with `deltas` active and returns the top `k` images.
pub fn query(
    enc: &FrozenEncoder,
    index: &RetrievalIndex,
    text: &str,
    deltas: &[&dyn WeightUpdate],
    k: usize,
) -> Result<RankedResult> {
    query_cached(enc, &mut PrefixCache::new(), index, text, deltas, k)
}

/// [`query`] reusing base activations from `cache`.
pub fn query_cached(
    enc: &FrozenEncoder,
    cache: &mut PrefixCache,
    index: &RetrievalIndex,
    text: &str,
    deltas: &[&dyn WeightUpdate],
    k: usize,
) -> Result<RankedResult> {
    if index.is_empty() {
        return Err(PolarError::Empty("retrieval index".into()));
    }
    let tokens = enc.tokenize(text)?;
    let emb = enc.encode_cached(cache, &tokens, deltas)?;
    Ok(RankedResult {
        query: text.to_string(),
        concepts: concept_echo(deltas),
        hits: index.rank(&emb, k)?,
    })
}

/// One query of a batch with the updates active for it.
pub struct BatchItem<'a> {
    pub text: String,
    pub deltas: Vec<&'a dyn WeightUpdate>,
}

/// Runs every item independently; a failing item does not stop the batch.
pub fn batch_query(
    enc: &FrozenEncoder,
    index: &RetrievalIndex,
    items: &[BatchItem<'_>],
    k: usize,
) -> Vec<Result<RankedResult>> {
    let mut cache = PrefixCache::new();
    items
        .iter()
        .map(|item| query_cached(enc, &mut cache, index, &item.text, &item.deltas, k))
        .collect()
}
