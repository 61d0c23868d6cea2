//! Precomputed image embeddings with their labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PolarError, Result};
use crate::linalg::l2_normalize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Images a concept is personalized from.
    Train,
    /// Images in the retrieval database.
    Eval,
    /// Context-only images used to pretrain the text tower.
    Pretrain,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLabel {
    /// Personal concepts visible in the image (empty for context-only images).
    #[serde(default)]
    pub concepts: Vec<String>,
    #[serde(default)]
    pub context: Option<String>,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub embedding: Vec<f32>,
    pub label: ImageLabel,
}

/// Image id → unit-norm embedding, iterated in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStore {
    dim: usize,
    entries: BTreeMap<String, ImageRecord>,
}

impl ImageStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores the normalized embedding. Ids must be unique.
    pub fn insert(&mut self, id: impl Into<String>, embedding: &[f32], label: ImageLabel) -> Result<()> {
        let id = id.into();
        if embedding.len() != self.dim {
            return Err(PolarError::shape(format!(
                "image {id} has {} dims, store holds {}",
                embedding.len(),
                self.dim
            )));
        }
        if self.entries.contains_key(&id) {
            return Err(PolarError::Config(format!("duplicate image id '{id}'")));
        }
        let embedding = l2_normalize(embedding)?;
        self.entries.insert(id.clone(), ImageRecord { id, embedding, label });
        Ok(())
    }

    /// Stores an embedding that is already unit-norm without rescaling it,
    /// so persisted stores reload bit for bit.
    pub(crate) fn insert_unit(&mut self, id: String, embedding: Vec<f32>, label: ImageLabel) -> Result<()> {
        if embedding.len() != self.dim || (crate::linalg::norm(&embedding) - 1.0).abs() > 1e-5 {
            return Err(PolarError::shape(format!("image {id} is not a unit {}-vector", self.dim)));
        }
        if self.entries.contains_key(&id) {
            return Err(PolarError::Config(format!("duplicate image id '{id}'")));
        }
        self.entries.insert(id.clone(), ImageRecord { id, embedding, label });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&ImageRecord> {
        self.entries
            .get(id)
            .ok_or_else(|| PolarError::UnknownId(id.to_string()))
    }

    pub fn embedding(&self, id: &str) -> Result<&[f32]> {
        Ok(&self.get(id)?.embedding)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageRecord> {
        self.entries.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Copy holding only the records that satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&ImageRecord) -> bool) -> ImageStore {
        ImageStore {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .filter(|(_, r)| keep(r))
                .map(|(k, r)| (k.clone(), r.clone()))
                .collect(),
        }
    }

    pub fn with_split(&self, split: Split) -> ImageStore {
        self.filter(|r| r.label.split == Some(split))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    #[test]
    fn stores_unit_vectors_in_id_order() {
        let mut s = ImageStore::new(2);
        s.insert("b", &[3.0, 4.0], ImageLabel::default()).unwrap();
        s.insert("a", &[0.0, 2.0], ImageLabel::default()).unwrap();
        assert_eq!(s.ids().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(s.embedding("b").unwrap(), &[0.6, 0.8]);
        for r in s.iter() {
            assert!((norm(&r.embedding) - 1.0).abs() < 1e-6);
        }
        assert!(s.insert("a", &[1.0, 0.0], ImageLabel::default()).is_err());
        assert!(s.insert("c", &[1.0], ImageLabel::default()).is_err());
        assert!(s.insert("c", &[0.0, 0.0], ImageLabel::default()).is_err());
        assert!(matches!(s.get("zz"), Err(PolarError::UnknownId(_))));
    }
}
