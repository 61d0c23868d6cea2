use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::model::FrozenEncoder;
use super::weights::{ParamKey, Weights};
use crate::container;
use crate::error::{PolarError, Result};
use crate::linalg::Matrix;

const KIND: &str = "encoder_checkpoint";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    key: ParamKey,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
}

impl FrozenEncoder {
    /// Writes config, fingerprint and every tensor in canonical order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut blob = Vec::with_capacity(self.weights().total_params());
        let mut tensors = Vec::new();
        for (key, m) in self.weights().iter() {
            tensors.push(TensorEntry {
                key,
                rows: m.rows(),
                cols: m.cols(),
            });
            blob.extend_from_slice(m.data());
        }
        let header = CheckpointHeader {
            config: self.config().clone(),
            fingerprint: self.fingerprint().to_string(),
            tensors,
        };
        container::write(path.as_ref(), KIND, &header, &blob)
    }

    /// Loads a checkpoint and verifies the stored fingerprint against the
    /// weights actually read.
    pub fn load(path: impl AsRef<Path>) -> Result<FrozenEncoder> {
        let path = path.as_ref();
        let (header, blob): (CheckpointHeader, Vec<f32>) = container::read(path, KIND)?;
        let corrupt = |reason: String| PolarError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut tensors = BTreeMap::new();
        let mut offset = 0;
        for t in &header.tensors {
            let len = t.rows * t.cols;
            let data = blob
                .get(offset..offset + len)
                .ok_or_else(|| corrupt(format!("tensor {:?} runs past payload", t.key)))?;
            let m = Matrix::new(t.rows, t.cols, data.to_vec()).map_err(|e| corrupt(e.to_string()))?;
            tensors.insert(t.key, Arc::new(m));
            offset += len;
        }
        if offset != blob.len() {
            return Err(corrupt("payload longer than tensor table".into()));
        }
        header.config.validate()?;
        let weights = Weights::from_parts(&header.config, tensors).map_err(|e| corrupt(e.to_string()))?;
        let enc = FrozenEncoder::from_weights(header.config, weights)?;
        if enc.fingerprint() != header.fingerprint {
            return Err(PolarError::Fingerprint {
                expected: header.fingerprint,
                found: enc.fingerprint().to_string(),
            });
        }
        Ok(enc)
    }
}
