use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::EncoderConfig;
use super::site::{Site, SiteAddress};
use crate::error::{PolarError, Result};
use crate::linalg::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerParam {
    Ln1Gain,
    Ln1Bias,
    Query,
    QueryBias,
    Key,
    KeyBias,
    Value,
    ValueBias,
    Out,
    OutBias,
    Ln2Gain,
    Ln2Bias,
    Mlp1,
    Mlp1Bias,
    Mlp2,
    Mlp2Bias,
}

impl LayerParam {
    pub const ALL: [LayerParam; 16] = [
        LayerParam::Ln1Gain,
        LayerParam::Ln1Bias,
        LayerParam::Query,
        LayerParam::QueryBias,
        LayerParam::Key,
        LayerParam::KeyBias,
        LayerParam::Value,
        LayerParam::ValueBias,
        LayerParam::Out,
        LayerParam::OutBias,
        LayerParam::Ln2Gain,
        LayerParam::Ln2Bias,
        LayerParam::Mlp1,
        LayerParam::Mlp1Bias,
        LayerParam::Mlp2,
        LayerParam::Mlp2Bias,
    ];
}

/// Names every tensor of the text encoder. Layers are zero-based here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKey {
    TokenEmbedding,
    PositionEmbedding,
    Layer(usize, LayerParam),
    FinalLnGain,
    FinalLnBias,
    FinalProj,
}

impl ParamKey {
    /// The weight matrix addressed by a LoRA site.
    pub fn for_site(addr: SiteAddress) -> ParamKey {
        let l = addr.layer.saturating_sub(1);
        match addr.site {
            Site::Q => ParamKey::Layer(l, LayerParam::Query),
            Site::K => ParamKey::Layer(l, LayerParam::Key),
            Site::V => ParamKey::Layer(l, LayerParam::Value),
            Site::O => ParamKey::Layer(l, LayerParam::Out),
            Site::Mlp1 => ParamKey::Layer(l, LayerParam::Mlp1),
            Site::Mlp2 => ParamKey::Layer(l, LayerParam::Mlp2),
            Site::FinalProj => ParamKey::FinalProj,
        }
    }
}

/// All encoder tensors, keyed and iterated in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<ParamKey, Arc<Matrix>>,
}

impl Weights {
    pub fn shape_of(cfg: &EncoderConfig, key: ParamKey) -> (usize, usize) {
        let d = cfg.d_model;
        match key {
            ParamKey::TokenEmbedding => (cfg.vocab.len(), d),
            ParamKey::PositionEmbedding => (cfg.max_seq, d),
            ParamKey::FinalLnGain | ParamKey::FinalLnBias => (1, d),
            ParamKey::FinalProj => (cfg.d_out, d),
            ParamKey::Layer(_, p) => match p {
                LayerParam::Query | LayerParam::Key | LayerParam::Value | LayerParam::Out => (d, d),
                LayerParam::Mlp1 => (4 * d, d),
                LayerParam::Mlp1Bias => (1, 4 * d),
                LayerParam::Mlp2 => (d, 4 * d),
                _ => (1, d),
            },
        }
    }

    pub fn keys(cfg: &EncoderConfig) -> Vec<ParamKey> {
        let mut keys = vec![ParamKey::TokenEmbedding, ParamKey::PositionEmbedding];
        for l in 0..cfg.n_layers {
            keys.extend(LayerParam::ALL.iter().map(|&p| ParamKey::Layer(l, p)));
        }
        keys.extend([ParamKey::FinalLnGain, ParamKey::FinalLnBias, ParamKey::FinalProj]);
        keys.sort();
        keys
    }

    /// CLIP-style initialization: small embeddings, `1/sqrt(fan_in)` linear
    /// maps with residual outputs shrunk by `1/sqrt(2·layers)`, unit LN gains.
    pub fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = Rng::derive(cfg.seed, "encoder-init");
        let d = cfg.d_model as f64;
        let resid = (2.0 * cfg.n_layers as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for key in Self::keys(cfg) {
            let (r, c) = Self::shape_of(cfg, key);
            let std = match key {
                ParamKey::TokenEmbedding => Some(0.02),
                ParamKey::PositionEmbedding => Some(0.01),
                ParamKey::FinalProj => Some(d.powf(-0.5)),
                ParamKey::Layer(_, p) => match p {
                    LayerParam::Query | LayerParam::Key | LayerParam::Value => Some(d.powf(-0.5)),
                    LayerParam::Out => Some(d.powf(-0.5) / resid),
                    LayerParam::Mlp1 => Some((2.0 * d).powf(-0.5)),
                    LayerParam::Mlp2 => Some((4.0 * d).powf(-0.5) / resid),
                    _ => None,
                },
                _ => None,
            };
            let m = match (key, std) {
                (_, Some(s)) => Matrix::from_raw(r, c, rng.gaussian_vec(r * c, s)),
                (ParamKey::FinalLnGain, _)
                | (ParamKey::Layer(_, LayerParam::Ln1Gain | LayerParam::Ln2Gain), _) => {
                    Matrix::from_raw(r, c, vec![1.0; r * c])
                }
                _ => Matrix::zeros(r, c),
            };
            tensors.insert(key, Arc::new(m));
        }
        Self { tensors }
    }

    pub(crate) fn from_parts(cfg: &EncoderConfig, tensors: BTreeMap<ParamKey, Arc<Matrix>>) -> Result<Self> {
        let keys = Self::keys(cfg);
        if tensors.len() != keys.len() {
            return Err(PolarError::shape("weight set does not match config"));
        }
        for key in keys {
            let m = tensors
                .get(&key)
                .ok_or_else(|| PolarError::shape(format!("missing tensor {key:?}")))?;
            if m.shape() != Self::shape_of(cfg, key) {
                return Err(PolarError::shape(format!("tensor {key:?} has shape {:?}", m.shape())));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, key: ParamKey) -> &Arc<Matrix> {
        &self.tensors[&key]
    }

    pub(crate) fn get_mut(&mut self, key: ParamKey) -> &mut Matrix {
        Arc::make_mut(self.tensors.get_mut(&key).expect("known key"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Arc<Matrix>)> {
        self.tensors.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    /// SHA-256 over the architecture numbers and every tensor's
    /// little-endian bytes, in canonical key order.
    pub fn fingerprint(&self, cfg: &EncoderConfig) -> String {
        let mut h = Sha256::new();
        for n in [cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_out, cfg.max_seq, cfg.vocab.len()] {
            h.update((n as u64).to_le_bytes());
        }
        for w in &cfg.vocab {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        for m in self.tensors.values() {
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }
}
