//! The frozen text tower: configuration, tokenizer, weights, forward pass,
//! checkpoints and pretraining.

mod checkpoint;
mod config;
mod model;
mod pretrain;
mod site;
mod weights;

pub use config::{EncoderConfig, Tokenizer, DEFAULT_EOS, DEFAULT_V_STAR};
pub use model::{AttentionMap, FrozenEncoder, PrefixCache};
pub(crate) use model::{Binding, BoundKind, BoundUpdate, Input};
pub use pretrain::{pretrain, CaptionPair, PretrainConfig, PretrainReport};
pub use site::{Site, SiteAddress};
pub use weights::{LayerParam, ParamKey, Weights};
