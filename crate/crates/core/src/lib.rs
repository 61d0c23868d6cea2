pub mod cli;
pub mod container;
pub mod encoder;
pub mod error;
pub mod images;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod personalize;
pub mod pipeline;
pub mod retrieval;
pub mod sweep;
pub mod synth;

pub use error::{PolarError, Result};
