//! Dense linear algebra, the seeded generator, and the differentiation tape.

mod matrix;
mod rng;
mod tape;

pub use matrix::{cosine_sim, dot, l2_normalize, norm, softmax_row, Matrix};
pub use rng::Rng;
pub use tape::{Gradients, NodeId, Tape};
