//! Memory-efficient, spectrum-preserving training of linear layers.
//!
//! Each trainable weight is reparameterized as `R W P`, where `W` is frozen
//! between merges and `R`, `P` are permutation-conjugated block-diagonal
//! orthogonal factors produced by a Cayley–Neumann map from packed
//! skew-symmetric parameters. The forward pass runs input-centric (three
//! chained products, two live permutations), and the backward pass is written
//! by hand with an optional recompute variant that saves no extra activation.

pub mod block;
pub mod cnp;
pub mod dense;
pub mod error;
pub mod layer;
pub mod optim;
pub mod par;
pub mod permute;
pub mod scalar;
pub mod tape;
pub mod trainer;

pub use error::{PoetError, Result};
pub use scalar::Scalar;
