//! Numeric substrate: tensors, counter-based RNG, probability helpers.

pub mod prob;
pub mod rng;
pub mod tensor;

pub use prob::{entropy, softmax};
pub use rng::{sample_beta, sample_gaussian, RngState};
pub use tensor::Tensor;
