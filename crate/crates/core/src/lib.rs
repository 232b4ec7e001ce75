//! Task-free online continual learning with doubly perturbed training.
//!
//! Input-side perturbation interpolates noisy hidden features between
//! samples; weight-side perturbation samples classifier weights from
//! streaming Gaussian statistics across several branched heads. Ensemble
//! disagreement then drives replay-memory eviction and the learning rate.

pub mod error;
pub mod math;
pub mod network;

pub use error::{Error, Result};
pub mod bsc;
pub mod pfi;
pub mod pima;
pub mod stream;
pub mod harness;
