//! Simulation of a photonic Bayesian machine: a stochastic-weight convolution
//! accelerator whose per-channel weight distributions are set by optical power
//! and bandwidth, together with the hybrid Bayesian network that runs its
//! probabilistic layer on it and the uncertainty measures used to tell
//! aleatoric from epistemic uncertainty.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bnn;
pub mod calibration;
pub mod data;
pub mod error;
pub mod par;
pub mod photonic;
pub mod rng;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::RandomStream;
pub use tensor::Tensor;
