//! Gradient-gated multi-rate message passing on graphs.
//!
//! The crate bundles a CSR graph type with generators and diagnostics, a
//! small reverse-mode autodiff tape, GCN/GAT/SAGE couplings, the gated layer
//! family, an ODE laboratory for perturbation decay, and a full-batch
//! training loop.

pub mod autodiff;
pub mod coupling;
pub mod dynamics;
pub mod error;
pub mod gating;
pub mod graph;
pub mod matrix;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use graph::Graph;
pub use matrix::{FeatureMatrix, Matrix};
