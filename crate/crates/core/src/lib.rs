//! Stochastic-boundary causal inference on spatial panels.
//!
//! The crate is organised bottom-up:
//!
//! * [`stochastic_process`] simulates the jump-diffusion spillover state and
//!   its first-passage behaviour.
//! * [`spatial_dgp`] builds spatial weights and regime-switching panels.
//! * [`cusum`] holds the sequential change detector used for both temporal
//!   and spatial boundaries.
//! * [`ddpm`] is the boundary-aware denoising diffusion model.
//! * [`pipeline`] wires detection, training and counterfactual estimation
//!   into one end-to-end estimator.
//! * [`baselines`], [`inference`], [`montecarlo`] and [`policy`] provide the
//!   comparison estimators, bootstrap intervals, simulation harness and
//!   targeting rule.

pub mod baselines;
pub mod cusum;
pub mod ddpm;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod montecarlo;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod spatial_dgp;
pub mod stats;
pub mod stochastic_process;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
