//! Particle filters for state-space models with linear observations under
//! low and exactly degenerate observation noise.
//!
//! The crate is organized around the pieces such a filter needs:
//!
//! - [`geometry`]: affine reparameterizations of the observation-constraint
//!   manifolds (kernel bases, charts) for both the extended low-noise and
//!   reduced degenerate cases.
//! - [`ssm`]: state-space model abstractions and the concrete discrete-time
//!   models (linear Gaussian, Lorenz-96), plus synthetic data generation.
//! - [`engine`]: generic particle-filter machinery (weights, ESS,
//!   resampling, ancestor bookkeeping, estimators).
//! - [`proposals`]: closed-form Gaussian proposals and weights for the four
//!   discrete-time filter variants.
//! - [`bridge`]: guided diffusion-bridge machinery (auxiliary OU process,
//!   guided drift, discretized paths and Radon-Nikodym weights) and the
//!   FitzHugh-Nagumo models.
//! - [`kalman`]: exact Gaussian filters used as oracles.
//! - [`experiments`]: experiment drivers, delta sweeps, the empirical
//!   convergence harness, and CSV/SVG emission behind the `mpf` CLI.

pub mod bridge;
pub mod engine;
pub mod error;
#[path = "experiments/mod.rs"]
pub mod experiments;
pub mod geometry;
pub mod kalman;
pub mod linalg;
pub mod proposals;
pub mod ssm;
pub mod streams;

pub use error::{Error, Result};
