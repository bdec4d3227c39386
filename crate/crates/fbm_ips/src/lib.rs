//! Interacting particle systems driven by additive fractional Brownian
//! motion: exact-covariance noise generation, mean-field Euler simulation,
//! Malliavin-derivative machinery, and a family of drift estimators with a
//! Monte Carlo harness around them.
//!
//! The crate is organized bottom-up:
//!
//! - [`fbm`]: Hurst parameters, time grids, and circulant-embedding fBm
//!   sampling with exact joint law at the grid nodes.
//! - [`models`]: parametric mean-field drifts b(x, μ) = Σ_m θ_m b_m(x, μ)
//!   (linear, arctan, two-parameter, or custom closures).
//! - [`sim`]: Euler schemes for the N-particle system, ε-shifted coupled
//!   families, and a tracked-vs-reference proxy for the mean-field limit.
//! - [`kernels`]: discrete bilinear forms against the singular covariance
//!   density φ(t, s) = H(2H−1)|t−s|^{2H−2}.
//! - [`malliavin`]: Malliavin derivative panels for the interacting and
//!   independent systems, the exponential surrogate, and the
//!   propagation-of-chaos rate report.
//! - [`estimators`]: ratio, fixed-point, iterative, and grid-contrast drift
//!   estimators plus limiting-variance Monte Carlo.
//! - [`harness`] / [`config`] / [`cli`]: experiment sweeps, INI configs,
//!   and the `fbm-ips` binary.
//!
//! Everything downstream of a master seed is deterministic, including under
//! work-stealing parallelism: random streams are derived from index tags,
//! and all floating-point reductions are fixed-order.

pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod fbm;
pub mod harness;
pub mod kernels;
pub mod malliavin;
pub mod models;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use fbm::{fbm_covariance, sample_fbm, FbmEnsemble, HurstParameter, TimeGrid};
pub use models::DriftModel;
pub use sim::{euler_simulate, ParticleEnsemble};
