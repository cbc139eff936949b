//! Progressive distributed compression for linear source estimation.
//!
//! Agents observe a Gaussian source through their own channel matrix,
//! project the observation onto a few learned (or classical) directions,
//! quantize each projection with a uniform quantizer, and a fusion center
//! reconstructs the source with a bank of progressive LMMSE estimators.
//!
//! Module map:
//!
//! * [`numerics`]: seeded random streams and dense linear algebra kernels.
//! * [`signal`]: source covariance, channels, noisy observations.
//! * [`quantization`]: clipping, uniform quantizer, noise surrogate, batch ranges.
//! * [`fusion`]: effective models, LMMSE estimator bank, MSE evaluation.
//! * [`baselines`]: EVD and BCD compression designs, range calibration.
//! * [`network`]: the policy network, its training pipeline and checkpoints.
//! * [`cost`]: signaling-cost accounting for local and global CSI.
//! * [`harness`]: experiment configuration, sweeps, CSV records and plots.

pub mod baselines;
pub mod cost;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod network;
pub mod numerics;
pub mod quantization;
pub mod signal;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream, Vector};
