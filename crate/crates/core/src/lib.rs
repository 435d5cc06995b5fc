//! Bayesian temporal Gaussian-process regression over individual trajectories.
//!
//! Each individual contributes a time-ordered series of outcomes whose residual
//! dependence is a latent exponential-kernel process. The process is replaced by
//! its nearest-neighbour (Vecchia) approximation, which gives a banded precision
//! matrix per individual, and then integrated out so that the sampler works on
//! the collapsed posterior of the fixed effects and covariance parameters.
//!
//! Module map:
//!
//! * [`kernel`]: covariance functions and parameter containers.
//! * [`banded`]: banded symmetric positive-definite storage and Cholesky.
//! * [`vecchia`]: neighbour sets, sparse factors, `Ω` and the collapsed likelihood.
//! * [`splines`]: clamped B-spline bases and shrinkage penalties.
//! * [`design`]: dataset model, outcome transforms and design assembly.
//! * [`sampler`]: the collapsed Metropolis-within-Gibbs sampler.
//! * [`predict`]: latent recovery, interpolation, prediction and fit metrics.
//! * [`simulate`]: synthetic trajectories and outcomes with known truth.

pub mod banded;
pub mod design;
mod error;
pub mod kernel;
pub mod predict;
pub mod sampler;
pub mod simulate;
pub mod splines;
pub mod vecchia;

pub use error::{Error, Result};
