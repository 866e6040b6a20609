//! Polarization fluctuations of quantum-well vertical cavity surface emitting
//! lasers under the split-density (two carrier reservoir) rate equation model.
//!
//! The crate is organized around the measurement chain:
//!
//! * [`params`] — physical rates, anisotropy vectors, dimensionless groups.
//! * [`dynamics`] — deterministic nonlinear evolution of `(D, n, d, P)` and
//!   the stationary lasing point.
//! * [`linear`] — the linearized 5x5 Langevin system at the stationary point:
//!   eigensystem, fluctuation matrix, closed-form correlators and the
//!   perturbative frequency splitting.
//! * [`stochastic`] — quantum-noise driven Langevin simulation, linearized and
//!   fully nonlinear.
//! * [`analysis`] — correlator estimation, damped-cosine fitting and inversion
//!   of the fitted timescales back to the model parameters.
//!
//! All internal computation uses time in units of the inverse carrier decay
//! rate `1/gamma`; SI conversions happen at I/O boundaries only.

// Validation guards are written as `!(x > 0.0)` so NaN fails them, and the
// small fixed-size matrix kernels index explicitly.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod linear;
pub mod math;
pub mod params;
pub mod stochastic;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
