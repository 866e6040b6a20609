//! Error type shared by all modules.

use crate::analysis::FitResult;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation restricted to the aligned-anisotropy model was called
    /// with gain/loss/frequency anisotropy components off the first Stokes
    /// axis.
    #[error("anisotropy not aligned with the first Stokes axis: {0}")]
    AnisotropyNotAligned(String),

    /// The injection does not sustain lasing (`x <= 1`); the fluctuation
    /// formulas all assume operation above threshold.
    #[error("laser at or below threshold (x = {x:.6}) in {context}")]
    BelowThreshold { x: f64, context: &'static str },

    /// Parameter validation failure (non-positive rates, anisotropy norm
    /// >= 1, non-finite values, ...).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// Integration step exceeds the stability bound for the fastest rate.
    #[error("integration step too large: dt = {dt:.3e}, limit {limit:.3e} (scaled units)")]
    StepTooLarge { dt: f64, limit: f64 },

    /// A trajectory left the physically meaningful region.
    #[error("state diverged at t = {t:.3} (scaled): {what}")]
    StateDiverged { t: f64, what: String },

    /// The linearized drift has an eigenvalue with non-negative real part.
    #[error("unstable linear system: eigenvalue {re:.3e}{im:+.3e}i has non-negative real part")]
    UnstableSystem { re: f64, im: f64 },

    /// Polarization damping coefficients violate the stability conditions
    /// `rho + theta > 0` and `x + r + rho - theta > 0`.
    #[error(
        "unstable polarization: rho+theta = {slow:.6}, x+r+rho-theta = {fast:.6} (both must be > 0)"
    )]
    UnstablePolarization { slow: f64, fast: f64 },

    /// Eigenvector extraction failed a rank check (defective or nearly
    /// defective drift matrix).
    #[error("defective drift matrix: {0}")]
    DefectiveMatrix(String),

    /// Time series too short for the requested lag grid.
    #[error("series too short: {0}")]
    SeriesTooShort(String),

    /// Nonlinear least squares failed to improve on the grid-search seed.
    /// Carries the best grid point so callers can still report something.
    #[error("fit did not converge; best grid point: {best:?}")]
    FitDiverged { best: Box<FitResult> },

    /// Fit residuals are far larger than the stated error bars.
    #[error("model mismatch: residual rms {rms:.3e} exceeds 5x mean error bar {mean_err:.3e}")]
    ModelMismatch { rms: f64, mean_err: f64 },

    /// Malformed operation input (lag grid, channel lengths, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A data file failed format validation.
    #[error("malformed file: {0}")]
    MalformedFile(String),
}
