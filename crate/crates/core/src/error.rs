//! Error type shared by every module in the crate.

use std::path::Path;

/// Crate-wide result alias.
pub type CoreResult<T> = Result<T, CoreError>;

/// All failure modes surfaced by the library.
///
/// Every error carries enough context to name the offending value; callers
/// (CLI included) print these verbatim.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Two tensors (or a tensor and an operator) disagree on shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A scalar or structural argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Grid dimensions are not divisible by the downsampling stride.
    #[error("grid {height}x{width} is not divisible by stride {stride}")]
    NotDivisible {
        height: usize,
        width: usize,
        stride: usize,
    },

    /// The kernel does not keep white noise white under downsampling, so the
    /// closed-form marginal and posterior formulas do not apply to it.
    #[error(
        "kernel with {tap_rows}x{tap_cols} taps and stride {stride} ({detail}) is rejected: \
         the whitening-dependent formulas require non-overlapping unit-norm windows"
    )]
    KernelNotWhitening {
        tap_rows: usize,
        tap_cols: usize,
        stride: usize,
        detail: String,
    },

    /// A class id outside the embedding table was requested.
    #[error("class id {class} out of range: checkpoint was built with {count} classes")]
    UnknownClass { class: usize, count: usize },

    /// Training hit a non-finite loss and stopped.
    #[error("training diverged at step {step} (level {level:.6}): loss = {loss}")]
    TrainingDiverged { step: usize, level: f64, loss: f64 },

    /// A latent record cannot drive the requested sampler configuration.
    #[error("latent record incompatible with sampler: {0}")]
    ReplayMismatch(String),

    /// A serialized file (tensor, checkpoint, latent record) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Filesystem failure, annotated with the path that failed.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Dense linear algebra could not complete (singular system, failed
    /// factorization). Never silently regularized.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CoreError {
    /// Wrap an `std::io::Error` together with the path it occurred at.
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
