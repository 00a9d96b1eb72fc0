use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("observation index {index} out of range for {len} grid values")]
    ObservationOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("initial ensemble is linearly dependent (smallest singular value ratio {ratio:e}); reseed")]
    LinearlyDependent { ratio: f64 },

    #[error("degenerate initial ensemble: spread rank {rank} < {expected}")]
    DegenerateEnsemble { rank: usize, expected: usize },

    #[error("point is off the affine subspace by {distance:e}")]
    OffSubspace { distance: f64 },

    #[error("step size underflow at t = {t:e} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("maximum number of steps ({0}) exceeded")]
    MaxStepsExceeded(usize),

    #[error("optimizer did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: nalgebra::DVector<f64>,
    },

    #[error("cannot fit rate: {0}")]
    RateFit(String),
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
