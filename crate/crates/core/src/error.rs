use thiserror::Error;

/// Crate-wide error type.
///
/// Solver *outcomes* (maximum iterations reached, detected intersection, an
/// infeasible filter QP) are reported through status enums on the result
/// structs, not through this type; `Error` is reserved for calls whose inputs
/// or environment make the requested computation meaningless.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument failed validation (wrong dimension, nonfinite entry,
    /// nonpositive parameter, ...).  The message names the offending field.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A constraint stack admits no strictly feasible point.
    #[error("constraint set has empty interior")]
    EmptyInterior,

    /// An iteration produced nonfinite values or stalled without meeting its
    /// tolerance.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The KKT Jacobian could not be factorized even approximately; the
    /// caller must treat the surrounding step as unsafe.
    #[error("singular KKT jacobian: {0}")]
    SingularJacobian(String),

    /// A simulation configuration failed validation.  The message includes
    /// the field path.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
