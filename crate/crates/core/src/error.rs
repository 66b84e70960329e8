use thiserror::Error;

use crate::model::BeamformerSet;

pub type Result<T> = std::result::Result<T, CobfError>;

#[derive(Debug, Error)]
pub enum CobfError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance Q[{k}][{i}] is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { k: usize, i: usize, min_eig: f64 },

    #[error("quadratic form is negative beyond rounding ({value:e})")]
    NegativeQuadraticForm { value: f64 },

    /// User `user` receives no signal power, so its outage probability is 1
    /// for any positive rate and the certified rate is identically zero.
    #[error("user {user} has zero received signal power")]
    ZeroSignal { user: usize },

    #[error("zero received signal power with a positive rate (outage probability 1)")]
    ZeroSignalPower,

    #[error("iterate is degenerate: user {user} has zero signal power")]
    DegenerateIterate { user: usize, beams: Box<BeamformerSet> },

    #[error("non-finite gradient in block subproblem of user {user}")]
    NonFiniteGradient { user: usize },

    #[error("vertex set is empty")]
    EmptyVertexSet,

    #[error("boundary point does not lie below the selected vertex")]
    DominanceViolated,

    #[error("SDP solver failed to converge at beta = {beta}")]
    SdpNonConvergence { beta: f64 },

    #[error("dual bisection bracket failure: {0}")]
    BracketFailure(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
