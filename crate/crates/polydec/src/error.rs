//! Error type shared by all modules.

use thiserror::Error;

/// Errors produced by construction, tensorization and decomposition routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("constant term (|alpha| = 0) is not representable; the model has no constant terms")]
    ConstantTerm,

    #[error("non-finite coefficient for output {output}")]
    NonFiniteCoefficient { output: usize },

    #[error("degree {found} exceeds declared bound {bound}")]
    DegreeOverflow { found: usize, bound: usize },

    #[error("asymmetric block: output {output}, degree {degree}, max deviation {deviation}")]
    AsymmetricBlock {
        output: usize,
        degree: usize,
        deviation: f64,
    },

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("order-2 tensor: use a matrix factorization instead of a CP decomposition")]
    MatrixInput,

    #[error("rank must be at least 1")]
    ZeroRank,

    #[error("under-sampled: numerical rank of A is {rank} but the structure subspace has dimension {bound}; add sampling points")]
    UnderSampled { rank: usize, bound: usize },

    #[error("degenerate sampling for branch {branch}: the projected points t_j do not determine a degree-{degree} derivative")]
    DegenerateBranch { branch: usize, degree: usize },

    #[error("missing degree {degree} block")]
    MissingDegree { degree: usize },

    #[error("decomposition did not converge: {0}")]
    NoConvergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;
