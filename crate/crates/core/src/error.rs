use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error(
        "solver did not converge after {iterations} iterations (relative residual {residual:.3e})"
    )]
    Solver { iterations: usize, residual: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error(
        "quadratic form is negative ({value:.3e}); operator is not symmetric positive semidefinite"
    )]
    NumericalSymmetry { value: f64 },

    #[error("decomposition error: {0}")]
    Decomposition(String),

    #[error("spectral problem failed on coarse element {element}: {reason}")]
    Spectral { element: usize, reason: String },

    #[error("basis construction failed for element {element}, mode {mode}: {reason}")]
    Basis {
        element: usize,
        mode: usize,
        reason: String,
    },

    #[error("complement construction failed at coarse node {node}: {reason}")]
    Construction { node: usize, reason: String },

    #[error("ill-conditioned basis: {0}")]
    Conditioning(String),

    #[error("split is infeasible: gamma = {gamma} is not below 1")]
    InfeasibleSplit { gamma: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: String, reason: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by user input rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Load { .. } | Error::InvalidMesh(_) => true,
            Error::Decomposition(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
