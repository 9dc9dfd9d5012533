//! Error type shared by all learner-side modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("rank {achieved} below target {target} at tolerance {tol:.3e}")]
    RankDeficient {
        achieved: usize,
        target: usize,
        tol: f64,
    },

    #[error("matrix not symmetric (asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("iteration matrix has spectral radius {rho:.6} >= 1")]
    Unstable { rho: f64 },

    #[error("matrix singular at tolerance (smallest singular value {sigma_min:.3e})")]
    IllConditioned { sigma_min: f64 },

    #[error("solver stopped after {iters} iterations with residual {residual:.3e}")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("solution residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    ResidualTooLarge { residual: f64, tol: f64 },

    #[error("persistence of excitation failure: {0}")]
    Excitation(String),

    #[error("episode {episode} too short: {len} samples < lag+1 = {min}")]
    EpisodeTooShort {
        episode: usize,
        len: usize,
        min: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("policy initialization failed: {0}")]
    Initialization(String),

    #[error("degenerate quantity: {0}")]
    Degenerate(String),

    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach the Q-learning iteration index to a propagated error.
    pub fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
