use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] qreg_core::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("pair (A, B) not controllable at numeric tolerance")]
    NotControllable,

    #[error("pair (A, C) not observable at numeric tolerance")]
    NotObservable,

    #[error("no minimal system found after {attempts} resampling attempts")]
    Generation { attempts: usize },

    #[error("data collection failed: {0}")]
    Collection(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
