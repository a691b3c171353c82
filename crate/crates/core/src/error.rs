use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error in {path}, data row {row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },

    #[error("numerical instability in household {household}: {detail} (theta = {theta:?})")]
    NumericalInstability {
        household: String,
        detail: String,
        theta: Vec<f64>,
    },

    #[error(
        "non-finite objective while differentiating along coordinate {coordinate} (value {value})"
    )]
    NonFiniteGradient { coordinate: usize, value: f64 },

    #[error(
        "negative log-posterior Hessian is not positive definite (smallest eigenvalue {min_eigenvalue:.3e}); \
         consider a smaller prior standard deviation"
    )]
    IndefiniteHessian { min_eigenvalue: f64 },

    #[error("all {restarts} optimiser restarts failed to converge:\n{trace}")]
    FitFailed { restarts: usize, trace: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than by
    /// the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Domain(_)
                | Error::Parse { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
