use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside its mathematical domain (e.g. rho >= 1).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("constraint set is infeasible (max violation {max_violation:.3e} beyond tolerance)")]
    Infeasible { max_violation: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("rank-deficient design: column {column} is collinear with earlier columns")]
    RankDeficient { column: String },

    #[error("jackknife fold without state {state} stayed infeasible after {rounds} relaxation rounds")]
    FoldFailure { state: String, rounds: usize },

    #[error("no ridge penalty in [1e-8, 1e8] reaches the imbalance cap {cap}; best achieved {best:.6}")]
    AugmentationInfeasible { cap: f64, best: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_)
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::Integrity(_) => 2,
            Error::Infeasible { .. }
            | Error::FoldFailure { .. }
            | Error::AugmentationInfeasible { .. } => 3,
            Error::Numerical(_) | Error::RankDeficient { .. } => 4,
            Error::Io { .. } => 5,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
