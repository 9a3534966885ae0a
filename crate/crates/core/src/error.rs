use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hermitian (residual {residual:.3e} > tolerance {tol:.3e})")]
    NotHermitian { residual: f64, tol: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index order violation: expected {from} < {to}")]
    IndexOrder { from: usize, to: usize },

    #[error("missing table entry ({0}, {1})")]
    MissingEntry(usize, usize),

    #[error("unknown measurement outcome `{0}`")]
    UnknownOutcome(String),

    #[error("branch enumeration of 2^{0} sequences exceeds the cap of 2^{1}")]
    BranchCap(usize, usize),

    #[error("outcome sequence `{0}` has zero probability")]
    ZeroProbability(String),

    #[error("empty branch set")]
    EmptyBranchSet,

    #[error("config error: {0}")]
    Config(String),

    #[error("tolerance check `{what}` failed: {value:.3e} exceeds {tol:.3e}")]
    Tolerance { what: String, value: f64, tol: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Errors a caller can fix by changing its inputs, as opposed to numerical failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Io { .. } | Error::InvalidParameter(_) | Error::BranchCap(..)
        )
    }
}
