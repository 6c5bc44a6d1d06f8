use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{context}: matrix is numerically singular (condition number {condition_number:.3e})")]
    Singular {
        context: String,
        condition_number: f64,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("improper posterior under prior `{prior}`: {detail}")]
    ImproperPosterior { prior: String, detail: String },

    #[error("quadrature did not converge: achieved relative error {achieved:.3e}, requested {requested:.3e}")]
    QuadratureNoConvergence { achieved: f64, requested: f64 },

    #[error("REML estimate is at the boundary A = 0; {0}")]
    BoundaryReml(String),

    #[error("bootstrap failed: {excluded} of {total} replicates had refit failures (>1%)")]
    BootstrapFailure { excluded: usize, total: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    CsvFormat {
        path: String,
        line: u64,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
