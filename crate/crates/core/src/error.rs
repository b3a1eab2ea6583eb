use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Cholesky factorization failed for a {size}x{size} matrix (jitter up to {jitter:e})")]
    CholeskyFailure { size: usize, jitter: f64 },

    #[error("tree mismatch: {0}")]
    TreeMismatch(String),

    #[error("non-finite log density in {0}")]
    NonFiniteDensity(String),

    #[error("all importance weights underflowed; the variational distribution has collapsed")]
    DegenerateWeights,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error at row {row}, column `{column}`: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema mismatch, missing columns: {}", missing.join(", "))]
    SchemaMismatch { missing: Vec<String> },

    #[error("unsupported model file: {0}")]
    UnsupportedModel(String),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            Error::Data { .. }
            | Error::SchemaMismatch { .. }
            | Error::UnsupportedModel(_)
            | Error::Serialization(_)
            | Error::Io(_) => 3,
            Error::CholeskyFailure { .. }
            | Error::TreeMismatch(_)
            | Error::NonFiniteDensity(_)
            | Error::DegenerateWeights => 4,
        }
    }
}
