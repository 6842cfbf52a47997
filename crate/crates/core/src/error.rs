use std::path::PathBuf;

/// Errors raised across the pipeline.
///
/// Variants are grouped by how a caller should react; [`Error::exit_code`]
/// maps them onto the command-line exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration key holds an invalid value.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// The request exceeds a hard capability limit (enumeration size, lattice length).
    #[error("capability limit: {0}")]
    Capability(String),

    /// A non-finite value appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    /// A persisted file could not be parsed.
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Data was readable but inconsistent with its invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// No preference pair could be formed from the pool.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Identity clustering produced a single cluster, so no split is possible.
    #[error("degenerate split: largest identity cluster holds {largest} of {total} items")]
    DegenerateSplit { largest: usize, total: usize },

    /// Refusing to overwrite an existing artifact.
    #[error("output {0} already exists (pass --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 usage/config, 3 data/format, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config { .. } | Error::Capability(_) | Error::OutputExists(_) => 2,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::EmptyDataset(_)
            | Error::DegenerateSplit { .. }
            | Error::Io { .. } => 3,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
