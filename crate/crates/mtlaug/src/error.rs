use std::path::PathBuf;

/// Errors raised by IO, configuration and the command driver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mtlaug_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A config value failed schema validation; `field` is a dotted path.
    #[error("schema error at `{field}`: {msg}")]
    Schema { field: String, msg: String },

    #[error("corpus not found: {0}")]
    MissingCorpus(String),

    /// Stored data does not match its checksum or layout.
    #[error("integrity error in {path}: {msg}")]
    Integrity { path: PathBuf, msg: String },

    #[error("config mismatch: checkpoint was written for {stored}, current config is {current}")]
    ConfigMismatch { stored: String, current: String },

    #[error("wav error on {path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("manifest {path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. } => 2,
            Error::MissingCorpus(_) => 3,
            Error::Core(mtlaug_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }

    /// Short machine-readable kind for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(_) => "core",
            Error::Io { .. } => "io",
            Error::Schema { .. } => "schema",
            Error::MissingCorpus(_) => "missing_corpus",
            Error::Integrity { .. } => "integrity",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::Wav { .. } => "wav",
            Error::Manifest { .. } => "manifest",
            Error::Json(_) => "json",
        }
    }
}
