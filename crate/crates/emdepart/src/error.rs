use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data directory {0} does not exist")]
    MissingDir(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("configuration {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: non-finite feature in image {image}")]
    NonFinite { path: PathBuf, image: usize },
    #[error("{path}: image {image} has class {class}, which is not in the manifest")]
    UnknownClass { path: PathBuf, image: usize, class: u32 },
    #[error("{0}")]
    Core(#[from] emdepart_core::Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }

    /// 1 usage or configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use emdepart_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::NonFinite(_) | E::ZeroNorm { .. }) | CliError::GradCheck(_) => 3,
            _ => 2,
        }
    }
}
