use std::path::PathBuf;

/// Failures of the command-line driver, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    /// Malformed or missing configuration and input artifacts.
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    NonConvergence(String),

    /// Training hit a non-finite value; the diagnostic payload was written to `payload`.
    #[error("{message} (diagnostics: {})", payload.display())]
    Numerical { message: String, payload: PathBuf },

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Input(_) | AppError::Io { .. } => 2,
            AppError::NonConvergence(_) => 3,
            AppError::Numerical { .. } => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }
}

impl From<qcbf_core::Error> for AppError {
    fn from(e: qcbf_core::Error) -> Self {
        match e {
            qcbf_core::Error::NonConvergence(_) => AppError::NonConvergence(e.to_string()),
            qcbf_core::Error::Numerical { .. } => AppError::Numerical { message: e.to_string(), payload: PathBuf::new() },
            other => AppError::Input(other.to_string()),
        }
    }
}

pub type AppResult<T> = std::result::Result<T, AppError>;
