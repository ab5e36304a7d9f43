use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },

    #[error(transparent)]
    Core(#[from] setgan::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        LabError::File {
            path: path.display().to_string(),
            source,
        }
    }

    /// 3 for numerical aborts during training, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Core(setgan::Error::NumericalAbort { .. }) => 3,
            _ => 2,
        }
    }

    pub fn is_numerical(&self) -> bool {
        self.exit_code() == 3
    }
}
