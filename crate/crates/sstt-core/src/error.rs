use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    /// Config-class failures map to CLI exit code 2; everything else is 1.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Manifest(_) | Error::Split(_) | Error::Checkpoint(_))
    }
}
