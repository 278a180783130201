use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoxError {
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("audio error: {0}")]
    Audio(String),
    #[error("text error: {0}")]
    Text(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for VoxError {
    fn from(e: std::io::Error) -> Self {
        VoxError::Io(e.to_string())
    }
}
