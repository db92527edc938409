use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tail2learn::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("run directory {0} exists; pass --force to overwrite")]
    Exists(PathBuf),
}

pub type Result<T> = std::result::Result<T, CliError>;
