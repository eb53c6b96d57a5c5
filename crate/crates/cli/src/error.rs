use std::path::PathBuf;

use thiserror::Error;

use crate::ingest::IngestError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Ingest(#[from] IngestError),
    #[error("{module}: {0}", module = .0.module())]
    Engine(#[from] drlpdid::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for bad data, 4 for numerical
    /// failures, 1 for I/O.
    pub fn exit_code(&self) -> u8 {
        use drlpdid::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Ingest(e) if e.is_config() => 2,
            CliError::Ingest(_) => 3,
            CliError::Engine(e) if e.is_numerical() => 4,
            CliError::Engine(
                E::InvalidBaseRule(_) | E::InvalidBootstrap(_) | E::InvalidDesign(_),
            ) => 2,
            CliError::Engine(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}
