//! Command-line orchestration: configuration, run manifests, pipeline stages
//! and the reader-study HTTP service.

pub mod app;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod server;

use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use manifest::{Manifest, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] tumorsynth::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_owned(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}
