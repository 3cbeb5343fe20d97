//! Operator surface for the anyecg chat model: dataset building, training,
//! evaluation, and a chat service shared by the HTTP API and the terminal.

pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod http;
pub mod repl;
pub mod service;

use std::path::{Path, PathBuf};

pub use config::AppConfig;
pub use service::{ChatService, ServiceError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] anyecg_core::Error),
    #[error(transparent)]
    Data(#[from] anyecg_datagen::DatagenError),
    #[error(transparent)]
    Train(#[from] anyecg_curriculum::TrainError),
    #[error(transparent)]
    Eval(#[from] anyecg_evalkit::EvalError),
    #[error(transparent)]
    Llm(#[from] anyecg_llm::LlmError),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Where a run keeps its artifacts, all below one output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn raw(&self) -> PathBuf {
        self.root.join("raw")
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.datasets().join(format!("{name}.jsonl"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.safetensors"))
    }

    pub fn metrics(&self, stage: u8) -> PathBuf {
        self.root.join("metrics").join(format!("stage{stage}.jsonl"))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}
