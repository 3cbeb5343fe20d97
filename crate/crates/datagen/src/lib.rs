//! Dataset builders for the five QA subsets and the shared sample schema.

pub mod ecgqa;
pub mod fixtures;
pub mod localization;
pub mod multiecg;
pub mod reportgen;
pub mod sample;
pub mod split;
pub mod templates;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use ecgqa::{read_ecgqa, subset_ecgqa, EcgQaConfig, EcgQaOutput, EcgQaRow};
pub use localization::{
    build_localization, materialize, ClassTable, ClipMode, LocalizationConfig, LocalizationOutput,
};
pub use multiecg::{build_multiecg, MultiEcgConfig, MultiEcgOutput, PatientGroup, PatientRecord};
pub use reportgen::{build_reportgen, ReportGenConfig, ReportGenOutput};
pub use sample::{read_jsonl, write_jsonl, EcgRef, QaSample, Split, Subset, Times};
pub use split::{split_by_record, SplitSummary};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("annotation class `{0}` is not in the class table")]
    UnknownClass(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid sample {0}")]
    InvalidSample(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no QA pairs could be parsed from any reply")]
    NoPairs,
    #[error(transparent)]
    Client(#[from] anyecg_llm::LlmError),
    #[error(transparent)]
    Core(#[from] anyecg_core::Error),
}

impl DatagenError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = DatagenError> = std::result::Result<T, E>;

/// Generator for one record (or patient), independent of processing order.
pub fn record_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
