//! Contrastive encoder pretraining, language-model warm-up and the
//! three-stage curriculum trainer with stage-wise freezing and task mixing.

pub mod contrastive;
pub mod corpus;
pub mod desk;
pub mod mixing;
pub mod optim;
pub mod pipeline;
pub mod sanity;
pub mod stage;
pub mod warmup;

use std::path::PathBuf;

pub use contrastive::{contrastive_pretrain, info_nce, ContrastiveConfig, ContrastiveModel};
pub use corpus::Corpus;
pub use mixing::{mix_batches, MixPlan};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use sanity::{overfit_localization, OverfitConfig, OverfitReport};
pub use pipeline::{prepare_base, run_stage, CheckpointKind, StageReport};
pub use stage::{StageSpec, StepRecord, TrainState, Trainer};
pub use warmup::{warmup_lm, WarmupConfig};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("no training samples for tasks {0}")]
    EmptyDataset(String),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("all task streams are empty")]
    NoStreams,
    #[error("record `{0}` referenced by a sample is not in the corpus")]
    MissingRecord(String),
    #[error("invalid training setting: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Core(#[from] anyecg_core::Error),
    #[error(transparent)]
    Data(#[from] anyecg_datagen::DatagenError),
}

impl TrainError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
