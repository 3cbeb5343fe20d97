//! Run configuration, read from a TOML file. Every section is optional.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyecg_core::fusion::ModelConfig;
use anyecg_curriculum::{ContrastiveConfig, StageSpec, WarmupConfig};
use anyecg_llm::ClientConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub contrastive: ContrastiveConfig,
    pub warmup: WarmupConfig,
    pub stage1: StageOverrides,
    pub stage2: StageOverrides,
    pub stage3: StageOverrides,
    /// Chat-completion endpoint used to generate multi-ECG QA pairs.
    pub generator: ClientConfig,
    /// Chat-completion endpoint used to score multi-ECG answers.
    pub judge: ClientConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

/// Raw inputs for `build`. Unset paths fall back to `<out>/raw/...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub records: Option<PathBuf>,
    pub reports: Option<PathBuf>,
    pub patients: Option<PathBuf>,
    pub ecgqa: Option<PathBuf>,
    pub test_fraction: f64,
    pub ecgqa_fraction: f64,
    pub negative_ratio: f64,
    pub pairs_per_patient: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            records: None,
            reports: None,
            patients: None,
            ecgqa: None,
            test_fraction: 0.1,
            ecgqa_fraction: 0.1,
            negative_ratio: 0.25,
            pairs_per_patient: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub max_pieces: usize,
    pub min_count: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            max_pieces: 4000,
            min_count: 2,
        }
    }
}

/// Per-stage changes on top of the stage table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverrides {
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub warmup_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    /// Evaluate at most this many test samples per protocol.
    pub max_samples: Option<usize>,
    pub judge_in_flight: usize,
    /// Hashing-embedder width for report-to-label scoring.
    pub embed_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 160,
            max_samples: None,
            judge_in_flight: 4,
            embed_dim: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub max_new_tokens: usize,
    /// Requests waiting for the model beyond this are refused with 503.
    pub queue: usize,
    pub preview_points: usize,
    pub max_attachments: usize,
    pub sessions_dir: Option<PathBuf>,
    pub max_upload_bytes: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            max_new_tokens: 128,
            queue: 8,
            preview_points: 500,
            max_attachments: 6,
            sessions_dir: None,
            max_upload_bytes: 64 << 20,
        }
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Makes `seed` the root of every random choice in the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.contrastive.seed = seed;
        self.warmup.seed = seed;
        self
    }

    pub fn stage_spec(&self, stage: u8) -> StageSpec {
        let mut spec = StageSpec::table3(stage);
        let o = match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        };
        if let Some(v) = o.lr {
            spec.lr = v;
        }
        if let Some(v) = o.batch {
            spec.batch = v;
        }
        if let Some(v) = o.epochs {
            spec.epochs = v;
        }
        if let Some(v) = o.warmup_frac {
            spec.warmup_frac = v;
        }
        spec.max_steps = o.max_steps;
        spec.seed = self.seed.wrapping_add(stage as u64);
        spec
    }
}
