//! Checkpoint-to-checkpoint orchestration: base model preparation and
//! single stages with prerequisite checks and a freeze audit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyecg_core::checkpoint::read_metadata;
use anyecg_core::encoder::EncoderConfig;
use anyecg_core::fusion::{EcgChatModel, ModelConfig, Tokenizer};
use anyecg_core::nn::ParamGroup;
use anyecg_datagen::Split;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::contrastive::CONTRASTIVE_FORMAT;
use crate::corpus::Corpus;
use crate::stage::{eval_loss, StageSpec, StepRecord, Trainer};
use crate::warmup::{warmup_lm, WarmupConfig};
use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    Base,
    Stage(u8),
}

impl CheckpointKind {
    fn meta(self) -> HashMap<String, String> {
        let mut m = HashMap::new();
        match self {
            Self::Base => {
                m.insert("kind".into(), "base".into());
            }
            Self::Stage(s) => {
                m.insert("kind".into(), "stage".into());
                m.insert("stage".into(), s.to_string());
            }
        }
        m
    }

    pub fn of(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(TrainError::MissingPrerequisite(format!("{} does not exist", path.display())));
        }
        let meta = read_metadata(path)?;
        match (meta.get("kind").map(String::as_str), meta.get("stage")) {
            (Some("base"), _) => Ok(Self::Base),
            (Some("stage"), Some(s)) => s
                .parse()
                .map(Self::Stage)
                .map_err(|_| TrainError::MissingPrerequisite(format!("{}: bad stage tag", path.display()))),
            _ => Err(TrainError::MissingPrerequisite(format!(
                "{} is not a base or stage checkpoint",
                path.display()
            ))),
        }
    }
}

/// Builds the stage-1 starting point: a fresh model whose encoder comes
/// from a contrastive checkpoint and whose language model is warmed up on
/// `texts`. Written to `out`; returns the model and warm-up losses.
pub fn prepare_base(
    cfg: ModelConfig,
    tokenizer: Tokenizer,
    contrastive: &Path,
    texts: &[String],
    warmup: &WarmupConfig,
    out: &Path,
) -> Result<(EcgChatModel, Vec<f64>)> {
    if !contrastive.exists() {
        return Err(TrainError::MissingPrerequisite(format!(
            "contrastive encoder checkpoint {} does not exist",
            contrastive.display()
        )));
    }
    let meta = read_metadata(contrastive)?;
    if meta.get("format").map(String::as_str) != Some(CONTRASTIVE_FORMAT) {
        return Err(TrainError::MissingPrerequisite(format!(
            "{} is not a contrastive encoder checkpoint",
            contrastive.display()
        )));
    }
    let enc: EncoderConfig = serde_json::from_str(meta.get("encoder").map(String::as_str).unwrap_or("null"))
        .map_err(|e| TrainError::Config(format!("contrastive checkpoint encoder config: {e}")))?;
    if enc != cfg.encoder {
        return Err(TrainError::Config("contrastive encoder geometry differs from the model's".into()));
    }
    let model = EcgChatModel::new(cfg, tokenizer)?;
    let groups = BTreeSet::from([ParamGroup::Encoder]);
    let expected = model.store().vars_in(&groups).len();
    let loaded = model.load_groups(contrastive, &groups)?;
    if loaded != expected {
        return Err(TrainError::MissingPrerequisite(format!(
            "{}: {loaded} of {expected} encoder tensors present",
            contrastive.display()
        )));
    }
    let losses = warmup_lm(&model, texts, warmup)?;
    model.save_with(out, &CheckpointKind::Base.meta())?;
    Ok((model, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: Vec<StepRecord>,
    pub heldout_before: f64,
    pub heldout_after: f64,
    /// Groups with at least one changed tensor.
    pub changed_groups: BTreeSet<ParamGroup>,
    /// Tensors outside the trainable groups whose hash changed.
    pub frozen_violations: Vec<String>,
    pub hashes_before: BTreeMap<String, String>,
    pub hashes_after: BTreeMap<String, String>,
    pub group_lrs: BTreeMap<ParamGroup, f64>,
    pub checkpoint: PathBuf,
}

/// Held-out samples: the test split of the stage's tasks, else the first
/// training samples. At most `limit`.
pub fn heldout_indices(corpus: &Corpus, spec: &StageSpec, limit: usize) -> Vec<usize> {
    let pick = |split| -> Vec<usize> {
        corpus
            .streams(&spec.tasks, split)
            .into_values()
            .flatten()
            .collect()
    };
    let mut test = pick(Split::Test);
    if test.is_empty() {
        test = pick(Split::Train);
    }
    test.sort_unstable();
    test.truncate(limit);
    test
}

/// Runs one curriculum stage from `init` and writes the result to `out`.
/// Stage 1 starts from a base checkpoint, stage k from stage k-1.
pub fn run_stage(
    spec: &StageSpec,
    corpus: &Corpus,
    init: &Path,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<(EcgChatModel, StageReport)> {
    spec.validate()?;
    let need = if spec.stage == 1 {
        CheckpointKind::Base
    } else {
        CheckpointKind::Stage(spec.stage - 1)
    };
    let have = CheckpointKind::of(init)?;
    if have != need {
        return Err(TrainError::MissingPrerequisite(format!(
            "stage {} needs a {need:?} checkpoint, {} is {have:?}",
            spec.stage,
            init.display()
        )));
    }
    let model = EcgChatModel::load(init)?;
    let heldout = heldout_indices(corpus, spec, 32);
    let hashes_before = model.store().hashes()?;
    let (steps, heldout_before, heldout_after, group_lrs) = {
        let mut trainer = Trainer::new(&model, spec.clone(), corpus)?;
        if let Some(p) = metrics {
            if let Some(parent) = p.parent().filter(|x| !x.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| TrainError::io(parent, e))?;
            }
            let f = File::options()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| TrainError::io(p, e))?;
            trainer = trainer.with_log(BufWriter::new(f));
        }
        let before = if heldout.is_empty() { f64::NAN } else { trainer.eval_loss(&heldout)? };
        let group_lrs = trainer.optimizer().group_lrs(spec.lr);
        let steps = trainer.run(None)?;
        let after = if heldout.is_empty() { f64::NAN } else { eval_loss(&model, corpus, &heldout)? };
        (steps, before, after, group_lrs)
    };
    let hashes_after = model.store().hashes()?;
    let mut changed_groups = BTreeSet::new();
    let mut frozen_violations = Vec::new();
    for (name, h) in &hashes_after {
        if hashes_before.get(name) != Some(h) {
            let g = ParamGroup::from_name(name);
            if let Some(g) = g {
                changed_groups.insert(g);
            }
            if !g.is_some_and(|g| spec.trainable.contains(&g)) {
                frozen_violations.push(name.clone());
            }
        }
    }
    info!(
        stage = spec.stage,
        steps = steps.len(),
        heldout_before,
        heldout_after,
        "stage finished"
    );
    model.save_with(out, &CheckpointKind::Stage(spec.stage).meta())?;
    Ok((
        model,
        StageReport {
            stage: spec.stage,
            steps,
            heldout_before,
            heldout_after,
            changed_groups,
            frozen_violations,
            hashes_before,
            hashes_after,
            group_lrs,
            checkpoint: out.to_path_buf(),
        },
    ))
}
