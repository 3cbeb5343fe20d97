//! Memorization check for the span pathway: train a toy model on a fixed
//! set of localization samples, then decode them greedily and score IoU.

use std::collections::BTreeSet;

use anyecg_core::fusion::{Decoding, EcgChatModel, Tokenizer};
use anyecg_core::nn::ParamGroup;
use anyecg_core::records::canonicalize;
use anyecg_datagen::fixtures::arrhythmia_corpus;
use anyecg_datagen::{build_localization, ClipMode, LocalizationConfig};
use anyecg_evalkit::{parse_spans, score_answer};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::desk::tiny_model_config;
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverfitConfig {
    pub samples: usize,
    pub records: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            samples: 32,
            records: 12,
            steps: 600,
            batch: 16,
            lr: 3e-3,
            seed: 0,
            max_new_tokens: 160,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitItem {
    pub id: String,
    pub truth: String,
    pub prediction: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub mean_iou: f64,
    pub losses: Vec<f64>,
    pub items: Vec<OverfitItem>,
}

pub fn overfit_localization(cfg: &OverfitConfig) -> Result<OverfitReport> {
    let records: Vec<_> = arrhythmia_corpus(cfg.records, cfg.seed)?
        .iter()
        .map(canonicalize)
        .collect();
    let mut samples = build_localization(&records, &LocalizationConfig::new(ClipMode::Short, cfg.seed))?.samples;
    if samples.len() < cfg.samples {
        return Err(TrainError::Config(format!(
            "{} localization samples available, {} requested",
            samples.len(),
            cfg.samples
        )));
    }
    samples.truncate(cfg.samples);
    let tokenizer = Tokenizer::build(samples.iter().flat_map(|s| [s.question.as_str(), s.answer.as_str()]), 500, 1);
    let corpus = Corpus::new(samples, records);
    let all: Vec<usize> = (0..corpus.samples.len()).collect();
    let examples = corpus.examples(&all)?;

    let model = EcgChatModel::new(tiny_model_config(cfg.seed), tokenizer)?;
    let groups: BTreeSet<ParamGroup> = [
        ParamGroup::Encoder,
        ParamGroup::Connector,
        ParamGroup::SpecialTokens,
        ParamGroup::LmBase,
    ]
    .into();
    let mut optim = AdamW::new(
        model.store(),
        &groups,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    )?;
    let schedule = Schedule::new(cfg.lr, cfg.steps, 0.05);
    let batch = cfg.batch.clamp(1, examples.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = (step * batch) % examples.len();
        let chunk: Vec<_> = (0..batch)
            .map(|k| examples[(start + k) % examples.len()].as_train())
            .collect();
        let loss = model.batch_loss(&chunk)?;
        losses.push(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?);
        let grads = loss.backward()?;
        optim.step(&grads, schedule.lr_at(step))?;
    }

    let mut items = Vec::with_capacity(examples.len());
    for (ex, s) in examples.iter().zip(&corpus.samples) {
        let ecgs: Vec<_> = ex.ecgs.iter().collect();
        let prediction = model.reply(&ecgs, &ex.prompt, Decoding::Greedy, cfg.max_new_tokens)?;
        let truth = parse_spans(&s.answer)
            .span_set()
            .cloned()
            .ok_or_else(|| TrainError::Config(format!("{}: answer is not span text", s.id)))?;
        items.push(OverfitItem {
            id: s.id.clone(),
            truth: s.answer.clone(),
            iou: score_answer(&parse_spans(&prediction), &truth),
            prediction,
        });
    }
    let mean_iou = items.iter().map(|i| i.iou).sum::<f64>() / items.len() as f64;
    Ok(OverfitReport { mean_iou, losses, items })
}
