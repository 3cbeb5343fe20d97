//! Next-token pretraining of the base language model on plain text. The
//! small decoder starts from random weights, so it is fitted to the report
//! and answer text before the curriculum freezes it.

use std::collections::BTreeSet;

use anyecg_core::fusion::{AssembledPrompt, EcgChatModel, LanguageModel};
use anyecg_core::nn::ParamGroup;
use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

fn text_prompt(model: &EcgChatModel, text: &str) -> Result<AssembledPrompt> {
    let tok = model.tokenizer();
    let max = model.config().lm.max_context;
    let mut ids = vec![tok.bos_id()];
    ids.extend(tok.encode(text));
    ids.push(tok.eos_id());
    ids.truncate(max);
    let embeddings = model.lm().embed(&ids)?;
    let mut loss_mask = vec![true; ids.len()];
    loss_mask[0] = false;
    Ok(AssembledPrompt {
        embeddings,
        ids: ids.into_iter().map(Some).collect(),
        loss_mask,
    })
}

/// Trains the `lm` group on `texts`; returns the loss per step.
pub fn warmup_lm(model: &EcgChatModel, texts: &[String], cfg: &WarmupConfig) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(TrainError::EmptyDataset("language-model warm-up text".into()));
    }
    let groups = BTreeSet::from([ParamGroup::LmBase]);
    let mut optim = AdamW::new(
        model.store(),
        &groups,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    )?;
    let schedule = Schedule::new(cfg.lr, cfg.steps, 0.03);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.max(1) {
            if order.is_empty() {
                order = (0..texts.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let prompts = batch
            .iter()
            .map(|&i| text_prompt(model, &texts[i]))
            .collect::<Result<Vec<_>>>()?;
        let loss = model.prompts_loss(&prompts)?;
        losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        let grads = loss.backward()?;
        optim.step(&grads, schedule.lr_at(step))?;
    }
    Ok(losses)
}
