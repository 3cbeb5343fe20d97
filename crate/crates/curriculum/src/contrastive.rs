//! Contrastive pretraining of the ECG encoder against report text with a
//! symmetric InfoNCE objective and a small trainable text tower.

use std::collections::HashMap;
use std::path::Path;

use anyecg_core::checkpoint::save_tensors;
use anyecg_core::encoder::{EcgEncoder, EncoderConfig, CLIP_SAMPLES};
use anyecg_core::fusion::{l2_normalize, Tokenizer};
use anyecg_core::nn::{log_softmax_last, Linear, ParamStore};
use anyecg_core::records::CanonicalRecord;
use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::{Result, TrainError};

pub const CONTRASTIVE_FORMAT: &str = "anyecg-contrastive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Initial softmax temperature.
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub embed_dim: usize,
    pub text_width: usize,
    pub max_text_tokens: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            lr: 1e-3,
            temperature: 0.07,
            learnable_temperature: true,
            embed_dim: 64,
            text_width: 64,
            max_text_tokens: 128,
            seed: 0,
        }
    }
}

/// Symmetric InfoNCE over in-batch pairs: row `i` of `ecg` is paired with
/// row `i` of `text`. Both sides are L2-normalized; `log_scale` is the log
/// of the inverse temperature, capped at `ln 100`.
pub fn info_nce(ecg: &Tensor, text: &Tensor, log_scale: &Tensor) -> Result<Tensor> {
    let b = ecg.dim(0)?;
    if b < 2 {
        return Err(TrainError::BatchTooSmall(b));
    }
    let e = l2_normalize(ecg)?;
    let t = l2_normalize(text)?;
    let scale = log_scale.clamp(f64::MIN, 100f64.ln())?.exp()?.reshape((1, 1))?;
    let logits = e.matmul(&t.t()?)?.broadcast_mul(&scale)?;
    let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
    let row = (log_softmax_last(&logits)? * &eye)?.sum_all()?;
    let col = (log_softmax_last(&logits.t()?.contiguous()?)? * &eye)?.sum_all()?;
    Ok(((row + col)? * (-0.5 / b as f64))?)
}

/// First 10 s of a record, zero-padded when shorter.
pub fn first_clip(rec: &CanonicalRecord) -> Result<CanonicalRecord> {
    Ok(if rec.n_samples() > CLIP_SAMPLES {
        rec.slice(0.0, CLIP_SAMPLES as f64 / 100.0)?
    } else {
        rec.pad_to(CLIP_SAMPLES)
    })
}

/// Encoder plus projection heads and the text tower.
pub struct ContrastiveModel {
    cfg: ContrastiveConfig,
    store: ParamStore,
    encoder: EcgEncoder,
    tokenizer: Tokenizer,
    ecg_proj: Linear,
    text_emb: Tensor,
    text_proj: Linear,
    log_scale: Tensor,
}

impl std::fmt::Debug for ContrastiveModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContrastiveModel").field("cfg", &self.cfg).finish()
    }
}

impl ContrastiveModel {
    pub fn new(encoder_cfg: &EncoderConfig, tokenizer: Tokenizer, cfg: ContrastiveConfig, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed, dtype, Device::Cpu);
        let encoder = EcgEncoder::new(encoder_cfg, &mut store)?;
        let ecg_proj = Linear::new(&mut store, "contrastive.ecg_proj", encoder_cfg.width, cfg.embed_dim, false)?;
        let text_emb = store.normal("text_tower.emb", &[tokenizer.vocab_size(), cfg.text_width], 0.02)?;
        let text_proj = Linear::new(&mut store, "text_tower.proj", cfg.text_width, cfg.embed_dim, false)?;
        let init = (1.0 / cfg.temperature).ln();
        let log_scale = store.constant("contrastive.logit_scale", &[1], init)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            tokenizer,
            ecg_proj,
            text_emb,
            text_proj,
            log_scale,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &EcgEncoder {
        &self.encoder
    }

    pub fn temperature(&self) -> Result<f64> {
        let s = self.log_scale.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0];
        Ok((-s.min(100f64.ln())).exp())
    }

    /// `(B, embed_dim)`, not normalized.
    pub fn embed_ecgs(&self, recs: &[&CanonicalRecord]) -> Result<Tensor> {
        let clips = recs.iter().map(|r| first_clip(r)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&CanonicalRecord> = clips.iter().collect();
        let (cls, _) = self.encoder.encode_batch(&refs)?;
        Ok(self.ecg_proj.forward(&cls)?)
    }

    /// Mean of token embeddings, projected: `(B, embed_dim)`.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(texts.len());
        for t in texts {
            let mut ids = self.tokenizer.encode(t);
            ids.truncate(self.cfg.max_text_tokens);
            if ids.is_empty() {
                ids.push(self.tokenizer.eos_id());
            }
            let n = ids.len();
            let ids = Tensor::from_vec(ids, n, self.text_emb.device())?;
            rows.push(self.text_emb.index_select(&ids, 0)?.mean(0)?);
        }
        Ok(self.text_proj.forward(&Tensor::stack(&rows, 0)?)?)
    }

    pub fn loss(&self, recs: &[&CanonicalRecord], texts: &[&str]) -> Result<Tensor> {
        info_nce(&self.embed_ecgs(recs)?, &self.embed_texts(texts)?, &self.log_scale)
    }

    /// Fraction of ECGs whose most similar text is their own report.
    pub fn recall_at_1(&self, recs: &[&CanonicalRecord], texts: &[&str]) -> Result<f64> {
        let e = l2_normalize(&self.embed_ecgs(recs)?)?;
        let t = l2_normalize(&self.embed_texts(texts)?)?;
        let best = e.matmul(&t.t()?)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
        let hits = best.iter().enumerate().filter(|(i, &j)| *i == j as usize).count();
        Ok(hits as f64 / recs.len().max(1) as f64)
    }

    /// Writes encoder, heads and text tower with the encoder geometry.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CONTRASTIVE_FORMAT.to_string());
        meta.insert("encoder".to_string(), serde_json::to_string(self.encoder.config())?);
        meta.insert("contrastive".to_string(), serde_json::to_string(&self.cfg)?);
        save_tensors(path, &self.store.tensors(), meta)?;
        Ok(())
    }
}

/// Trains a fresh [`ContrastiveModel`] on `(record, report)` pairs; returns
/// it with the per-step losses.
pub fn contrastive_pretrain(
    pairs: &[(CanonicalRecord, String)],
    encoder_cfg: &EncoderConfig,
    tokenizer: Tokenizer,
    cfg: &ContrastiveConfig,
    dtype: DType,
) -> Result<(ContrastiveModel, Vec<f64>)> {
    if cfg.batch < 2 {
        return Err(TrainError::BatchTooSmall(cfg.batch));
    }
    if pairs.len() < 2 {
        return Err(TrainError::BatchTooSmall(pairs.len()));
    }
    let model = ContrastiveModel::new(encoder_cfg, tokenizer, cfg.clone(), dtype)?;
    let params: Vec<_> = model
        .store
        .iter()
        .filter(|(n, _)| cfg.learnable_temperature || *n != "contrastive.logit_scale")
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    let mut optim = AdamW::with_params(params, AdamWConfig::default())?;
    let per_epoch = pairs.len().div_ceil(cfg.batch);
    let schedule = Schedule::new(cfg.lr, per_epoch * cfg.epochs, 0.03);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut chunks: Vec<Vec<usize>> = order.chunks(cfg.batch).map(<[usize]>::to_vec).collect();
        // a trailing singleton joins the previous batch
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let tail = chunks.pop().expect("len > 1");
            chunks.last_mut().expect("len > 0").extend(tail);
        }
        for chunk in chunks {
            let recs: Vec<&CanonicalRecord> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let texts: Vec<&str> = chunk.iter().map(|&i| pairs[i].1.as_str()).collect();
            let loss = model.loss(&recs, &texts)?;
            losses.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
            let grads = loss.backward()?;
            optim.step(&grads, schedule.lr_at(step))?;
            step += 1;
        }
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pairs_give_ln2() {
        let e = Tensor::new(&[[0.3f64, -1.2, 0.5], [0.3, -1.2, 0.5]], &Device::Cpu).unwrap();
        let s = Tensor::new(&[(1.0f64 / 0.07).ln()], &Device::Cpu).unwrap();
        let l = info_nce(&e, &e, &s).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn single_pair_is_rejected() {
        let e = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let s = Tensor::new(&[0.0f64], &Device::Cpu).unwrap();
        assert!(matches!(info_nce(&e, &e, &s), Err(TrainError::BatchTooSmall(1))));
    }
}
