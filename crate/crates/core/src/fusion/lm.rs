//! Desk-scale decoder-only language model.
//!
//! Pre-LN causal transformer with learned absolute positions. The vocabulary
//! table covers the tokenizer's base vocabulary; the two ECG delimiter
//! embeddings live in a separate trainable table (`special.ecg_delims`) and
//! are never produced by the output head.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::lora::{AdapterTarget, LoraAdapter, LoraConfig, LoraLinear, Projection};
use crate::nn::{causal_mask, multi_head_attention, LayerNorm, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_context: usize,
    pub layer_norm_eps: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            max_context: 1024,
            layer_norm_eps: 1e-5,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "LM width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.max_context == 0 {
            return Err(Error::Config("LM max_context must be > 0".into()));
        }
        Ok(())
    }
}

/// What the fusion layer needs from a decoder LM.
pub trait LanguageModel {
    /// Width of the output head; ids `>= base_vocab` are delimiter tokens.
    fn base_vocab(&self) -> usize;
    fn width(&self) -> usize;
    fn max_context(&self) -> usize;
    /// Token embeddings `(n, D)` for ids, including the delimiter ids.
    fn embed(&self, ids: &[u32]) -> Result<Tensor>;
    /// Next-token logits `(B, T, V)` for an embedding sequence `(B, T, D)`.
    fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor>;
    /// The named query/key projection of `layer`, when it exists.
    fn projection(&self, layer: usize, which: Projection) -> Option<&LoraLinear>;
}

#[derive(Debug, Clone)]
struct LmBlock {
    ln1: LayerNorm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    o: LoraLinear,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl LmBlock {
    fn forward(&self, x: &Tensor, heads: usize, mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let attn = multi_head_attention(
            &self.q.forward(&h)?,
            &self.k.forward(&h)?,
            &self.v.forward(&h)?,
            heads,
            Some(mask),
        )?;
        let x = (self.o.forward(&attn)? + x)?;
        let h = self.ln2.forward(&x)?;
        Ok((self.mlp.forward(&h)? + x)?)
    }

    fn proj(&self, which: Projection) -> &LoraLinear {
        match which {
            Projection::Query => &self.q,
            Projection::Key => &self.k,
            Projection::Value => &self.v,
            Projection::Output => &self.o,
        }
    }

    fn proj_mut(&mut self, which: Projection) -> &mut LoraLinear {
        match which {
            Projection::Query => &mut self.q,
            Projection::Key => &mut self.k,
            Projection::Value => &mut self.v,
            Projection::Output => &mut self.o,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLm {
    cfg: LmConfig,
    vocab: usize,
    tok_emb: Tensor,
    special_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<LmBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl DecoderLm {
    pub fn new(cfg: &LmConfig, vocab: usize, lora: Option<&LoraConfig>, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let eps = cfg.layer_norm_eps;
        let tok_emb = store.normal("lm.tok_emb", &[vocab, d], 0.02)?;
        let special_emb = store.normal("special.ecg_delims", &[2, d], 0.02)?;
        let pos_emb = store.normal("lm.pos_emb", &[cfg.max_context, d], 0.02)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("lm.blocks.{i}");
            let plain = |store: &mut ParamStore, name: &str| -> Result<LoraLinear> {
                Ok(LoraLinear {
                    base: Linear::new(store, &format!("{p}.attn.{name}"), d, d, true)?,
                    adapter: None,
                })
            };
            blocks.push(LmBlock {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, eps)?,
                q: plain(store, "q")?,
                k: plain(store, "k")?,
                v: plain(store, "v")?,
                o: plain(store, "o")?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, eps)?,
                mlp: Mlp::new(store, &format!("{p}.mlp"), d, d * cfg.mlp_ratio)?,
            });
        }
        let norm = LayerNorm::new(store, "lm.norm", d, eps)?;
        let head = Linear::new(store, "lm.head", d, vocab, false)?;
        let mut lm = Self {
            cfg: cfg.clone(),
            vocab,
            tok_emb,
            special_emb,
            pos_emb,
            blocks,
            norm,
            head,
        };
        if let Some(lora) = lora {
            lm.attach_lora(lora, store)?;
        }
        Ok(lm)
    }

    fn attach_lora(&mut self, lora: &LoraConfig, store: &mut ParamStore) -> Result<()> {
        let d = self.cfg.width;
        for (layer, block) in self.blocks.iter_mut().enumerate() {
            for &projection in &lora.targets {
                let target = AdapterTarget { layer, projection };
                block.proj_mut(projection).adapter = Some(LoraAdapter::new(store, target, d, d, lora)?);
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    /// Same weights with every adapter removed.
    pub fn without_adapters(&self) -> Self {
        let mut lm = self.clone();
        for block in &mut lm.blocks {
            for p in [Projection::Query, Projection::Key, Projection::Value, Projection::Output] {
                block.proj_mut(p).adapter = None;
            }
        }
        lm
    }

    /// Adapters folded into dense weights `W + (alpha/r)·B·A`.
    pub fn merged(&self) -> Result<Self> {
        let mut lm = self.clone();
        for block in &mut lm.blocks {
            for p in [Projection::Query, Projection::Key, Projection::Value, Projection::Output] {
                let proj = block.proj_mut(p);
                if proj.adapter.is_some() {
                    proj.base.weight = proj.merged_weight()?;
                    proj.adapter = None;
                }
            }
        }
        Ok(lm)
    }

    /// Final normalized hidden states `(B, T, D)` for embeddings `(B, T, D)`.
    pub fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        if t > self.cfg.max_context {
            return Err(Error::ContextOverflow {
                len: t,
                max: self.cfg.max_context,
            });
        }
        let mut h = x.broadcast_add(&self.pos_emb.narrow(0, 0, t)?)?;
        let mask = causal_mask(t, x.dtype(), x.device())?;
        for block in &self.blocks {
            h = block.forward(&h, self.cfg.heads, &mask)?;
        }
        self.norm.forward(&h)
    }

    /// Output projection of hidden states onto the base vocabulary.
    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        self.head.forward(h)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.blocks.iter().flat_map(|b| {
            [&b.q, &b.k, &b.v, &b.o]
                .into_iter()
                .filter_map(|p| p.adapter.as_ref())
        })
    }
}

impl LanguageModel for DecoderLm {
    fn base_vocab(&self) -> usize {
        self.vocab
    }

    fn width(&self) -> usize {
        self.cfg.width
    }

    fn max_context(&self) -> usize {
        self.cfg.max_context
    }

    fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        let table = Tensor::cat(&[&self.tok_emb, &self.special_emb], 0)?;
        let limit = self.vocab as u32 + 2;
        if let Some(&bad) = ids.iter().find(|&&i| i >= limit) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary of {limit}")));
        }
        let idx = Tensor::from_vec(ids.to_vec(), ids.len(), table.device())?;
        Ok(table.index_select(&idx, 0)?)
    }

    fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.hidden(x)?)
    }

    fn projection(&self, layer: usize, which: Projection) -> Option<&LoraLinear> {
        self.blocks.get(layer).map(|b| b.proj(which))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn toy() -> DecoderLm {
        let cfg = LmConfig {
            layers: 2,
            width: 16,
            heads: 2,
            max_context: 32,
            ..LmConfig::default()
        };
        let mut store = ParamStore::new(5, DType::F64, Device::Cpu);
        DecoderLm::new(&cfg, 40, Some(&LoraConfig::default()), &mut store).unwrap()
    }

    #[test]
    fn adapters_on_query_and_key_only() {
        let lm = toy();
        assert_eq!(lm.adapters().count(), 4);
        assert!(lm.projection(0, Projection::Query).unwrap().adapter.is_some());
        assert!(lm.projection(1, Projection::Key).unwrap().adapter.is_some());
        assert!(lm.projection(0, Projection::Value).unwrap().adapter.is_none());
    }

    #[test]
    fn causal_prefix_is_stable() {
        let lm = toy();
        let x = lm.embed(&[1, 5, 9, 12, 41]).unwrap().unsqueeze(0).unwrap();
        let full = lm.forward_embeddings(&x).unwrap();
        let prefix = lm.forward_embeddings(&x.narrow(1, 0, 3).unwrap()).unwrap();
        let a = full.narrow(1, 0, 3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = prefix.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(full.dims(), &[1, 5, 40]);
    }

    #[test]
    fn overflow_is_an_error() {
        let lm = toy();
        let x = Tensor::zeros((1, 33, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            lm.forward_embeddings(&x),
            Err(Error::ContextOverflow { len: 33, max: 32 })
        ));
        assert!(lm.embed(&[42]).is_err());
    }
}
