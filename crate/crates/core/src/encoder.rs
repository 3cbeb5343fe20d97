//! ViT-style ECG encoder.
//!
//! A canonical 10 s clip (12 leads × 1000 samples) is split into `(1, 200)`
//! patches, lead-major: token `1 + lead * 5 + pos` holds samples
//! `pos * 200 .. (pos + 1) * 200` of `lead`. Each patch embedding is
//!
//! ```text
//! E = E_signal(patch) + E_pos[pos] + E_lead[lead]
//! ```
//!
//! with a learned CLS token prepended. Pre-LN transformer blocks follow and
//! the pooled output is the layer-normalized final CLS state.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, LayerNorm, Linear, Mlp, ParamStore};
use crate::records::{CanonicalRecord, NUM_LEADS};

pub const CLIP_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_len: usize,
    pub max_leads: usize,
    pub max_patches_per_lead: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// ViT-base geometry.
    pub fn full() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            patch_len: 200,
            max_leads: NUM_LEADS,
            max_patches_per_lead: 5,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.patch_len * self.max_patches_per_lead != CLIP_SAMPLES {
            return Err(Error::Config(format!(
                "patch_len {} × patches {} must cover {CLIP_SAMPLES} samples",
                self.patch_len, self.max_patches_per_lead
            )));
        }
        if self.max_leads != NUM_LEADS {
            return Err(Error::Config(format!("max_leads must be {NUM_LEADS}")));
        }
        Ok(())
    }

    pub fn patches_per_clip(&self) -> usize {
        self.max_leads * self.max_patches_per_lead
    }
}

/// Embedded clip tokens `z₀`: row 0 is CLS, rows `1..=n` are patches.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub tokens: Tensor,
    /// Lead slot of patch token `i + 1`.
    pub lead_index: Vec<usize>,
    /// Temporal position of patch token `i + 1`.
    pub pos_index: Vec<usize>,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct EcgEmbedding {
    /// Pooled `y = LN(z_L⁰)`, shape `(D,)`.
    pub cls: Tensor,
    /// Final-layer patch states (after the same final norm), `(n, D)`.
    pub patch_tokens: Tensor,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn forward(&self, z: &Tensor, heads: usize) -> Result<Tensor> {
        let h = self.ln1.forward(z)?;
        let attn = multi_head_attention(
            &self.q.forward(&h)?,
            &self.k.forward(&h)?,
            &self.v.forward(&h)?,
            heads,
            None,
        )?;
        let z = (self.o.forward(&attn)? + z)?;
        let h = self.ln2.forward(&z)?;
        Ok((self.mlp.forward(&h)? + z)?)
    }
}

#[derive(Debug, Clone)]
pub struct EcgEncoder {
    cfg: EncoderConfig,
    signal_proj: Linear,
    pos_table: Tensor,
    lead_table: Tensor,
    cls: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    lead_ids: Tensor,
    pos_ids: Tensor,
}

impl EcgEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let signal_proj = Linear::new(store, "encoder.signal_proj", cfg.patch_len, d, true)?;
        let (lead_table, pos_table) = lead_position_tables(cfg, store)?;
        let cls = store.normal("encoder.cls", &[1, d], 0.02)?;
        let eps = cfg.layer_norm_eps;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("encoder.blocks.{i}");
                Ok(EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, eps)?,
                    q: Linear::new(store, &format!("{p}.attn.q"), d, d, true)?,
                    k: Linear::new(store, &format!("{p}.attn.k"), d, d, true)?,
                    v: Linear::new(store, &format!("{p}.attn.v"), d, d, true)?,
                    o: Linear::new(store, &format!("{p}.attn.o"), d, d, true)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, eps)?,
                    mlp: Mlp::new(store, &format!("{p}.mlp"), d, d * cfg.mlp_ratio)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d, eps)?;
        let (lead_index, pos_index) = patch_indices(cfg);
        let dev = store.device();
        let to_ids = |v: &[usize], dev: &Device| {
            Tensor::from_vec(v.iter().map(|&i| i as u32).collect::<Vec<_>>(), v.len(), dev)
        };
        Ok(Self {
            cfg: cfg.clone(),
            signal_proj,
            pos_table,
            lead_table,
            cls,
            blocks,
            norm,
            lead_ids: to_ids(&lead_index, dev)?,
            pos_ids: to_ids(&pos_index, dev)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn lead_table(&self) -> &Tensor {
        &self.lead_table
    }

    pub fn pos_table(&self) -> &Tensor {
        &self.pos_table
    }

    /// Raw patches `(B, n, patch_len)` for a batch of canonical clips.
    fn raw_patches(&self, clips: &[&CanonicalRecord]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(clips.len() * NUM_LEADS * CLIP_SAMPLES);
        for clip in clips {
            if clip.n_samples() != CLIP_SAMPLES {
                return Err(Error::ClipLength {
                    expected: CLIP_SAMPLES,
                    got: clip.n_samples(),
                });
            }
            for row in &clip.signal {
                data.extend_from_slice(row);
            }
        }
        let n = self.cfg.patches_per_clip();
        let t = Tensor::from_vec(data, (clips.len(), n, self.cfg.patch_len), self.cls.device())?;
        Ok(t.to_dtype(self.cls.dtype())?)
    }

    /// `z₀` for a batch of clips: `(B, 1 + n, D)`.
    pub fn embed_batch(&self, clips: &[&CanonicalRecord]) -> Result<Tensor> {
        let patches = self.raw_patches(clips)?;
        self.embed_patches(&patches)
    }

    /// `z₀` from raw patch samples `(B, n, patch_len)`.
    pub fn embed_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let b = patches.dim(0)?;
        let d = self.cfg.width;
        let e_signal = self.signal_proj.forward(patches)?;
        let e_pos = self.pos_table.index_select(&self.pos_ids, 0)?;
        let e_lead = self.lead_table.index_select(&self.lead_ids, 0)?;
        let e = e_signal.broadcast_add(&(e_pos + e_lead)?)?;
        let cls = self.cls.unsqueeze(0)?.broadcast_as((b, 1, d))?;
        Ok(Tensor::cat(&[&cls, &e], 1)?)
    }

    pub fn patchify(&self, clip: &CanonicalRecord) -> Result<PatchSequence> {
        let tokens = self.embed_batch(&[clip])?.squeeze(0)?;
        let (lead_index, pos_index) = patch_indices(&self.cfg);
        Ok(PatchSequence {
            tokens,
            n: lead_index.len(),
            lead_index,
            pos_index,
        })
    }

    /// Runs the block stack and final norm over `z₀` of shape `(B, 1 + n, D)`.
    pub fn forward_tokens(&self, z0: &Tensor) -> Result<Tensor> {
        let mut z = z0.clone();
        for block in &self.blocks {
            z = block.forward(&z, self.cfg.heads)?;
        }
        self.norm.forward(&z)
    }

    pub fn encode_clip(&self, p: &PatchSequence) -> Result<EcgEmbedding> {
        let out = self.forward_tokens(&p.tokens.unsqueeze(0)?)?.squeeze(0)?;
        Ok(EcgEmbedding {
            cls: out.get(0)?,
            patch_tokens: out.narrow(0, 1, p.n)?,
        })
    }

    /// Encodes a batch of clips; returns `(cls (B, D), patches (B, n, D))`.
    pub fn encode_batch(&self, clips: &[&CanonicalRecord]) -> Result<(Tensor, Tensor)> {
        let out = self.forward_tokens(&self.embed_batch(clips)?)?;
        let n = self.cfg.patches_per_clip();
        Ok((out.narrow(1, 0, 1)?.squeeze(1)?, out.narrow(1, 1, n)?))
    }
}

fn patch_indices(cfg: &EncoderConfig) -> (Vec<usize>, Vec<usize>) {
    let per = cfg.max_patches_per_lead;
    (0..cfg.max_leads * per).map(|i| (i / per, i % per)).unzip()
}

/// Learned lead and positional tables: `E_lead (12, D)`, `E_pos (5, D)`.
/// Every patch of a lead shares its `E_lead` row; every patch at the same
/// time index shares its `E_pos` row.
pub fn lead_position_tables(cfg: &EncoderConfig, store: &mut ParamStore) -> Result<(Tensor, Tensor)> {
    let lead = store.normal("encoder.lead_embed", &[cfg.max_leads, cfg.width], 0.02)?;
    let pos = store.normal("encoder.pos_embed", &[cfg.max_patches_per_lead, cfg.width], 0.02)?;
    Ok((lead, pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn clip(seed: f32) -> CanonicalRecord {
        CanonicalRecord {
            record_id: "c".into(),
            signal: (0..NUM_LEADS)
                .map(|l| {
                    (0..CLIP_SAMPLES)
                        .map(|i| (i as f32 * 0.05 + l as f32 + seed).sin())
                        .collect()
                })
                .collect(),
            lead_mask: [true; NUM_LEADS],
            annotations: vec![],
            acquired_at: None,
        }
    }

    fn encoder(depth: usize) -> (ParamStore, EcgEncoder) {
        let mut store = ParamStore::new(3, DType::F64, Device::Cpu);
        let cfg = EncoderConfig {
            depth,
            width: 16,
            heads: 2,
            ..EncoderConfig::desk()
        };
        let enc = EcgEncoder::new(&cfg, &mut store).unwrap();
        (store, enc)
    }

    #[test]
    fn sixty_patches_plus_cls() {
        let (_, enc) = encoder(1);
        let p = enc.patchify(&clip(0.0)).unwrap();
        assert_eq!(p.n, 60);
        assert_eq!(p.tokens.dims(), &[61, 16]);
        let e = enc.encode_clip(&p).unwrap();
        assert_eq!(e.cls.dims(), &[16]);
        assert_eq!(e.patch_tokens.dims(), &[60, 16]);
    }

    #[test]
    fn wrong_clip_length_is_rejected() {
        let (_, enc) = encoder(1);
        let mut c = clip(0.0);
        c.signal.iter_mut().for_each(|r| r.truncate(999));
        assert!(matches!(enc.patchify(&c), Err(Error::ClipLength { .. })));
    }

    #[test]
    fn patches_only_see_their_own_lead() {
        let (_, enc) = encoder(1);
        let a = clip(0.0);
        let mut b = a.clone();
        b.signal[11].iter_mut().for_each(|v| *v = -*v);
        let ta = enc.patchify(&a).unwrap().tokens.to_vec2::<f64>().unwrap();
        let tb = enc.patchify(&b).unwrap().tokens.to_vec2::<f64>().unwrap();
        assert_eq!(ta[..56], tb[..56]);
        assert_ne!(ta[56..], tb[56..]);
    }

    #[test]
    fn zero_signal_gives_pos_plus_lead_plus_bias() {
        let (_, enc) = encoder(1);
        let mut c = clip(0.0);
        c.signal.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
        let toks = enc.patchify(&c).unwrap().tokens.to_vec2::<f64>().unwrap();
        let lead = enc.lead_table().to_vec2::<f64>().unwrap();
        let pos = enc.pos_table().to_vec2::<f64>().unwrap();
        // signal_proj bias is zero at init, so E = E_pos + E_lead exactly.
        for (i, row) in toks.iter().enumerate().skip(1) {
            let (l, p) = ((i - 1) / 5, (i - 1) % 5);
            for d in 0..16 {
                assert!((row[d] - (pos[p][d] + lead[l][d])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn depth_zero_is_layer_norm_of_cls() {
        let (_, enc) = encoder(0);
        let p = enc.patchify(&clip(1.0)).unwrap();
        let e = enc.encode_clip(&p).unwrap();
        let expected = enc.norm.forward(&p.tokens.get(0).unwrap()).unwrap();
        assert_eq!(
            e.cls.to_vec1::<f64>().unwrap(),
            expected.to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::desk();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::desk();
        cfg.patch_len = 100;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::full().validate().is_ok());
    }
}
