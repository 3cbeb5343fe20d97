//! Parameter store and the small set of differentiable layers shared by the
//! ECG encoder and the language model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to. Training stages select
/// trainable parameters by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Connector,
    SpecialTokens,
    LmBase,
    Lora,
    TextTower,
    ContrastiveHead,
}

impl ParamGroup {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Connector => "connector",
            Self::SpecialTokens => "special",
            Self::LmBase => "lm",
            Self::Lora => "lora",
            Self::TextTower => "text_tower",
            Self::ContrastiveHead => "contrastive",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let prefix = name.split('.').next()?;
        [
            Self::Encoder,
            Self::Connector,
            Self::SpecialTokens,
            Self::LmBase,
            Self::Lora,
            Self::TextTower,
            Self::ContrastiveHead,
        ]
        .into_iter()
        .find(|g| g.prefix() == prefix)
    }
}

/// Named, grouped trainable tensors with seeded initialization.
///
/// Names are prefixed with the group (`encoder.blocks.0.attn.q.weight`), so a
/// sorted iteration is a deterministic order across runs.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        use rand::SeedableRng;
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name.to_string(), data, shape)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name.to_string(), data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name.to_string(), vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters whose group is in `groups`, in name order.
    pub fn vars_in(&self, groups: &BTreeSet<ParamGroup>) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(name, _)| ParamGroup::from_name(name).is_some_and(|g| groups.contains(&g)))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self, group: ParamGroup) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| ParamGroup::from_name(n) == Some(group))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// SHA-256 of every tensor's raw little-endian bytes, keyed by name.
    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        self.vars
            .iter()
            .map(|(name, var)| Ok((name.clone(), tensor_hash(var.as_tensor())?)))
            .collect()
    }

    /// Overwrites parameters from `tensors`. Names not present in the store
    /// are ignored; `groups`, when given, restricts which names are loaded.
    pub fn assign(
        &self,
        tensors: &HashMap<String, Tensor>,
        groups: Option<&BTreeSet<ParamGroup>>,
    ) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in &self.vars {
            if let Some(groups) = groups {
                if !ParamGroup::from_name(name).is_some_and(|g| groups.contains(&g)) {
                    continue;
                }
            }
            if let Some(t) = tensors.get(name) {
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn load_safetensors(&self, path: &Path, groups: Option<&BTreeSet<ParamGroup>>) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.assign(&tensors, groups)
    }
}

pub fn tensor_hash(t: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = match t.dtype() {
        DType::F64 => t
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        _ => t
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    };
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), &[d_out, d_in], 0.02)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }
}

/// `x · Wᵀ + b` over the last dimension of `x`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().expect("rank >= 1");
    let rows = x.elem_count() / d_in;
    let y = x.reshape((rows, d_in))?.matmul(&weight.t()?)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().expect("rank >= 1") = weight.dim(0)?;
    Ok(y.reshape(out_dims)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[dim], 0.0)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension, with the max shift detached.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Mean cross-entropy over rows where `mask` is 1. `logits` is `(N, V)`,
/// `targets` is `(N,)` u32, `mask` is `(N,)` in the logits dtype.
pub fn masked_cross_entropy(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let logp = log_softmax_last(logits)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Err(Error::Config("loss mask selects no tokens".into()));
    }
    Ok(((picked * mask)?.sum_all()? * (-1.0 / count))?)
}

/// Feed-forward block: Linear → GELU → Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Additive attention mask `(T, T)` with `-inf` above the diagonal.
pub fn causal_mask(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j > i { f32::NEG_INFINITY } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), device)?.to_dtype(dtype)?)
}

/// Multi-head scaled dot-product attention on already-projected `q, k, v`
/// of shape `(B, T, D)`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, t, d) = q.dims3()?;
    let dh = d / heads;
    let split = |x: &Tensor| -> Result<Tensor> {
        Ok(x.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&v)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&mut store, "encoder.ln", 4, 1e-12).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn masked_cross_entropy_ignores_masked_rows() {
        let logits = Tensor::new(&[[0.0f64, 0.0], [5.0, -5.0]], &Device::Cpu).unwrap();
        let targets = Tensor::new(&[0u32, 1], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        let loss = masked_cross_entropy(&logits, &targets, &mask)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seeded_store_is_reproducible() {
        let make = || {
            let mut s = ParamStore::new(7, DType::F32, Device::Cpu);
            s.normal("encoder.w", &[3, 3], 1.0).unwrap();
            s.hashes().unwrap()
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn group_from_name() {
        assert_eq!(ParamGroup::from_name("lora.0.q.a"), Some(ParamGroup::Lora));
        assert_eq!(ParamGroup::from_name("lm.blocks.0"), Some(ParamGroup::LmBase));
        assert_eq!(ParamGroup::from_name("nope.x"), None);
    }
}
