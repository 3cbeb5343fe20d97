//! Low-rank adapters on frozen linear projections.
//!
//! `y = W·x + b + (alpha / r) · B·(A·x)` with `B` zero-initialized, so a
//! fresh adapter leaves the base projection's output unchanged.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Projections that receive adapters, by name (`query`, `key`, `value`, `output`).
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![Projection::Query, Projection::Key],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub fn short(self) -> &'static str {
        match self {
            Self::Query => "q",
            Self::Key => "k",
            Self::Value => "v",
            Self::Output => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    /// `(r, d_in)`
    pub a: Tensor,
    /// `(d_out, r)`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(
        store: &mut ParamStore,
        target: AdapterTarget,
        d_in: usize,
        d_out: usize,
        cfg: &LoraConfig,
    ) -> Result<Self> {
        if cfg.rank == 0 {
            return Err(Error::Config("LoRA rank must be > 0".into()));
        }
        let name = format!("lora.{}.{}", target.layer, target.projection.short());
        let a = store.uniform(&format!("{name}.a"), &[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt())?;
        let b = store.constant(&format!("{name}.b"), &[d_out, cfg.rank], 0.0)?;
        Ok(Self {
            target,
            a,
            b,
            rank: cfg.rank,
            alpha: cfg.alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) · B·A`, shape `(d_out, d_in)`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok((self.b.matmul(&self.a)? * self.scale())?)
    }
}

/// Adapter path: `W·x + (alpha/r)·B·(A·x)` over the last dimension of `x`.
pub fn lora_apply(base_weight: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = base_weight.dims2()?;
    let (ra, a_in) = adapter.a.dims2()?;
    let (b_out, rb) = adapter.b.dims2()?;
    if ra != adapter.rank || rb != adapter.rank {
        return Err(Error::RankMismatch(format!(
            "A is {ra}×{a_in}, B is {b_out}×{rb}, rank {}",
            adapter.rank
        )));
    }
    if a_in != d_in || b_out != d_out {
        return Err(Error::RankMismatch(format!(
            "adapter {b_out}×{a_in} does not fit weight {d_out}×{d_in}"
        )));
    }
    let base = linear(x, base_weight, None)?;
    let low = linear(&linear(x, &adapter.a, None)?, &adapter.b, None)?;
    Ok((base + (low * adapter.scale())?)?)
}

/// A frozen projection with an optional adapter.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.adapter {
            None => self.base.forward(x),
            Some(adapter) => {
                let y = lora_apply(&self.base.weight, adapter, x)?;
                match &self.base.bias {
                    Some(b) => Ok(y.broadcast_add(b)?),
                    None => Ok(y),
                }
            }
        }
    }

    /// Effective dense weight `W + (alpha/r)·B·A`.
    pub fn merged_weight(&self) -> Result<Tensor> {
        match &self.adapter {
            None => Ok(self.base.weight.clone()),
            Some(a) => Ok((&self.base.weight + a.delta()?)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn setup() -> (ParamStore, Tensor, LoraAdapter) {
        let mut store = ParamStore::new(11, DType::F64, Device::Cpu);
        let w = store.normal("lm.w", &[6, 5], 1.0).unwrap();
        let adapter = LoraAdapter::new(
            &mut store,
            AdapterTarget {
                layer: 0,
                projection: Projection::Query,
            },
            5,
            6,
            &LoraConfig::default(),
        )
        .unwrap();
        (store, w, adapter)
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let (store, w, adapter) = setup();
        let x = Tensor::randn(0.0f64, 1.0, (3, 5), store.device()).unwrap();
        let y = lora_apply(&w, &adapter, &x).unwrap();
        let base = linear(&x, &w, None).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), base.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn scale_is_two_for_rank_eight_alpha_sixteen() {
        let (_, _, adapter) = setup();
        assert_eq!(adapter.scale(), 2.0);
        assert_eq!(LoraConfig::default().scale(), 2.0);
    }

    #[test]
    fn rank_mismatch_is_reported() {
        let (store, w, mut adapter) = setup();
        adapter.rank = 4;
        let x = Tensor::zeros((1, 5), DType::F64, store.device()).unwrap();
        assert!(matches!(lora_apply(&w, &adapter, &x), Err(Error::RankMismatch(_))));
    }
}
