//! AdamW with decoupled weight decay, global-norm clipping, and a
//! warmup-then-cosine learning-rate schedule.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use anyecg_core::nn::{ParamGroup, ParamStore};
use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Linear warmup over the first `warmup_steps`, then cosine decay to zero
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let warmup_steps = ((total_steps as f64 * warmup_frac).ceil() as usize).min(total_steps);
        Self {
            peak_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn constant(peak_lr: f64) -> Self {
        Self {
            peak_lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.peak_lr;
        }
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub updated: usize,
}

struct Slot {
    name: String,
    group: Option<ParamGroup>,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Optimizer over the parameters of a set of groups. Parameters outside
/// those groups are never touched.
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    step: usize,
}

impl std::fmt::Debug for AdamW {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdamW")
            .field("cfg", &self.cfg)
            .field("params", &self.slots.len())
            .field("step", &self.step)
            .finish()
    }
}

impl AdamW {
    pub fn new(store: &ParamStore, groups: &BTreeSet<ParamGroup>, cfg: AdamWConfig) -> Result<Self> {
        Self::with_params(store.vars_in(groups), cfg)
    }

    pub fn with_params(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let mut slots = Vec::new();
        for (name, var) in params {
            let group = ParamGroup::from_name(&name);
            let m = var.as_tensor().zeros_like()?;
            let v = var.as_tensor().zeros_like()?;
            slots.push(Slot { name, group, var, m, v });
        }
        if slots.is_empty() {
            return Err(TrainError::Config("optimizer has no parameters".into()));
        }
        Ok(Self { cfg, slots, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Learning rate each group receives at `lr`.
    pub fn group_lrs(&self, lr: f64) -> BTreeMap<ParamGroup, f64> {
        self.slots.iter().filter_map(|s| s.group).map(|g| (g, lr)).collect()
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<StepStats> {
        let mut present = Vec::with_capacity(self.slots.len());
        let mut sq = 0.0;
        for (i, s) in self.slots.iter().enumerate() {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                present.push((i, g.clone()));
            }
        }
        let grad_norm = sq.sqrt();
        let clip = match self.cfg.max_grad_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, g) in &present {
            let s = &mut self.slots[*i];
            let g = if clip < 1.0 { g.affine(clip, 0.0)? } else { g.clone() };
            s.m = (s.m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            s.v = (s.v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let denom = s.v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.cfg.eps)?;
            let update = s.m.affine(1.0 / bc1, 0.0)?.div(&denom)?;
            let theta = s.var.as_tensor();
            let next = (theta.affine(1.0 - lr * self.cfg.weight_decay, 0.0)? - update.affine(lr, 0.0)?)?;
            s.var.set(&next)?;
        }
        Ok(StepStats {
            grad_norm,
            updated: present.len(),
        })
    }

    /// Moment tensors keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for s in &self.slots {
            out.insert(format!("adam.m.{}", s.name), s.m.clone());
            out.insert(format!("adam.v.{}", s.name), s.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for s in &mut self.slots {
            let get = |k: String| {
                tensors
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| TrainError::Config(format!("optimizer state lacks `{k}`")))
            };
            let m = get(format!("adam.m.{}", s.name))?;
            let v = get(format!("adam.v.{}", s.name))?;
            if m.dims() != s.var.dims() || v.dims() != s.var.dims() {
                return Err(TrainError::Config(format!("optimizer state shape mismatch for `{}`", s.name)));
            }
            s.m = m.to_dtype(s.var.dtype())?;
            s.v = v.to_dtype(s.var.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1e-4, 100, 0.03);
        assert_eq!(s.warmup_steps, 3);
        assert!((s.lr_at(0) - 1e-4 / 3.0).abs() < 1e-18);
        assert!((s.lr_at(2) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(3) - 1e-4).abs() < 1e-18);
        assert!(s.lr_at(99) < 1e-6);
        assert!(s.lr_at(50) < s.lr_at(20));
    }
}
