//! Stage specification and the step-level trainer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use anyecg_core::checkpoint::{load_tensors, save_tensors};
use anyecg_core::fusion::EcgChatModel;
use anyecg_core::nn::ParamGroup;
use anyecg_datagen::{record_rng, Split, Subset};
use candle_core::DType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, OwnedExample};
use crate::mixing::{mix_batches, MixPlan};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSpec {
    pub stage: u8,
    pub trainable: BTreeSet<ParamGroup>,
    pub tasks: BTreeSet<Subset>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Caps the step count (toy runs); `None` runs every epoch.
    pub max_steps: Option<usize>,
}

impl Default for StageSpec {
    fn default() -> Self {
        Self::table3(1)
    }
}

impl StageSpec {
    /// Stage defaults: ReportGen with connector and encoder trainable, then
    /// Localization added, then Multi-ECG and ECG-QA with LoRA throughout
    /// stages 2 and 3. Delimiter embeddings train alongside the connector.
    pub fn table3(stage: u8) -> Self {
        use ParamGroup::*;
        use Subset::*;
        let (trainable, tasks, batch, epochs) = match stage {
            1 => (vec![Connector, Encoder, SpecialTokens], vec![Reportgen], 256, 2),
            2 => (
                vec![Connector, Encoder, SpecialTokens, Lora],
                vec![Reportgen, Localization, LocalizationLong],
                64,
                2,
            ),
            _ => (
                vec![Connector, Encoder, SpecialTokens, Lora],
                vec![Reportgen, Localization, LocalizationLong, Multiecg, Ecgqa],
                64,
                1,
            ),
        };
        Self {
            stage: stage.clamp(1, 3),
            trainable: trainable.into_iter().collect(),
            tasks: tasks.into_iter().collect(),
            lr: 1e-4,
            batch,
            epochs,
            warmup_frac: 0.03,
            optimizer: AdamWConfig::default(),
            seed: 0,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(TrainError::Config(format!("stage {} is not 1, 2 or 3", self.stage)));
        }
        if self.stage == 1 && self.trainable.contains(&ParamGroup::Lora) {
            return Err(TrainError::Config("stage 1 does not train LoRA adapters".into()));
        }
        if self.trainable.contains(&ParamGroup::LmBase) {
            return Err(TrainError::Config("base language model weights stay frozen".into()));
        }
        if self.batch == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return Err(TrainError::Config("batch, epochs and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Batch composition by subset.
    pub tasks: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub losses: Vec<f64>,
}

/// Runs optimizer steps for one stage over a corpus.
pub struct Trainer<'a> {
    model: &'a EcgChatModel,
    spec: StageSpec,
    corpus: &'a Corpus,
    streams: Vec<(Subset, Vec<usize>)>,
    optim: AdamW,
    schedule: Schedule,
    state: TrainState,
    steps_per_epoch: usize,
    total_steps: usize,
    plan: Option<(usize, Vec<Vec<usize>>)>,
    log: Option<Box<dyn Write + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a EcgChatModel, spec: StageSpec, corpus: &'a Corpus) -> Result<Self> {
        spec.validate()?;
        corpus.validate()?;
        let streams: Vec<(Subset, Vec<usize>)> = corpus
            .streams(&spec.tasks, Split::Train)
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .collect();
        let n: usize = streams.iter().map(|(_, v)| v.len()).sum();
        if n == 0 {
            let names: Vec<&str> = spec.tasks.iter().map(|t| t.name()).collect();
            return Err(TrainError::EmptyDataset(names.join(", ")));
        }
        let steps_per_epoch = n.div_ceil(spec.batch);
        let full = steps_per_epoch * spec.epochs;
        let total_steps = spec.max_steps.map_or(full, |m| m.min(full));
        let optim = AdamW::new(model.store(), &spec.trainable, spec.optimizer.clone())?;
        let schedule = Schedule::new(spec.lr, total_steps, spec.warmup_frac);
        let state = TrainState {
            stage: spec.stage,
            step: 0,
            seed: spec.seed,
            losses: Vec::new(),
        };
        Ok(Self {
            model,
            spec,
            corpus,
            streams,
            optim,
            schedule,
            state,
            steps_per_epoch,
            total_steps,
            plan: None,
            log: None,
        })
    }

    /// Appends one JSON object per step to `sink`.
    pub fn with_log(mut self, sink: impl Write + 'a) -> Self {
        self.log = Some(Box::new(sink));
        self
    }

    pub fn spec(&self) -> &StageSpec {
        &self.spec
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optim
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn epoch_plan(&self, epoch: usize) -> Result<Vec<Vec<usize>>> {
        let mut rng = record_rng(self.spec.seed, &format!("stage{}-epoch{epoch}", self.spec.stage));
        let shuffled: Vec<Vec<usize>> = self
            .streams
            .iter()
            .map(|(_, v)| {
                let mut v = v.clone();
                v.shuffle(&mut rng);
                v
            })
            .collect();
        let sizes: Vec<usize> = shuffled.iter().map(Vec::len).collect();
        let plan: MixPlan = mix_batches(&sizes, None, rand::Rng::random(&mut rng))?;
        Ok(plan
            .batches(self.spec.batch)
            .map(|b| b.iter().map(|&(s, i)| shuffled[s][i]).collect())
            .collect())
    }

    fn batch_for(&mut self, step: usize) -> Result<Vec<usize>> {
        let epoch = step / self.steps_per_epoch;
        if self.plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.plan = Some((epoch, self.epoch_plan(epoch)?));
        }
        let (_, plan) = self.plan.as_ref().expect("plan set above");
        Ok(plan[step % self.steps_per_epoch].clone())
    }

    /// One optimizer step; `None` once the stage is complete.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let step = self.state.step;
        let idx = self.batch_for(step)?;
        let examples = self.corpus.examples(&idx)?;
        let loss = loss_of(self.model, &examples)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        let lr = self.schedule.lr_at(step);
        let stats = self.optim.step(&grads, lr)?;
        self.state.step += 1;
        self.state.losses.push(value);
        let mut tasks = BTreeMap::new();
        for e in &examples {
            *tasks.entry(e.subset.name().to_string()).or_insert(0) += 1;
        }
        let rec = StepRecord {
            stage: self.spec.stage,
            step,
            epoch: step / self.steps_per_epoch,
            loss: value,
            lr,
            grad_norm: stats.grad_norm,
            tasks,
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(log, "{line}").map_err(|e| TrainError::io(Path::new("<metrics log>"), e))?;
        }
        Ok(Some(rec))
    }

    /// Runs up to `n` steps (all remaining when `None`).
    pub fn run(&mut self, n: Option<usize>) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while n.is_none_or(|n| out.len() < n) {
            match self.step()? {
                Some(r) => out.push(r),
                None => break,
            }
        }
        Ok(out)
    }

    /// Mean loss over the given samples without updating anything.
    pub fn eval_loss(&self, indices: &[usize]) -> Result<f64> {
        eval_loss(self.model, self.corpus, indices)
    }

    /// Writes model parameters, optimizer moments and the step counter.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.store().tensors();
        tensors.extend(self.optim.state_tensors());
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), "anyecg-train-state".to_string());
        meta.insert("state".to_string(), serde_json::to_string(&self.state)?);
        meta.insert("spec".to_string(), serde_json::to_string(&self.spec)?);
        save_tensors(path, &tensors, meta)?;
        Ok(())
    }

    /// Restores a state written by [`save_state`](Self::save_state) into
    /// `model` and continues from its step.
    pub fn resume(model: &'a EcgChatModel, spec: StageSpec, corpus: &'a Corpus, path: &Path) -> Result<Self> {
        let (meta, tensors) = load_tensors(path, model.device())?;
        if meta.get("format").map(String::as_str) != Some("anyecg-train-state") {
            return Err(TrainError::MissingPrerequisite(format!("{} is not a training state", path.display())));
        }
        let state: TrainState = serde_json::from_str(
            meta.get("state")
                .ok_or_else(|| TrainError::Config("training state lacks `state`".into()))?,
        )?;
        if state.stage != spec.stage {
            return Err(TrainError::Config(format!(
                "state is for stage {}, spec is stage {}",
                state.stage, spec.stage
            )));
        }
        model.store().assign(&tensors, None)?;
        let mut t = Self::new(model, spec, corpus)?;
        t.optim.load_state(&tensors, state.step)?;
        t.state = state;
        Ok(t)
    }
}

pub(crate) fn loss_of(model: &EcgChatModel, examples: &[OwnedExample]) -> Result<candle_core::Tensor> {
    let batch: Vec<_> = examples.iter().map(OwnedExample::as_train).collect();
    Ok(model.batch_loss(&batch)?)
}

/// Mean loss over samples, evaluated in chunks of 16 and weighted by chunk.
pub fn eval_loss(model: &EcgChatModel, corpus: &Corpus, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(TrainError::Config("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(16) {
        let ex = corpus.examples(chunk)?;
        let l = loss_of(model, &ex)?.detach().to_dtype(DType::F64)?.to_scalar::<f64>()?;
        total += l * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}
