//! ECG encoder + connector + decoder LM, with prompt assembly, training loss
//! and decoding.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EcgEncoder, EncoderConfig, CLIP_SAMPLES};
use crate::error::{Error, Result};
use crate::fusion::lm::{DecoderLm, LanguageModel, LmConfig};
use crate::fusion::lora::LoraConfig;
use crate::fusion::tokenizer::{Role, Tokenizer, ECG_PLACEHOLDER};
use crate::nn::{masked_cross_entropy, Mlp, ParamGroup, ParamStore};
use crate::records::{CanonicalRecord, NUM_LEADS};

/// Which encoder outputs are handed to the LM for each ECG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EcgTokenMode {
    #[default]
    Both,
    ClsOnly,
    PatchesOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Self::F32 => DType::F32,
            Self::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub lora: LoraConfig,
    pub ecg_tokens: EcgTokenMode,
    pub precision: Precision,
    pub seed: u64,
    /// Identity of the language model behind the fusion layer.
    pub lm_tag: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            lm: LmConfig::default(),
            lora: LoraConfig::default(),
            ecg_tokens: EcgTokenMode::Both,
            precision: Precision::F32,
            seed: 0,
            lm_tag: "desk-decoder-v1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub text: String,
}

impl ChatMessage {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, text)
    }
}

/// Number of `<ecg>` placeholders in `text`.
pub fn count_placeholders(text: &str) -> usize {
    text.matches(ECG_PLACEHOLDER).count()
}

/// Puts one placeholder per ECG in front of `question` unless it already
/// carries placeholders.
pub fn with_placeholders(question: &str, n_ecgs: usize) -> String {
    if n_ecgs == 0 || count_placeholders(question) > 0 {
        return question.to_string();
    }
    let mut s = ECG_PLACEHOLDER.repeat(n_ecgs);
    s.push('\n');
    s.push_str(question);
    s
}

/// Modality connector: Linear → GELU → Linear from encoder width to LM width.
#[derive(Debug, Clone)]
pub struct Connector {
    pub mlp: Mlp,
}

impl Connector {
    pub fn new(store: &mut ParamStore, d_enc: usize, d_lm: usize) -> Result<Self> {
        let fc1 = crate::nn::Linear::new(store, "connector.fc1", d_enc, d_lm, true)?;
        let fc2 = crate::nn::Linear::new(store, "connector.fc2", d_lm, d_lm, true)?;
        Ok(Self { mlp: Mlp { fc1, fc2 } })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(x)
    }
}

/// Piece of an assembled prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(Vec<u32>),
    /// Index into the ECG block list; the block is already wrapped by the
    /// delimiter ids of the neighbouring text segments.
    Ecg(usize),
}

/// Token-level layout of a prompt (plus optional answer), before the ECG
/// blocks are spliced in.
#[derive(Debug, Clone)]
pub struct Layout {
    pub segments: Vec<Segment>,
    /// Loss weight per text token, aligned with the concatenated text ids.
    text_loss: Vec<bool>,
}

/// Mixed embedding sequence ready for the LM.
#[derive(Debug, Clone)]
pub struct AssembledPrompt {
    /// `(T, D_lm)`
    pub embeddings: Tensor,
    /// Token id per position; ECG block positions hold `None`.
    pub ids: Vec<Option<u32>>,
    /// Whether each position is a training target.
    pub loss_mask: Vec<bool>,
}

impl AssembledPrompt {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sampled { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct TrainExample<'a> {
    pub ecgs: Vec<&'a CanonicalRecord>,
    /// Conversation before the answer; the last message is normally a user turn.
    pub prompt: Vec<ChatMessage>,
    pub answer: String,
}

#[derive(Debug)]
pub struct EcgChatModel {
    cfg: ModelConfig,
    tokenizer: Tokenizer,
    store: ParamStore,
    encoder: EcgEncoder,
    connector: Connector,
    lm: DecoderLm,
}

pub const CHECKPOINT_FORMAT: &str = "anyecg-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

impl EcgChatModel {
    pub fn new(cfg: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        Self::on_device(cfg, tokenizer, Device::Cpu)
    }

    pub fn on_device(cfg: ModelConfig, tokenizer: Tokenizer, device: Device) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed, cfg.precision.dtype(), device);
        let encoder = EcgEncoder::new(&cfg.encoder, &mut store)?;
        let connector = Connector::new(&mut store, cfg.encoder.width, cfg.lm.width)?;
        let lm = DecoderLm::new(&cfg.lm, tokenizer.vocab_size(), Some(&cfg.lora), &mut store)?;
        Ok(Self {
            cfg,
            tokenizer,
            store,
            encoder,
            connector,
            lm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &EcgEncoder {
        &self.encoder
    }

    pub fn connector(&self) -> &Connector {
        &self.connector
    }

    pub fn lm(&self) -> &DecoderLm {
        &self.lm
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Number of 10 s clips an ECG of `n_samples` is split into.
    pub fn clip_count(n_samples: usize) -> usize {
        n_samples.div_ceil(CLIP_SAMPLES).max(1)
    }

    fn split_clips(rec: &CanonicalRecord) -> Vec<CanonicalRecord> {
        let k = Self::clip_count(rec.n_samples());
        let padded = rec.pad_to(k * CLIP_SAMPLES);
        (0..k)
            .map(|c| CanonicalRecord {
                record_id: format!("{}#{c}", rec.record_id),
                signal: padded
                    .signal
                    .iter()
                    .map(|row| row[c * CLIP_SAMPLES..(c + 1) * CLIP_SAMPLES].to_vec())
                    .collect(),
                lead_mask: padded.lead_mask,
                annotations: Vec::new(),
                acquired_at: None,
            })
            .collect()
    }

    /// Pads to a whole number of 10 s clips, encodes each clip, averages the
    /// CLS vectors and concatenates patch tokens in time order.
    /// Returns `(cls (D,), patches (60k, D))`.
    pub fn encode_dynamic(&self, rec: &CanonicalRecord) -> Result<(Tensor, Tensor)> {
        Ok(self.encode_dynamic_many(&[rec])?.remove(0))
    }

    /// Batched form of [`encode_dynamic`](Self::encode_dynamic): every clip
    /// of every record goes through the encoder in one pass.
    pub fn encode_dynamic_many(&self, recs: &[&CanonicalRecord]) -> Result<Vec<(Tensor, Tensor)>> {
        if recs.is_empty() {
            return Ok(Vec::new());
        }
        let mut clips = Vec::new();
        let mut counts = Vec::with_capacity(recs.len());
        for rec in recs {
            let c = Self::split_clips(rec);
            counts.push(c.len());
            clips.extend(c);
        }
        let refs: Vec<&CanonicalRecord> = clips.iter().collect();
        let (cls, patches) = self.encoder.encode_batch(&refs)?;
        let d = self.cfg.encoder.width;
        let mut out = Vec::with_capacity(recs.len());
        let mut at = 0;
        for k in counts {
            let c = cls.narrow(0, at, k)?.mean(0)?;
            let p = patches.narrow(0, at, k)?.reshape((k * self.cfg.encoder.patches_per_clip(), d))?;
            out.push((c, p));
            at += k;
        }
        Ok(out)
    }

    /// Projects `[cls; patches]` (subject to the token mode) into LM space.
    pub fn connect(&self, cls: &Tensor, patches: &Tensor) -> Result<Tensor> {
        let tokens = match self.cfg.ecg_tokens {
            EcgTokenMode::Both => Tensor::cat(&[&cls.unsqueeze(0)?, patches], 0)?,
            EcgTokenMode::ClsOnly => cls.unsqueeze(0)?,
            EcgTokenMode::PatchesOnly => patches.clone(),
        };
        self.connector.forward(&tokens)
    }

    /// Projected block for each ECG, `(m_i, D_lm)`.
    pub fn ecg_blocks(&self, recs: &[&CanonicalRecord]) -> Result<Vec<Tensor>> {
        self.encode_dynamic_many(recs)?
            .iter()
            .map(|(c, p)| self.connect(c, p))
            .collect()
    }

    /// Tokens for a transcript: `<bos>` then `role text <eos>` per message,
    /// then `<|assistant|>`; with an answer, `answer <eos>` follows and is
    /// the only part marked for the loss.
    pub fn layout(&self, messages: &[ChatMessage], answer: Option<&str>) -> Layout {
        let t = &self.tokenizer;
        let mut ids = vec![t.bos_id()];
        for m in messages {
            ids.push(t.role_id(m.role));
            ids.extend(t.encode(&m.text));
            ids.push(t.eos_id());
        }
        ids.push(t.role_id(Role::Assistant));
        let mut loss = vec![false; ids.len()];
        if let Some(a) = answer {
            let a_ids = t.encode(a);
            loss.extend(std::iter::repeat_n(true, a_ids.len() + 1));
            ids.extend(a_ids);
            ids.push(t.eos_id());
        }
        let mut segments = Vec::new();
        let mut text_loss = Vec::with_capacity(ids.len());
        let mut cur = Vec::new();
        let mut n_ecg = 0;
        for (id, l) in ids.into_iter().zip(loss) {
            if id == t.placeholder_id() {
                cur.push(t.ecg_start_id());
                text_loss.push(false);
                segments.push(Segment::Text(std::mem::take(&mut cur)));
                segments.push(Segment::Ecg(n_ecg));
                n_ecg += 1;
                cur.push(t.ecg_end_id());
                text_loss.push(false);
            } else {
                cur.push(id);
                text_loss.push(l);
            }
        }
        segments.push(Segment::Text(cur));
        Layout { segments, text_loss }
    }

    /// Splices ECG blocks into the text embeddings at their placeholders.
    pub fn assemble(&self, layout: &Layout, blocks: &[Tensor]) -> Result<AssembledPrompt> {
        let n_ecg = layout.segments.iter().filter(|s| matches!(s, Segment::Ecg(_))).count();
        if n_ecg != blocks.len() {
            return Err(Error::PlaceholderMismatch {
                placeholders: n_ecg,
                ecgs: blocks.len(),
            });
        }
        let mut parts = Vec::with_capacity(layout.segments.len());
        let mut ids = Vec::new();
        let mut loss_mask = Vec::new();
        let mut text_at = 0;
        for seg in &layout.segments {
            match seg {
                Segment::Text(t) => {
                    if t.is_empty() {
                        continue;
                    }
                    parts.push(self.lm.embed(t)?);
                    ids.extend(t.iter().map(|&i| Some(i)));
                    loss_mask.extend_from_slice(&layout.text_loss[text_at..text_at + t.len()]);
                    text_at += t.len();
                }
                Segment::Ecg(i) => {
                    let b = &blocks[*i];
                    let m = b.dim(0)?;
                    parts.push(b.clone());
                    ids.extend(std::iter::repeat_n(None, m));
                    loss_mask.extend(std::iter::repeat_n(false, m));
                }
            }
        }
        let embeddings = Tensor::cat(&parts, 0)?;
        Ok(AssembledPrompt {
            embeddings,
            ids,
            loss_mask,
        })
    }

    /// Encodes `ecgs` and assembles them with the transcript. Placeholders
    /// must match the ECG count.
    pub fn assemble_prompt(
        &self,
        ecgs: &[&CanonicalRecord],
        messages: &[ChatMessage],
        answer: Option<&str>,
    ) -> Result<AssembledPrompt> {
        let layout = self.layout(messages, answer);
        let n_ecg = layout.segments.iter().filter(|s| matches!(s, Segment::Ecg(_))).count();
        if n_ecg != ecgs.len() {
            return Err(Error::PlaceholderMismatch {
                placeholders: n_ecg,
                ecgs: ecgs.len(),
            });
        }
        let blocks = self.ecg_blocks(ecgs)?;
        self.assemble(&layout, &blocks)
    }

    /// Mean next-token cross-entropy over answer tokens for a batch.
    pub fn batch_loss(&self, batch: &[TrainExample<'_>]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let all: Vec<&CanonicalRecord> = batch.iter().flat_map(|e| e.ecgs.iter().copied()).collect();
        let mut blocks = self.ecg_blocks(&all)?.into_iter();
        let mut prompts = Vec::with_capacity(batch.len());
        for ex in batch {
            let own: Vec<Tensor> = blocks.by_ref().take(ex.ecgs.len()).collect();
            let layout = self.layout(&ex.prompt, Some(&ex.answer));
            prompts.push(self.assemble(&layout, &own)?);
        }
        self.prompts_loss(&prompts)
    }

    /// Loss over already-assembled sequences (right-padded to a common length).
    pub fn prompts_loss(&self, prompts: &[AssembledPrompt]) -> Result<Tensor> {
        let t_max = prompts.iter().map(AssembledPrompt::len).max().unwrap_or(0);
        if t_max < 2 {
            return Err(Error::Config("sequences too short for next-token loss".into()));
        }
        let d = self.cfg.lm.width;
        let dtype = self.store.dtype();
        let mut rows = Vec::with_capacity(prompts.len());
        let mut targets = Vec::with_capacity(prompts.len() * (t_max - 1));
        let mut mask = Vec::with_capacity(prompts.len() * (t_max - 1));
        for p in prompts {
            let pad = t_max - p.len();
            let e = if pad > 0 {
                let z = Tensor::zeros((pad, d), dtype, self.device())?;
                Tensor::cat(&[&p.embeddings, &z], 0)?
            } else {
                p.embeddings.clone()
            };
            rows.push(e);
            for pos in 1..t_max {
                let (id, m) = match p.ids.get(pos) {
                    Some(Some(id)) if p.loss_mask[pos] => (*id, 1.0f32),
                    _ => (0, 0.0),
                };
                targets.push(id);
                mask.push(m);
            }
        }
        let x = Tensor::stack(&rows, 0)?;
        // only target positions go through the output head
        let h = self.lm.hidden(&x)?.narrow(1, 0, t_max - 1)?;
        let h = h.reshape((prompts.len() * (t_max - 1), d))?;
        let keep: Vec<u32> = (0..mask.len() as u32).filter(|&i| mask[i as usize] > 0.0).collect();
        if keep.is_empty() {
            return Err(Error::Config("loss mask selects no tokens".into()));
        }
        let n = keep.len();
        let targets: Vec<u32> = keep.iter().map(|&i| targets[i as usize]).collect();
        let rows = Tensor::from_vec(keep, n, self.device())?;
        let logits = self.lm.logits(&h.index_select(&rows, 0)?)?;
        let targets = Tensor::from_vec(targets, n, self.device())?;
        let ones = Tensor::ones(n, dtype, self.device())?;
        masked_cross_entropy(&logits, &targets, &ones)
    }

    /// Autoregressive decoding from an assembled prompt. Stops at `<eos>`,
    /// after `max_new` tokens, or when the context is full.
    pub fn generate(&self, prompt: &AssembledPrompt, decoding: Decoding, max_new: usize) -> Result<String> {
        let ids = self.generate_ids(&prompt.embeddings, decoding, max_new)?;
        Ok(self.tokenizer.decode(&ids))
    }

    pub fn generate_ids(&self, prompt: &Tensor, decoding: Decoding, max_new: usize) -> Result<Vec<u32>> {
        let max_ctx = self.cfg.lm.max_context;
        let t0 = prompt.dim(0)?;
        if t0 > max_ctx {
            return Err(Error::ContextOverflow { len: t0, max: max_ctx });
        }
        let mut rng = match decoding {
            Decoding::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let banned = self.tokenizer.non_generable();
        let mut seq = prompt.clone();
        let mut out = Vec::new();
        while out.len() < max_new && seq.dim(0)? < max_ctx {
            let logits = self.lm.forward_embeddings(&seq.unsqueeze(0)?)?;
            let last = logits
                .squeeze(0)?
                .get(seq.dim(0)? - 1)?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            let mut last = last;
            for &b in &banned {
                last[b as usize] = f64::NEG_INFINITY;
            }
            let next = match (decoding, rng.as_mut()) {
                (Decoding::Sampled { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                    sample(&last, temperature, rng)
                }
                _ => argmax(&last),
            };
            if next == self.tokenizer.eos_id() {
                break;
            }
            out.push(next);
            seq = Tensor::cat(&[&seq, &self.lm.embed(&[next])?], 0)?;
        }
        Ok(out)
    }

    /// Encodes, assembles and decodes in one call.
    pub fn reply(
        &self,
        ecgs: &[&CanonicalRecord],
        messages: &[ChatMessage],
        decoding: Decoding,
        max_new: usize,
    ) -> Result<String> {
        let prompt = self.assemble_prompt(ecgs, messages, None)?;
        self.generate(&prompt, decoding, max_new)
    }

    /// Writes every parameter plus config and tokenizer to a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, &HashMap::new())
    }

    pub fn save_with(&self, path: &Path, extra: &HashMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("version".into(), CHECKPOINT_VERSION.into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        meta.insert("tokenizer".into(), serde_json::to_string(&self.tokenizer)?);
        meta.insert("lm_tag".into(), self.cfg.lm_tag.clone());
        crate::checkpoint::save_tensors(path, &self.store.tensors(), meta)
    }

    /// Rebuilds a model from a checkpoint written by [`save`](Self::save).
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = crate::checkpoint::load_tensors(path, &Device::Cpu)?;
        let (cfg, tokenizer) = Self::header(&meta, path)?;
        let model = Self::new(cfg, tokenizer)?;
        let loaded = model.store.assign(&tensors, None)?;
        let expected = model.store.names().count();
        if loaded != expected {
            return Err(Error::Checkpoint(format!(
                "{}: {loaded} of {expected} parameters present",
                path.display()
            )));
        }
        Ok(model)
    }

    /// Loads only the parameters of `groups` from a checkpoint whose config
    /// matches this model's geometry.
    pub fn load_groups(&self, path: &Path, groups: &BTreeSet<ParamGroup>) -> Result<usize> {
        let (_, tensors) = crate::checkpoint::load_tensors(path, self.device())?;
        self.store.assign(&tensors, Some(groups))
    }

    fn header(meta: &HashMap<String, String>, path: &Path) -> Result<(ModelConfig, Tokenizer)> {
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(bad("not a model checkpoint"));
        }
        if meta.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION) {
            return Err(bad("unsupported checkpoint version"));
        }
        let cfg: ModelConfig = serde_json::from_str(meta.get("config").ok_or_else(|| bad("missing config"))?)?;
        let mut tokenizer: Tokenizer =
            serde_json::from_str(meta.get("tokenizer").ok_or_else(|| bad("missing tokenizer"))?)?;
        tokenizer.restore_index();
        Ok((cfg, tokenizer))
    }

    /// Expected sequence length for text and ECGs of the given sample counts.
    pub fn expected_len(&self, text_tokens: usize, ecg_samples: &[usize]) -> usize {
        let per_clip = self.cfg.encoder.patches_per_clip();
        text_tokens
            + ecg_samples
                .iter()
                .map(|&n| {
                    let k = Self::clip_count(n);
                    2 + match self.cfg.ecg_tokens {
                        EcgTokenMode::Both => 1 + per_clip * k,
                        EcgTokenMode::ClsOnly => 1,
                        EcgTokenMode::PatchesOnly => per_clip * k,
                    }
                })
                .sum::<usize>()
    }
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if r < *wi {
            return i as u32;
        }
        r -= wi;
    }
    argmax(logits)
}

/// Rows of `x` whose L2 norm is zero stay zero; others are scaled to unit norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Builds a zero-signal canonical record of `seconds` with the first
/// `leads` slots present; handy for probing shapes.
pub fn blank_record(id: &str, seconds: f64, leads: usize) -> CanonicalRecord {
    let n = (seconds * 100.0).round() as usize;
    let mut mask = [false; NUM_LEADS];
    mask.iter_mut().take(leads).for_each(|m| *m = true);
    CanonicalRecord {
        record_id: id.into(),
        signal: vec![vec![0.0; n]; NUM_LEADS],
        lead_mask: mask,
        annotations: Vec::new(),
        acquired_at: None,
    }
}
