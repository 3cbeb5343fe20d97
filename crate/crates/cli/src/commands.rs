//! Implementations behind `build`, `pretrain`, `train` and `eval`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyecg_core::fusion::{EcgChatModel, Tokenizer};
use anyecg_core::nn::ParamGroup;
use anyecg_core::records::{canonicalize, CanonicalRecord};
use anyecg_curriculum::{contrastive_pretrain, prepare_base, run_stage, TrainError};
use anyecg_datagen::fixtures::template_client;
use anyecg_datagen::{
    build_localization, build_multiecg, build_reportgen, read_ecgqa, split_by_record, subset_ecgqa, write_jsonl,
    ClipMode, EcgQaConfig, LocalizationConfig, MultiEcgConfig, QaSample, ReportGenConfig, Split, Subset,
};
use anyecg_llm::{ChatClient, HttpChatClient};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::AppConfig;
use crate::data::{load_corpus, load_records, load_samples, read_patients, read_reports, report_map, training_texts, Inputs};
use crate::eval::{eval_ecgqa, eval_localization, eval_multiecg, eval_reportgen, ModelResponder, Protocol};
use crate::{CliError, Result, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildTarget {
    Reportgen,
    Localization(ClipMode),
    Multiecg,
    Ecgqa,
    All,
}

/// Source of multi-ECG QA generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Generator {
    /// Offline replies composed from the reports themselves.
    #[default]
    Template,
    /// The `[generator]` chat-completion endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub subset: String,
    pub path: PathBuf,
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub test_sources: usize,
    /// Builder-specific counters.
    pub details: BTreeMap<String, usize>,
}

fn finish(run: &RunDir, subset: Subset, mut samples: Vec<QaSample>, cfg: &AppConfig, split: bool) -> Result<BuildSummary> {
    let test_sources = if split {
        split_by_record(&mut samples, cfg.data.test_fraction, cfg.seed).test_sources.len()
    } else {
        samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| s.source.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    };
    for s in &samples {
        s.validate()?;
    }
    let path = run.dataset(subset.name());
    write_jsonl(&path, &samples)?;
    let test = samples.iter().filter(|s| s.split == Split::Test).count();
    Ok(BuildSummary {
        subset: subset.name().into(),
        path,
        samples: samples.len(),
        train: samples.len() - test,
        test,
        test_sources,
        details: BTreeMap::new(),
    })
}

fn build_one(
    cfg: &AppConfig,
    run: &RunDir,
    inputs: &Inputs,
    target: BuildTarget,
    generator: Generator,
    records: &mut Option<Vec<CanonicalRecord>>,
) -> Result<BuildSummary> {
    let seed = cfg.seed;
    match target {
        BuildTarget::Reportgen => {
            let out = build_reportgen(
                &read_reports(&inputs.reports)?,
                &ReportGenConfig {
                    seed,
                    ..ReportGenConfig::default()
                },
            );
            let mut s = finish(run, Subset::Reportgen, out.samples, cfg, true)?;
            s.details.insert("dropped_empty".into(), out.dropped_empty);
            s.details.insert("dropped_short".into(), out.dropped_short);
            s.details.insert("dropped_uninformative".into(), out.dropped_uninformative);
            Ok(s)
        }
        BuildTarget::Localization(mode) => {
            if records.is_none() {
                *records = Some(load_records(&inputs.records)?.iter().map(canonicalize).collect());
            }
            let recs = records.as_deref().expect("loaded above");
            let mut lc = LocalizationConfig::new(mode, seed);
            lc.negative_ratio = cfg.data.negative_ratio;
            let out = build_localization(recs, &lc)?;
            let mut s = finish(run, mode.subset(), out.samples, cfg, true)?;
            s.details.insert("skipped_records".into(), out.skipped_records);
            s.details.insert("unplaced_negatives".into(), out.unplaced_negatives);
            Ok(s)
        }
        BuildTarget::Multiecg => {
            let groups = read_patients(&inputs.patients)?;
            let client: Box<dyn ChatClient> = match generator {
                Generator::Template => Box::new(template_client(&groups)?),
                Generator::Http => Box::new(HttpChatClient::new(cfg.generator.clone())?),
            };
            let out = build_multiecg(
                &groups,
                &client,
                &MultiEcgConfig {
                    seed,
                    pairs_per_patient: cfg.data.pairs_per_patient,
                    max_in_flight: cfg.generator.max_in_flight,
                    ..MultiEcgConfig::default()
                },
            )?;
            let mut s = finish(run, Subset::Multiecg, out.samples, cfg, true)?;
            s.details.insert("skipped_lines".into(), out.skipped_lines);
            s.details.insert("retried_patients".into(), out.retried_patients);
            s.details.insert("patients_without_pairs".into(), out.patients_without_pairs.len());
            Ok(s)
        }
        BuildTarget::Ecgqa => {
            let rows = read_ecgqa(&inputs.ecgqa)?;
            let out = subset_ecgqa(
                &rows,
                &EcgQaConfig {
                    fraction: cfg.data.ecgqa_fraction,
                    seed,
                },
            )?;
            // rows without a source split get one by record
            let has_test = out.test_rows > 0;
            let mut s = finish(run, Subset::Ecgqa, out.samples, cfg, !has_test)?;
            s.details.insert("source_rows".into(), rows.len());
            s.details.insert("train_rows".into(), out.train_rows);
            s.details.insert("test_rows".into(), out.test_rows);
            Ok(s)
        }
        BuildTarget::All => unreachable!("expanded by build"),
    }
}

/// Builds one subset, or with `All` every subset whose raw input exists.
pub fn build(
    cfg: &AppConfig,
    run: &RunDir,
    inputs: &Inputs,
    target: BuildTarget,
    generator: Generator,
) -> Result<Vec<BuildSummary>> {
    let mut records = None;
    let targets = match target {
        BuildTarget::All => {
            let mut t = Vec::new();
            if inputs.reports.exists() {
                t.push(BuildTarget::Reportgen);
            }
            if inputs.records.exists() {
                t.push(BuildTarget::Localization(ClipMode::Short));
                t.push(BuildTarget::Localization(ClipMode::Long));
            }
            if inputs.patients.exists() {
                t.push(BuildTarget::Multiecg);
            }
            if inputs.ecgqa.exists() {
                t.push(BuildTarget::Ecgqa);
            }
            if t.is_empty() {
                return Err(CliError::MissingInput(format!(
                    "no raw inputs found (looked for {}, {}, {}, {})",
                    inputs.reports.display(),
                    inputs.records.display(),
                    inputs.patients.display(),
                    inputs.ecgqa.display()
                )));
            }
            t
        }
        t => vec![t],
    };
    let mut out = Vec::new();
    for t in targets {
        let s = build_one(cfg, run, inputs, t, generator, &mut records)?;
        info!(subset = %s.subset, samples = s.samples, test = s.test, "dataset written");
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub pairs: usize,
    pub vocab: usize,
    pub contrastive_steps: usize,
    pub contrastive_first_loss: Option<f64>,
    pub contrastive_last_loss: Option<f64>,
    pub warmup_first_loss: Option<f64>,
    pub warmup_last_loss: Option<f64>,
    pub contrastive: PathBuf,
    pub base: PathBuf,
}

/// Fits the tokenizer, pretrains the encoder contrastively on training
/// report pairs, then writes the warmed-up base checkpoint.
pub fn pretrain(cfg: &AppConfig, run: &RunDir, inputs: &Inputs) -> Result<PretrainSummary> {
    let samples = load_samples(run)?;
    let texts = training_texts(&samples);
    let tokenizer = Tokenizer::build(texts.iter().map(String::as_str), cfg.tokenizer.max_pieces, cfg.tokenizer.min_count);
    let records: HashMap<String, CanonicalRecord> = load_records(&inputs.records)?
        .iter()
        .map(|r| (r.record_id().to_string(), canonicalize(r)))
        .collect();
    let mut pairs = Vec::new();
    for s in samples
        .iter()
        .filter(|s| s.subset == Subset::Reportgen && s.split == Split::Train)
    {
        let id = &s.ecg_refs[0].record_id;
        let rec = records
            .get(id)
            .ok_or_else(|| TrainError::MissingRecord(id.clone()))?;
        let report = s.answer.strip_prefix("Report: ").unwrap_or(&s.answer).to_string();
        pairs.push((rec.clone(), report));
    }
    let (cm, closses) = contrastive_pretrain(
        &pairs,
        &cfg.model.encoder,
        tokenizer.clone(),
        &cfg.contrastive,
        cfg.model.precision.dtype(),
    )?;
    let c_path = run.checkpoint("contrastive");
    if let Some(parent) = c_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    cm.save(&c_path)?;
    let base = run.checkpoint("base");
    let vocab = tokenizer.vocab_size();
    let (_, wlosses) = prepare_base(cfg.model.clone(), tokenizer, &c_path, &texts, &cfg.warmup, &base)?;
    Ok(PretrainSummary {
        pairs: pairs.len(),
        vocab,
        contrastive_steps: closses.len(),
        contrastive_first_loss: closses.first().copied(),
        contrastive_last_loss: closses.last().copied(),
        warmup_first_loss: wlosses.first().copied(),
        warmup_last_loss: wlosses.last().copied(),
        contrastive: c_path,
        base,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: u8,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub changed_groups: BTreeSet<ParamGroup>,
    pub frozen_violations: Vec<String>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// The checkpoint a stage starts from unless one is given.
pub fn default_init(run: &RunDir, stage: u8) -> PathBuf {
    if stage == 1 {
        run.checkpoint("base")
    } else {
        run.checkpoint(&format!("stage{}", stage - 1))
    }
}

fn check_prerequisite(run: &RunDir, stage: u8, init: &Path) -> Result<()> {
    if init.exists() {
        return Ok(());
    }
    let msg = if stage == 1 {
        let contrastive = run.checkpoint("contrastive");
        if contrastive.exists() {
            format!("base checkpoint {} does not exist; run `anyecg pretrain` first", init.display())
        } else {
            format!(
                "contrastive encoder checkpoint {} does not exist; run `anyecg pretrain` first",
                contrastive.display()
            )
        }
    } else {
        format!(
            "stage {} checkpoint {} does not exist; run `anyecg train --stage {}` first",
            stage - 1,
            init.display(),
            stage - 1
        )
    };
    Err(TrainError::MissingPrerequisite(msg).into())
}

pub fn train(cfg: &AppConfig, run: &RunDir, inputs: &Inputs, stage: u8, init: Option<PathBuf>) -> Result<TrainSummary> {
    if !(1..=3).contains(&stage) {
        return Err(CliError::Usage(format!("stage must be 1, 2 or 3, got {stage}")));
    }
    let init = init.unwrap_or_else(|| default_init(run, stage));
    check_prerequisite(run, stage, &init)?;
    let corpus = load_corpus(run, inputs)?;
    let spec = cfg.stage_spec(stage);
    let out = run.checkpoint(&format!("stage{stage}"));
    let metrics = run.metrics(stage);
    let (_, report) = run_stage(&spec, &corpus, &init, &out, Some(&metrics))?;
    Ok(TrainSummary {
        stage,
        steps: report.steps.len(),
        first_loss: report.steps.first().map(|s| s.loss),
        last_loss: report.steps.last().map(|s| s.loss),
        heldout_before: report.heldout_before,
        heldout_after: report.heldout_after,
        changed_groups: report.changed_groups,
        frozen_violations: report.frozen_violations,
        checkpoint: out,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub protocol: String,
    pub aggregate: BTreeMap<String, f64>,
    pub text: PathBuf,
    pub jsonl: PathBuf,
    /// Masking table for the localization protocol.
    pub table: Option<String>,
}

pub struct EvalOptions<'a> {
    pub checkpoint: PathBuf,
    pub masks: Vec<anyecg_evalkit::MaskMode>,
    /// Overrides the `[judge]` endpoint, e.g. with a recording client.
    pub judge: Option<&'a dyn ChatClient>,
}

pub fn eval(cfg: &AppConfig, run: &RunDir, inputs: &Inputs, protocol: Protocol, opts: &EvalOptions<'_>) -> Result<EvalSummary> {
    if !opts.checkpoint.exists() {
        return Err(TrainError::MissingPrerequisite(format!(
            "checkpoint {} does not exist",
            opts.checkpoint.display()
        ))
        .into());
    }
    let model = EcgChatModel::load(&opts.checkpoint)?;
    let corpus = load_corpus(run, inputs)?;
    let responder = ModelResponder {
        model: &model,
        max_new_tokens: cfg.eval.max_new_tokens,
    };
    let limit = cfg.eval.max_samples;
    let (report, table) = match protocol {
        Protocol::Localization => {
            let (r, t) = eval_localization(&responder, &corpus, &opts.masks, cfg.seed, limit)?;
            (r, Some(t))
        }
        Protocol::Reportgen => (eval_reportgen(&responder, &corpus, cfg.eval.embed_dim, limit)?, None),
        Protocol::Ecgqa => (eval_ecgqa(&responder, &corpus, limit)?, None),
        Protocol::Multiecg => {
            let reports = report_map(inputs)?;
            let r = match opts.judge {
                Some(j) => eval_multiecg(&responder, &corpus, &reports, j, cfg.eval.judge_in_flight, limit)?,
                None => {
                    let j = HttpChatClient::new(cfg.judge.clone())?;
                    eval_multiecg(&responder, &corpus, &reports, &j, cfg.eval.judge_in_flight, limit)?
                }
            };
            (r, None)
        }
    };
    let dir = run.eval();
    let text_path = dir.join(format!("{}.txt", report.protocol));
    let jsonl_path = dir.join(format!("{}.jsonl", report.protocol));
    let mut text = report.to_text();
    if let Some(t) = &table {
        text.push('\n');
        text.push_str(t);
    }
    crate::data::write_file(&text_path, text.as_bytes())?;
    crate::data::write_file(&jsonl_path, report.to_jsonl().as_bytes())?;
    Ok(EvalSummary {
        protocol: report.protocol.clone(),
        aggregate: report.aggregate.clone(),
        text: text_path,
        jsonl: jsonl_path,
        table,
    })
}
