//! Desk-scale preset: a small model configuration and a synthetic mixed
//! corpus covering all five subsets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyecg_core::encoder::EncoderConfig;
use anyecg_core::fusion::{LmConfig, ModelConfig, Tokenizer};
use anyecg_core::records::{canonicalize, CanonicalRecord};
use anyecg_datagen::fixtures::{arrhythmia_corpus, ecgqa_rows, patient_corpus, report_corpus, template_client};
use anyecg_datagen::{
    build_localization, build_multiecg, build_reportgen, split_by_record, subset_ecgqa, ClipMode, EcgQaConfig,
    LocalizationConfig, MultiEcgConfig, QaSample, ReportGenConfig, Subset,
};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_pretrain, ContrastiveConfig};
use crate::corpus::Corpus;
use crate::pipeline::prepare_base;
use crate::warmup::WarmupConfig;
use crate::Result;

/// A model small enough to train on one CPU core in minutes.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth: 1,
            width: 32,
            heads: 4,
            ..EncoderConfig::desk()
        },
        lm: LmConfig {
            layers: 2,
            width: 64,
            heads: 4,
            ..LmConfig::default()
        },
        seed,
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskSizes {
    pub report_records: usize,
    pub arrhythmia_records: usize,
    pub patients: usize,
    /// Samples kept per subset after building (all when `None`).
    pub max_per_subset: Option<usize>,
    /// Separate cap for long localization clips, which dominate step time.
    pub max_long: Option<usize>,
    pub test_fraction: f64,
}

impl Default for DeskSizes {
    fn default() -> Self {
        Self {
            report_records: 96,
            arrhythmia_records: 20,
            patients: 12,
            max_per_subset: Some(56),
            max_long: Some(32),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeskCorpus {
    pub corpus: Corpus,
    pub tokenizer: Tokenizer,
    /// Canonical 12-lead records with their reports, for contrastive pretraining.
    pub report_pairs: Vec<(CanonicalRecord, String)>,
    /// Training-split questions and answers, for the language-model warm-up.
    pub texts: Vec<String>,
    pub counts: BTreeMap<String, usize>,
}

fn cap(mut samples: Vec<QaSample>, max: Option<usize>, seed: u64) -> Vec<QaSample> {
    if let Some(m) = max.filter(|&m| m < samples.len()) {
        let mut rng = anyecg_datagen::record_rng(seed, "cap");
        let mut keep: Vec<usize> = index::sample(&mut rng, samples.len(), m).into_vec();
        keep.sort_unstable();
        let mut it = keep.into_iter().peekable();
        samples = samples
            .into_iter()
            .enumerate()
            .filter(|(i, _)| it.next_if_eq(i).is_some())
            .map(|(_, s)| s)
            .collect();
    }
    samples
}

/// Builds every subset from the synthetic fixtures, splits by source and
/// fits a tokenizer on the training text.
pub fn desk_corpus(sizes: &DeskSizes, seed: u64) -> Result<DeskCorpus> {
    let reports = report_corpus(sizes.report_records, seed)?;
    let arr = arrhythmia_corpus(sizes.arrhythmia_records, seed)?;
    let (groups, patient_records) = patient_corpus(sizes.patients, seed)?;

    let items: Vec<(String, String)> = reports
        .iter()
        .map(|(r, t)| (r.record_id().to_string(), t.clone()))
        .collect();
    let reportgen = build_reportgen(
        &items,
        &ReportGenConfig {
            seed,
            ..ReportGenConfig::default()
        },
    )
    .samples;

    let canon_arr: Vec<CanonicalRecord> = arr.iter().map(canonicalize).collect();
    let short = build_localization(&canon_arr, &LocalizationConfig::new(ClipMode::Short, seed))?.samples;
    let long = build_localization(&canon_arr, &LocalizationConfig::new(ClipMode::Long, seed))?.samples;

    let client = template_client(&groups)?;
    let multi = build_multiecg(
        &groups,
        &client,
        &MultiEcgConfig {
            seed,
            max_in_flight: 1,
            ..MultiEcgConfig::default()
        },
    )?
    .samples;

    let rows = ecgqa_rows(&reports, 2);
    let ecgqa = subset_ecgqa(
        &rows,
        &EcgQaConfig {
            fraction: 0.5,
            seed,
        },
    )?
    .samples;

    let mut samples = Vec::new();
    let mut counts = BTreeMap::new();
    for (subset, s) in [
        (Subset::Reportgen, reportgen),
        (Subset::Localization, short),
        (Subset::LocalizationLong, long),
        (Subset::Multiecg, multi),
        (Subset::Ecgqa, ecgqa),
    ] {
        let limit = if subset == Subset::LocalizationLong {
            sizes.max_long.or(sizes.max_per_subset)
        } else {
            sizes.max_per_subset
        };
        let mut s = cap(s, limit, seed ^ subset as u64);
        split_by_record(&mut s, sizes.test_fraction, seed);
        counts.insert(subset.name().to_string(), s.len());
        samples.extend(s);
    }

    let texts: Vec<String> = samples
        .iter()
        .filter(|s| s.split == anyecg_datagen::Split::Train)
        .flat_map(|s| [s.question.clone(), s.answer.clone()])
        .collect();
    let tokenizer = Tokenizer::build(texts.iter().map(String::as_str), 1500, 2);

    let report_pairs: Vec<(CanonicalRecord, String)> =
        reports.iter().map(|(r, t)| (canonicalize(r), t.clone())).collect();
    let records = report_pairs
        .iter()
        .map(|(r, _)| r.clone())
        .chain(canon_arr)
        .chain(patient_records.iter().map(canonicalize));
    Ok(DeskCorpus {
        corpus: Corpus::new(samples, records),
        tokenizer,
        report_pairs,
        texts,
        counts,
    })
}

/// Contrastive pretraining on the report pairs followed by the language
/// model warm-up; writes `contrastive.safetensors` and `base.safetensors`
/// into `dir` and returns the base checkpoint path.
pub fn prepare_desk_base(
    desk: &DeskCorpus,
    model_cfg: &ModelConfig,
    contrastive: &ContrastiveConfig,
    warmup: &WarmupConfig,
    dir: &Path,
) -> Result<PathBuf> {
    let (cm, _) = contrastive_pretrain(
        &desk.report_pairs,
        &model_cfg.encoder,
        desk.tokenizer.clone(),
        contrastive,
        model_cfg.precision.dtype(),
    )?;
    let c_path = dir.join("contrastive.safetensors");
    cm.save(&c_path)?;
    let base = dir.join("base.safetensors");
    prepare_base(model_cfg.clone(), desk.tokenizer.clone(), &c_path, &desk.texts, warmup, &base)?;
    Ok(base)
}
