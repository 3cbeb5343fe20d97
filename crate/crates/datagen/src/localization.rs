//! Localization QA: clips around annotated abnormal regions, answered with
//! span text, plus "Not Found" negatives.

use std::collections::{BTreeMap, BTreeSet};

use anyecg_core::records::{Annotation, CanonicalRecord, CANONICAL_FS};
use anyecg_evalkit::spans::{merge, Span, SpanSet, NOT_FOUND};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sample::{EcgRef, QaSample, Split, Subset};
use crate::templates::LOCALIZATION_QUESTIONS;
use crate::{record_rng, DatagenError, Result};

/// Maps annotation label codes to the class names used in questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassTable {
    pub classes: BTreeMap<String, String>,
    /// Codes that mark non-abnormal beats and are never queried.
    pub ignored: BTreeSet<String>,
    /// Unknown codes become classes named by their code instead of an error.
    pub passthrough: bool,
}

impl Default for ClassTable {
    fn default() -> Self {
        Self {
            classes: BTreeMap::from([
                ("V".into(), "Premature ventricular contraction".into()),
                ("L".into(), "Left bundle branch block beat".into()),
                ("R".into(), "Right bundle branch block beat".into()),
            ]),
            ignored: BTreeSet::from(["N".into()]),
            passthrough: false,
        }
    }
}

impl ClassTable {
    /// `None` for ignored codes.
    pub fn class_name(&self, code: &str) -> Result<Option<String>> {
        if self.ignored.contains(code) {
            return Ok(None);
        }
        match self.classes.get(code) {
            Some(name) => Ok(Some(name.clone())),
            None if self.passthrough => Ok(Some(code.to_string())),
            None => Err(DatagenError::UnknownClass(code.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    Short,
    Long,
}

impl ClipMode {
    pub fn default_resample(self) -> usize {
        match self {
            Self::Short => 10,
            Self::Long => 5,
        }
    }

    pub fn subset(self) -> Subset {
        match self {
            Self::Short => Subset::Localization,
            Self::Long => Subset::LocalizationLong,
        }
    }
}

pub const SHORT_CLIP_S: f64 = 10.0;
pub const LONG_MIN_S: f64 = 10.0;
pub const LONG_MAX_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationConfig {
    pub mode: ClipMode,
    pub n_resample: usize,
    pub negatives: bool,
    /// Negatives per positive, per record.
    pub negative_ratio: f64,
    pub seed: u64,
    pub classes: ClassTable,
}

impl LocalizationConfig {
    pub fn new(mode: ClipMode, seed: u64) -> Self {
        Self {
            mode,
            n_resample: mode.default_resample(),
            negatives: true,
            negative_ratio: 0.25,
            seed,
            classes: ClassTable::default(),
        }
    }
}

/// Where a sample's window came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowProvenance {
    pub sample_id: String,
    pub record_id: String,
    /// Source region (recording time) for positives; `None` for negatives.
    pub region: Option<(f64, f64)>,
    pub window: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationOutput {
    pub samples: Vec<QaSample>,
    pub provenance: Vec<WindowProvenance>,
    /// Records shorter than one clip.
    pub skipped_records: usize,
    /// Negatives that found no window free of the queried class.
    pub unplaced_negatives: usize,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Span set for `code` within a clip's (window-local) annotations, rounded
/// to the 0.1 s answer grid.
pub fn class_spans(annotations: &[Annotation], code: &str) -> SpanSet {
    SpanSet::from_spans(
        annotations
            .iter()
            .filter(|a| a.label == code)
            .map(|a| Span::new(round1(a.onset), round1(a.offset))),
    )
}

fn draw_length(mode: ClipMode, duration: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
    match mode {
        ClipMode::Short => (duration + 1e-9 >= SHORT_CLIP_S).then_some(SHORT_CLIP_S),
        ClipMode::Long => {
            let lo = (LONG_MIN_S * 10.0).round() as u32;
            let hi = ((LONG_MAX_S.min(duration) + 1e-9) * 10.0).floor() as u32;
            (hi >= lo).then(|| rng.random_range(lo..=hi) as f64 / 10.0)
        }
    }
}

/// Uniform start on the sample grid within `[lo, hi]`, if any.
fn draw_start(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
    let i_lo = (lo * CANONICAL_FS - 1e-6).ceil().max(0.0) as u64;
    let i_hi = (hi * CANONICAL_FS + 1e-6).floor();
    if i_hi < 0.0 || (i_hi as u64) < i_lo {
        return None;
    }
    Some(rng.random_range(i_lo..=i_hi as u64) as f64 / CANONICAL_FS)
}

fn question(name: &str, rng: &mut ChaCha8Rng) -> String {
    LOCALIZATION_QUESTIONS[rng.random_range(0..LOCALIZATION_QUESTIONS.len())].replace("{abnormal}", name)
}

/// Builds localization samples from canonical records. Records are
/// processed in id order, each with its own generator derived from the seed
/// and the record id.
pub fn build_localization(records: &[CanonicalRecord], cfg: &LocalizationConfig) -> Result<LocalizationOutput> {
    let mut sorted: Vec<&CanonicalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let mut out = LocalizationOutput::default();
    for rec in sorted {
        build_record(rec, cfg, &mut out)?;
    }
    Ok(out)
}

fn build_record(rec: &CanonicalRecord, cfg: &LocalizationConfig, out: &mut LocalizationOutput) -> Result<()> {
    let subset = cfg.mode.subset();
    let duration = rec.duration();
    let mut rng = record_rng(cfg.seed, &rec.record_id);
    if draw_length(ClipMode::Short, duration, &mut rng.clone()).is_none() {
        out.skipped_records += 1;
        return Ok(());
    }

    let mut by_class: BTreeMap<String, (String, Vec<Span>)> = BTreeMap::new();
    for a in &rec.annotations {
        if let Some(name) = cfg.classes.class_name(&a.label)? {
            by_class
                .entry(a.label.clone())
                .or_insert_with(|| (name, Vec::new()))
                .1
                .push(Span::new(a.onset, a.offset));
        }
    }
    let mut counter = 0usize;
    let next_id = |counter: &mut usize| {
        *counter += 1;
        format!("{}/{}/{:05}", subset.name(), rec.record_id, counter)
    };

    let mut n_pos = 0usize;
    for (code, (_, intervals)) in &by_class {
        for region in merge(intervals.clone()) {
            let mid = (region.start + region.end) / 2.0;
            for _ in 0..cfg.n_resample {
                let Some(len) = draw_length(cfg.mode, duration, &mut rng) else { continue };
                let Some(start) = draw_start((mid - len).max(0.0), mid.min(duration - len), &mut rng) else {
                    continue;
                };
                let clip = rec.slice(start, start + len)?;
                let window = (start, start + len);
                // one positive per class present in the clip, the drawn class first
                let mut present: Vec<&String> = by_class.keys().filter(|c| *c != code).collect();
                present.insert(0, code);
                for c in present {
                    let spans = class_spans(&clip.annotations, c);
                    if spans.is_not_found() {
                        continue;
                    }
                    let name = &by_class[c].0;
                    let id = next_id(&mut counter);
                    out.provenance.push(WindowProvenance {
                        sample_id: id.clone(),
                        record_id: rec.record_id.clone(),
                        region: (c == code).then_some((region.start, region.end)),
                        window,
                    });
                    out.samples.push(QaSample {
                        id,
                        subset,
                        split: Split::Train,
                        source: rec.record_id.clone(),
                        question: question(name, &mut rng),
                        answer: spans.render(),
                        ecg_refs: vec![EcgRef {
                            record_id: rec.record_id.clone(),
                            window: Some(window),
                        }],
                        times: None,
                        class: Some(c.clone()),
                    });
                    n_pos += 1;
                }
            }
        }
    }

    if !cfg.negatives {
        return Ok(());
    }
    let mut candidates: Vec<(String, String)> = cfg
        .classes
        .classes
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    for (code, (name, _)) in &by_class {
        if !cfg.classes.classes.contains_key(code) {
            candidates.push((code.clone(), name.clone()));
        }
    }
    let n_neg = (n_pos as f64 * cfg.negative_ratio).round() as usize;
    for _ in 0..n_neg {
        let (code, name) = candidates[rng.random_range(0..candidates.len())].clone();
        let mut placed = false;
        for _attempt in 0..100 {
            let Some(len) = draw_length(cfg.mode, duration, &mut rng) else { break };
            let Some(start) = draw_start(0.0, duration - len, &mut rng) else { break };
            let end = start + len;
            let clash = rec
                .annotations
                .iter()
                .any(|a| a.label == code && a.offset >= start && a.onset <= end);
            if clash {
                continue;
            }
            let id = next_id(&mut counter);
            out.provenance.push(WindowProvenance {
                sample_id: id.clone(),
                record_id: rec.record_id.clone(),
                region: None,
                window: (start, end),
            });
            out.samples.push(QaSample {
                id,
                subset,
                split: Split::Train,
                source: rec.record_id.clone(),
                question: question(&name, &mut rng),
                answer: NOT_FOUND.to_string(),
                ecg_refs: vec![EcgRef {
                    record_id: rec.record_id.clone(),
                    window: Some((start, end)),
                }],
                times: None,
                class: Some(code.clone()),
            });
            placed = true;
            break;
        }
        if !placed {
            out.unplaced_negatives += 1;
        }
    }
    Ok(())
}

/// The clip an [`EcgRef`] points at.
pub fn materialize(r: &EcgRef, rec: &CanonicalRecord) -> Result<CanonicalRecord> {
    match r.window {
        Some((s, e)) => Ok(rec.slice(s, e)?),
        None => Ok(rec.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyecg_core::records::NUM_LEADS;

    fn record(id: &str, seconds: f64, anns: Vec<Annotation>) -> CanonicalRecord {
        let n = (seconds * 100.0) as usize;
        let mut mask = [false; NUM_LEADS];
        mask[1] = true;
        mask[6] = true;
        CanonicalRecord {
            record_id: id.into(),
            signal: vec![vec![0.0; n]; NUM_LEADS],
            lead_mask: mask,
            annotations: anns,
            acquired_at: None,
        }
    }

    #[test]
    fn single_region_inside_clip() {
        let rec = record("a", 10.0, vec![Annotation::new(2.0, 3.7, "V")]);
        let mut cfg = LocalizationConfig::new(ClipMode::Short, 1);
        cfg.negatives = false;
        let out = build_localization(&[rec], &cfg).unwrap();
        assert_eq!(out.samples.len(), 10);
        assert!(out.samples.iter().all(|s| s.answer == "Duration: 2.0s-3.7s"));
        assert!(out.samples[0].question.contains("Premature ventricular contraction"));
    }

    #[test]
    fn three_regions_sorted_and_joined() {
        let rec = record(
            "b",
            15.0,
            vec![
                Annotation::new(14.3, 15.0, "V"),
                Annotation::new(1.9, 3.1, "V"),
                Annotation::new(6.8, 8.1, "V"),
            ],
        );
        let spans = class_spans(&rec.annotations, "V");
        assert_eq!(spans.render(), "Duration: 1.9s-3.1s, 6.8s-8.1s, 14.3s-15.0s");
    }

    #[test]
    fn unknown_class_is_an_error_without_passthrough() {
        let rec = record("c", 20.0, vec![Annotation::new(2.0, 3.0, "A")]);
        let cfg = LocalizationConfig::new(ClipMode::Short, 1);
        assert!(matches!(build_localization(&[rec.clone()], &cfg), Err(DatagenError::UnknownClass(_))));
        let mut cfg = cfg;
        cfg.classes.passthrough = true;
        assert!(!build_localization(&[rec], &cfg).unwrap().samples.is_empty());
    }

    #[test]
    fn negatives_are_not_found() {
        let rec = record("d", 120.0, vec![Annotation::new(50.0, 51.0, "V")]);
        let mut cfg = LocalizationConfig::new(ClipMode::Short, 3);
        cfg.negative_ratio = 1.0;
        let out = build_localization(&[rec], &cfg).unwrap();
        let neg: Vec<_> = out.samples.iter().filter(|s| s.answer == NOT_FOUND).collect();
        assert_eq!(neg.len(), 10);
    }
}
