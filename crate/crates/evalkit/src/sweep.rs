//! Single-lead masking sweep for localization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use anyecg_core::records::CanonicalRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::iou::{mean, score_answer};
use crate::spans::{parse_spans, SpanSet};
use crate::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    None,
    MaskFirst,
    MaskSecond,
    MaskRandom,
}

impl MaskMode {
    pub fn all() -> [MaskMode; 4] {
        [Self::None, Self::MaskFirst, Self::MaskSecond, Self::MaskRandom]
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::MaskFirst => "mask-first",
            Self::MaskSecond => "mask-second",
            Self::MaskRandom => "mask-random",
        }
    }
}

impl FromStr for MaskMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "mask-none" => Ok(Self::None),
            "first" | "mask-first" => Ok(Self::MaskFirst),
            "second" | "mask-second" => Ok(Self::MaskSecond),
            "random" | "mask-random" => Ok(Self::MaskRandom),
            other => Err(EvalError::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepItem {
    pub dataset: String,
    pub record: CanonicalRecord,
    pub question: String,
    pub truth: SpanSet,
}

/// Produces an answer for ECGs plus a question; wraps the model (or a stub).
pub trait Responder {
    fn respond(&self, ecgs: &[&CanonicalRecord], question: &str) -> Result<String>;
}

impl<F> Responder for F
where
    F: Fn(&[&CanonicalRecord], &str) -> Result<String>,
{
    fn respond(&self, ecgs: &[&CanonicalRecord], question: &str) -> Result<String> {
        self(ecgs, question)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub dataset: String,
    pub mode: MaskMode,
    pub record_id: String,
    /// Lead zeroed for this sample, if any.
    pub masked_lead: Option<String>,
    pub answer: String,
    pub truth: String,
    pub iou: f64,
    pub parse_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub mode: MaskMode,
    pub n: usize,
    pub mean_iou: f64,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub samples: Vec<SweepSample>,
}

/// Present-lead order is canonical slot order; "first" and "second" refer to
/// the first two present leads. `MaskRandom` draws one present lead per item
/// from a generator seeded with `seed`.
pub fn masking_sweep<R: Responder + ?Sized>(
    items: &[SweepItem],
    responder: &R,
    modes: &[MaskMode],
    seed: u64,
) -> Result<SweepOutcome> {
    let mut samples = Vec::new();
    for &mode in modes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for item in items {
            let present = item.record.present_leads();
            let drop = match mode {
                MaskMode::None => None,
                MaskMode::MaskFirst => Some(0),
                MaskMode::MaskSecond => Some(1),
                MaskMode::MaskRandom => Some(rng.random_range(0..present.len().max(1))),
            };
            let (record, masked_lead) = match drop {
                None => (item.record.clone(), None),
                Some(i) => {
                    let victim = present.get(i).ok_or_else(|| {
                        EvalError::Config(format!(
                            "{} has {} present lead(s); cannot apply {}",
                            item.record.record_id,
                            present.len(),
                            mode.label()
                        ))
                    })?;
                    let keep: Vec<&str> = present.iter().filter(|l| *l != victim).map(|l| l.name()).collect();
                    (item.record.mask_leads(&keep)?, Some(victim.name().to_string()))
                }
            };
            let answer = responder.respond(&[&record], &item.question)?;
            let parsed = parse_spans(&answer);
            samples.push(SweepSample {
                dataset: item.dataset.clone(),
                mode,
                record_id: item.record.record_id.clone(),
                masked_lead,
                iou: score_answer(&parsed, &item.truth),
                parse_failure: parsed.is_failure(),
                answer,
                truth: item.truth.render(),
            });
        }
    }
    Ok(SweepOutcome {
        rows: aggregate(&samples),
        samples,
    })
}

fn aggregate(samples: &[SweepSample]) -> Vec<SweepRow> {
    let mut groups: BTreeMap<(String, MaskMode), Vec<&SweepSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.dataset.clone(), s.mode)).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|((dataset, mode), g)| SweepRow {
            dataset,
            mode,
            n: g.len(),
            mean_iou: mean(&g.iter().map(|s| s.iou).collect::<Vec<_>>()),
            parse_failures: g.iter().filter(|s| s.parse_failure).count(),
        })
        .collect()
}

/// Datasets as rows, mask modes as columns, mean IoU in each cell.
pub fn render_table(rows: &[SweepRow]) -> String {
    let mut modes: Vec<MaskMode> = rows.iter().map(|r| r.mode).collect();
    modes.sort();
    modes.dedup();
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort();
    datasets.dedup();
    let w = datasets.iter().map(|d| d.len()).max().unwrap_or(0).max(16);
    let mut out = format!("{:<w$}", "dataset");
    for m in &modes {
        let _ = write!(out, " {:>12}", m.label());
    }
    out.push('\n');
    for d in datasets {
        let _ = write!(out, "{d:<w$}");
        for m in &modes {
            match rows.iter().find(|r| r.dataset == d && r.mode == *m) {
                Some(r) => {
                    let _ = write!(out, " {:>12.4}", r.mean_iou);
                }
                None => {
                    let _ = write!(out, " {:>12}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
