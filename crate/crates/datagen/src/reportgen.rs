//! Report-generation QA: one sample per record with a usable report.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sample::{EcgRef, QaSample, Split, Subset};
use crate::templates::REPORTGEN_QUESTIONS;
use crate::record_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportGenConfig {
    pub seed: u64,
    /// Reports containing one of these (case-insensitive) are dropped.
    pub stop_phrases: Vec<String>,
    pub min_words: usize,
}

impl Default for ReportGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stop_phrases: vec!["no report".into(), "see above".into(), "test only".into()],
            min_words: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportGenOutput {
    pub samples: Vec<QaSample>,
    pub dropped_empty: usize,
    pub dropped_short: usize,
    pub dropped_uninformative: usize,
}

pub fn clean_report(report: &str) -> String {
    report.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `items` are `(record_id, report)` pairs. Output is ordered by record id.
pub fn build_reportgen(items: &[(String, String)], cfg: &ReportGenConfig) -> ReportGenOutput {
    let mut sorted: Vec<&(String, String)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = ReportGenOutput::default();
    for (record_id, report) in sorted {
        let cleaned = clean_report(report);
        if cleaned.is_empty() {
            out.dropped_empty += 1;
            continue;
        }
        if cleaned.split_whitespace().count() < cfg.min_words {
            out.dropped_short += 1;
            continue;
        }
        let lower = cleaned.to_lowercase();
        if cfg.stop_phrases.iter().any(|p| lower.contains(&p.to_lowercase())) {
            out.dropped_uninformative += 1;
            continue;
        }
        let mut rng = record_rng(cfg.seed, record_id);
        let q = REPORTGEN_QUESTIONS[rng.random_range(0..REPORTGEN_QUESTIONS.len())];
        out.samples.push(QaSample {
            id: format!("reportgen/{record_id}"),
            subset: Subset::Reportgen,
            split: Split::Train,
            source: record_id.clone(),
            question: q.to_string(),
            answer: format!("Report: {cleaned}"),
            ecg_refs: vec![EcgRef::whole(record_id.clone())],
            times: None,
            class: None,
        });
    }
    out
}
