//! Subsetting of an existing ECG question-answering corpus.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::sample::{EcgRef, QaSample, Split, Subset};
use crate::templates::ECGQA_SUFFIX;
use crate::{DatagenError, Result};

/// One source row. `answer` may be a string or a list of strings and
/// `ecg_id` a single id or a list; ids may be numbers or strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgQaRow {
    pub question: String,
    pub answer: Value,
    #[serde(alias = "ecg_ids")]
    pub ecg_id: Value,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcgQaConfig {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for EcgQaConfig {
    fn default() -> Self {
        Self {
            fraction: 0.10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EcgQaOutput {
    pub samples: Vec<QaSample>,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Reads a JSON array of rows or one row per line.
pub fn read_ecgqa(path: &Path) -> Result<Vec<EcgQaRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| DatagenError::io(path, e))?;
    if text.trim_start().starts_with('[') {
        let rows: Vec<Value> = serde_json::from_str(&text).map_err(|e| DatagenError::Malformed {
            line: e.line(),
            reason: e.to_string(),
        })?;
        return rows
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                serde_json::from_value(v).map_err(|e| DatagenError::Malformed {
                    line: i + 1,
                    reason: format!("row {}: {e}", i + 1),
                })
            })
            .collect();
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatagenError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn strings(v: &Value, what: &str, row: usize) -> Result<Vec<String>> {
    let bad = || DatagenError::Malformed {
        line: row + 1,
        reason: format!("{what} must be a string, a number or a list of them"),
    };
    let out = match v {
        Value::Array(items) => items.iter().map(scalar).collect::<Option<Vec<_>>>().ok_or_else(bad)?,
        other => vec![scalar(other).ok_or_else(bad)?],
    };
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Appends the brevity suffix unless the question already ends with it.
pub fn with_suffix(question: &str) -> String {
    let q = question.trim_end();
    if q.ends_with(ECGQA_SUFFIX.trim()) {
        q.to_string()
    } else {
        format!("{q}{ECGQA_SUFFIX}")
    }
}

/// Keeps `round(fraction * n_train)` uniformly chosen train rows (in source
/// order) with the suffix appended; test rows pass through unchanged.
pub fn subset_ecgqa(rows: &[EcgQaRow], cfg: &EcgQaConfig) -> Result<EcgQaOutput> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return Err(DatagenError::Config(format!("fraction {} outside [0, 1]", cfg.fraction)));
    }
    let train: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].split == Split::Train).collect();
    let k = (cfg.fraction * train.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut keep: Vec<usize> = index::sample(&mut rng, train.len(), k)
        .into_iter()
        .map(|j| train[j])
        .collect();
    keep.sort_unstable();
    let mut keep = keep.into_iter().peekable();

    let mut out = EcgQaOutput::default();
    for (i, row) in rows.iter().enumerate() {
        let selected = match row.split {
            Split::Test => true,
            Split::Train => keep.next_if_eq(&i).is_some(),
        };
        let answers = strings(&row.answer, "answer", i)?;
        let ids = strings(&row.ecg_id, "ecg_id", i)?;
        if !selected {
            continue;
        }
        let question = match row.split {
            Split::Train => {
                out.train_rows += 1;
                with_suffix(&row.question)
            }
            Split::Test => {
                out.test_rows += 1;
                row.question.clone()
            }
        };
        out.samples.push(QaSample {
            id: format!("ecgqa/{}", i + 1),
            subset: Subset::Ecgqa,
            split: row.split,
            source: ids.join("+"),
            question,
            answer: answers.join(", "),
            ecg_refs: ids.into_iter().map(EcgRef::whole).collect(),
            times: None,
            class: None,
        });
    }
    Ok(out)
}
