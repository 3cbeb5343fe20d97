//! Macro-averaged ROC-AUC over label score matrices.

use serde::{Deserialize, Serialize};

use crate::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScoreMatrix {
    pub labels: Vec<String>,
    /// `scores[sample][class]`
    pub scores: Vec<Vec<f64>>,
    /// `truth[sample][class]`
    pub truth: Vec<Vec<bool>>,
}

impl LabelScoreMatrix {
    pub fn new(labels: Vec<String>, scores: Vec<Vec<f64>>, truth: Vec<Vec<bool>>) -> Result<Self> {
        if scores.len() != truth.len() {
            return Err(EvalError::Shape(format!(
                "{} score rows vs {} truth rows",
                scores.len(),
                truth.len()
            )));
        }
        for (i, (s, t)) in scores.iter().zip(&truth).enumerate() {
            if s.len() != labels.len() || t.len() != labels.len() {
                return Err(EvalError::Shape(format!(
                    "row {i}: {} scores, {} truth for {} labels",
                    s.len(),
                    t.len(),
                    labels.len()
                )));
            }
            if s.iter().any(|v| v.is_nan()) {
                return Err(EvalError::Shape(format!("row {i} contains NaN")));
            }
        }
        Ok(Self { labels, scores, truth })
    }

    fn column(&self, j: usize) -> (Vec<f64>, Vec<bool>) {
        (
            self.scores.iter().map(|r| r[j]).collect(),
            self.truth.iter().map(|r| r[j]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    /// Per-class AUC; `None` for skipped classes.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<String>,
}

/// ROC-AUC of one class via the Mann-Whitney rank statistic with average
/// ranks for ties. `None` unless there is at least one positive and one
/// negative.
pub fn class_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block i..=j shares the mean rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

pub fn macro_auc(m: &LabelScoreMatrix) -> Result<AucReport> {
    let mut per_class = Vec::with_capacity(m.labels.len());
    let mut skipped = Vec::new();
    for (j, label) in m.labels.iter().enumerate() {
        let (s, t) = m.column(j);
        let auc = class_auc(&s, &t);
        if auc.is_none() {
            skipped.push(label.clone());
        }
        per_class.push(auc);
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(EvalError::NoValidClass);
    }
    Ok(AucReport {
        macro_auc: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant() {
        assert_eq!(class_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(class_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(class_auc(&[0.5; 3], &[true; 3]), None);
    }

    #[test]
    fn skips_degenerate_classes() {
        let m = LabelScoreMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.9, 0.1], vec![0.1, 0.2]],
            vec![vec![true, false], vec![false, false]],
        )
        .unwrap();
        let r = macro_auc(&m).unwrap();
        assert_eq!(r.macro_auc, 1.0);
        assert_eq!(r.skipped, vec!["b".to_string()]);
    }

    #[test]
    fn no_valid_class_is_an_error() {
        let m = LabelScoreMatrix::new(vec!["a".into()], vec![vec![0.1]], vec![vec![true]]).unwrap();
        assert!(matches!(macro_auc(&m), Err(EvalError::NoValidClass)));
    }
}
