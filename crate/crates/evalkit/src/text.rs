//! Exact-match scoring and report-to-label cosine scores.

use std::collections::{BTreeSet, HashMap};

use crate::{EvalError, Result};

/// Trims, collapses internal whitespace and lowercases.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn tag_set(s: &str) -> BTreeSet<String> {
    s.split(',').map(normalize).filter(|t| !t.is_empty()).collect()
}

/// Normalized equality; comma-separated multi-tag answers compare as sets.
pub fn exact_match(pred: &str, truth: &str) -> bool {
    let (p, t) = (normalize(pred), normalize(truth));
    if p == t {
        return true;
    }
    (p.contains(',') || t.contains(',')) && tag_set(&p) == tag_set(&t)
}

/// Text embedding provider for report-to-label scoring.
pub trait Embedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity between the report embedding and each label embedding.
pub fn report_to_scores<E: Embedder + ?Sized>(report: &str, labels: &[String], embedder: &E) -> Result<Vec<f64>> {
    let mut texts: Vec<&str> = vec![report];
    texts.extend(labels.iter().map(String::as_str));
    let vecs = embedder.embed(&texts)?;
    if vecs.len() != texts.len() {
        return Err(EvalError::Embedder(format!(
            "{} vectors for {} texts",
            vecs.len(),
            texts.len()
        )));
    }
    Ok(vecs[1..].iter().map(|v| cosine(&vecs[0], v)).collect())
}

/// Local bag-of-words embedder: hashed word unigrams and bigrams,
/// lowercased, into a fixed number of buckets.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        if self.dim == 0 {
            return Err(EvalError::Embedder("embedding dimension is zero".into()));
        }
        Ok(texts
            .iter()
            .map(|t| {
                let words: Vec<String> = t
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                    .map(str::to_lowercase)
                    .collect();
                let mut v = vec![0.0f32; self.dim];
                for w in &words {
                    v[(fnv1a(w) % self.dim as u64) as usize] += 1.0;
                }
                for pair in words.windows(2) {
                    v[(fnv1a(&format!("{} {}", pair[0], pair[1])) % self.dim as u64) as usize] += 0.5;
                }
                v
            })
            .collect())
    }
}

/// Fixed text-to-vector table; unknown texts are an error.
#[derive(Debug, Clone, Default)]
pub struct FixtureEmbedder {
    pub table: HashMap<String, Vec<f32>>,
}

impl FixtureEmbedder {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Self {
        Self {
            table: entries.into_iter().collect(),
        }
    }
}

impl Embedder for FixtureEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| EvalError::Embedder(format!("no fixture vector for `{t}`")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_rules() {
        assert!(exact_match("sinus rhythm", "Sinus Rhythm "));
        assert!(!exact_match("yes", "no"));
        assert!(exact_match("atrial fibrillation, PVC", "PVC, atrial fibrillation"));
        assert!(!exact_match("atrial fibrillation, PVC", "PVC"));
        assert!(exact_match("a  b\tc", " A B C"));
    }

    #[test]
    fn identical_text_scores_one() {
        let labels = vec!["Sinus rhythm".to_string(), "left bundle branch block".to_string()];
        let s = report_to_scores("Sinus rhythm", &labels, &HashingEmbedder::default()).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] < 1.0);
    }

    #[test]
    fn fixture_embedder_hand_computed() {
        let e = FixtureEmbedder::new([
            ("r".to_string(), vec![1.0, 1.0, 0.0]),
            ("a".to_string(), vec![1.0, 0.0, 0.0]),
            ("b".to_string(), vec![0.0, 0.0, 2.0]),
        ]);
        let s = report_to_scores("r", &["a".into(), "b".into()], &e).unwrap();
        assert!((s[0] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert!(report_to_scores("zzz", &["a".into()], &e).is_err());
    }
}
