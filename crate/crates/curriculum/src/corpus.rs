//! QA samples together with the canonical records they reference.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use anyecg_core::fusion::{with_placeholders, ChatMessage};
use anyecg_core::records::CanonicalRecord;
use anyecg_datagen::{materialize, QaSample, Split, Subset};

use crate::{Result, TrainError};

/// An example with its clips materialized.
#[derive(Debug, Clone)]
pub struct OwnedExample {
    pub ecgs: Vec<CanonicalRecord>,
    pub prompt: Vec<ChatMessage>,
    pub answer: String,
    pub subset: Subset,
}

impl OwnedExample {
    pub fn as_train(&self) -> anyecg_core::fusion::TrainExample<'_> {
        anyecg_core::fusion::TrainExample {
            ecgs: self.ecgs.iter().collect(),
            prompt: self.prompt.clone(),
            answer: self.answer.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub samples: Vec<QaSample>,
    pub records: HashMap<String, CanonicalRecord>,
}

impl Corpus {
    pub fn new(samples: Vec<QaSample>, records: impl IntoIterator<Item = CanonicalRecord>) -> Self {
        Self {
            samples,
            records: records.into_iter().map(|r| (r.record_id.clone(), r)).collect(),
        }
    }

    /// Checks that every referenced record is present.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            for r in &s.ecg_refs {
                if !self.records.contains_key(&r.record_id) {
                    return Err(TrainError::MissingRecord(r.record_id.clone()));
                }
            }
        }
        Ok(())
    }

    /// Sample indices per subset for the given split, subsets in order.
    pub fn streams(&self, tasks: &BTreeSet<Subset>, split: Split) -> BTreeMap<Subset, Vec<usize>> {
        let mut out: BTreeMap<Subset, Vec<usize>> = tasks.iter().map(|t| (*t, Vec::new())).collect();
        for (i, s) in self.samples.iter().enumerate() {
            if s.split == split {
                if let Some(v) = out.get_mut(&s.subset) {
                    v.push(i);
                }
            }
        }
        out
    }

    pub fn example(&self, index: usize) -> Result<OwnedExample> {
        let s = &self.samples[index];
        let mut ecgs = Vec::with_capacity(s.ecg_refs.len());
        for r in &s.ecg_refs {
            let rec = self
                .records
                .get(&r.record_id)
                .ok_or_else(|| TrainError::MissingRecord(r.record_id.clone()))?;
            ecgs.push(materialize(r, rec)?);
        }
        Ok(OwnedExample {
            prompt: vec![ChatMessage::user(with_placeholders(&s.question, ecgs.len()))],
            ecgs,
            answer: s.answer.clone(),
            subset: s.subset,
        })
    }

    pub fn examples(&self, indices: &[usize]) -> Result<Vec<OwnedExample>> {
        indices.iter().map(|&i| self.example(i)).collect()
    }
}
