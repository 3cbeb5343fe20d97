//! Record-level train/test assignment.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sample::{QaSample, Split};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_sources: Vec<String>,
    pub test_sources: Vec<String>,
}

/// Tags every sample by its source recording. `round(fraction * sources)`
/// sources go to test, chosen by a seeded shuffle of the sorted source ids.
pub fn split_by_record(samples: &mut [QaSample], test_fraction: f64, seed: u64) -> SplitSummary {
    let sources: BTreeSet<&str> = samples.iter().map(|s| s.source.as_str()).collect();
    let mut order: Vec<String> = sources.into_iter().map(str::to_string).collect();
    let n_test = ((test_fraction.clamp(0.0, 1.0) * order.len() as f64).round() as usize).min(order.len());
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_sources = order.split_off(order.len() - n_test);
    let mut train_sources = order;
    test_sources.sort();
    train_sources.sort();
    let tag: BTreeMap<&str, Split> = test_sources
        .iter()
        .map(|s| (s.as_str(), Split::Test))
        .chain(train_sources.iter().map(|s| (s.as_str(), Split::Train)))
        .collect();
    for s in samples.iter_mut() {
        s.split = tag[s.source.as_str()];
    }
    SplitSummary {
        train_sources,
        test_sources,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{EcgRef, Subset};

    fn samples(n_records: usize, per: usize) -> Vec<QaSample> {
        (0..n_records * per)
            .map(|i| QaSample {
                id: format!("s{i}"),
                subset: Subset::Localization,
                split: Split::Train,
                source: format!("rec{}", i % n_records),
                question: "q".into(),
                answer: "Not Found".into(),
                ecg_refs: vec![EcgRef::whole(format!("rec{}", i % n_records))],
                times: None,
                class: None,
            })
            .collect()
    }

    #[test]
    fn two_of_ten_records() {
        let mut s = samples(10, 3);
        let summary = split_by_record(&mut s, 0.2, 7);
        assert_eq!(summary.test_sources.len(), 2);
        assert_eq!(s.iter().filter(|x| x.split == Split::Test).count(), 6);
        let mut again = samples(10, 3);
        assert_eq!(split_by_record(&mut again, 0.2, 7), summary);
    }
}
