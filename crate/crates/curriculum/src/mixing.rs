//! Interleaving of task streams into training batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, TrainError};

/// One epoch's draw order: `(stream, index within stream)` pairs. Every
/// item of every stream appears exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPlan {
    pub order: Vec<(usize, usize)>,
}

impl MixPlan {
    pub fn batches(&self, batch: usize) -> impl Iterator<Item = &[(usize, usize)]> {
        self.order.chunks(batch.max(1))
    }

    pub fn n_batches(&self, batch: usize) -> usize {
        self.order.len().div_ceil(batch.max(1))
    }
}

/// Draws without replacement. At each draw a stream is chosen with
/// probability proportional to `weight * remaining / size`; with the
/// default weights (the stream sizes) this is proportional to what is left,
/// so the mix follows the stream sizes throughout the epoch. Items within a
/// stream keep their order, so a single stream is iterated as is.
pub fn mix_batches(sizes: &[usize], weights: Option<&[f64]>, seed: u64) -> Result<MixPlan> {
    if sizes.iter().all(|&s| s == 0) {
        return Err(TrainError::NoStreams);
    }
    let weights: Vec<f64> = match weights {
        Some(w) if w.len() == sizes.len() && w.iter().all(|x| x.is_finite() && *x >= 0.0) => w.to_vec(),
        Some(w) => {
            return Err(TrainError::Config(format!(
                "{} weights for {} streams, all must be finite and non-negative",
                w.len(),
                sizes.len()
            )))
        }
        None => sizes.iter().map(|&s| s as f64).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = vec![0usize; sizes.len()];
    let total: usize = sizes.iter().sum();
    let mut order = Vec::with_capacity(total);
    while order.len() < total {
        let p: Vec<f64> = sizes
            .iter()
            .zip(&next)
            .zip(&weights)
            .map(|((&n, &k), &w)| if k == n { 0.0 } else { w.max(1e-12) * (n - k) as f64 / n as f64 })
            .collect();
        let sum: f64 = p.iter().sum();
        let mut u = rng.random::<f64>() * sum;
        let mut pick = p.iter().rposition(|&x| x > 0.0).expect("some stream left");
        for (i, &x) in p.iter().enumerate() {
            if x > 0.0 && u < x {
                pick = i;
                break;
            }
            u -= x;
        }
        order.push((pick, next[pick]));
        next[pick] += 1;
    }
    Ok(MixPlan { order })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_stream_is_identity() {
        let plan = mix_batches(&[0, 5], None, 3).unwrap();
        assert_eq!(plan.order, (0..5).map(|i| (1, i)).collect::<Vec<_>>());
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(mix_batches(&[0, 0], None, 1), Err(TrainError::NoStreams)));
    }
}
