//! Mini-batch construction with equal numbers of matched and mismatched pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairs of dataset sample indices, `(image sample, text sample)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub matched: Vec<(usize, usize)>,
    pub mismatched: Vec<(usize, usize)>,
    pub batch_size: usize,
}

/// Deterministic per-epoch batch source over a pool of samples.
///
/// Each epoch visits every pooled sample's own image-caption pair exactly
/// once, in an order shuffled by `(seed, epoch)`. In balanced mode each
/// matched pair is joined by one mismatched pair made of the same image and
/// the caption of a uniformly drawn sample of another identity. Otherwise all
/// cross-identity pairings among the batch's matched samples are used.
#[derive(Clone, Debug)]
pub struct Sampler {
    pool: Vec<usize>,
    identities: Vec<usize>,
    batch_size: usize,
    balanced: bool,
    seed: u64,
}

impl Sampler {
    /// `pool` lists dataset indices; `identities[i]` is the identity of dataset sample `i`.
    pub fn new(
        pool: Vec<usize>,
        identities: Vec<usize>,
        batch_size: usize,
        balanced: bool,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("batch size {batch_size} must be even and positive")));
        }
        if let Some(&bad) = pool.iter().find(|&&i| i >= identities.len()) {
            return Err(Error::Data(format!("pool index {bad} out of range")));
        }
        let first = pool.first().map(|&i| identities[i]);
        if pool.iter().all(|&i| Some(identities[i]) == first) {
            return Err(Error::Config("sampling needs at least two identities".into()));
        }
        if pool.len() < batch_size / 2 {
            return Err(Error::Config(format!(
                "{} samples cannot fill one batch of {} matched pairs",
                pool.len(),
                batch_size / 2
            )));
        }
        Ok(Self {
            pool,
            identities,
            batch_size,
            balanced,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len() / (self.batch_size / 2)
    }

    fn rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// All batches of one epoch; a trailing partial batch is dropped.
    pub fn epoch(&self, epoch: usize) -> Vec<BatchPlan> {
        let mut rng = self.rng(epoch);
        let mut order = self.pool.clone();
        order.shuffle(&mut rng);
        let half = self.batch_size / 2;
        order
            .chunks_exact(half)
            .map(|chunk| {
                let matched: Vec<(usize, usize)> = chunk.iter().map(|&s| (s, s)).collect();
                let mismatched = if self.balanced {
                    chunk
                        .iter()
                        .map(|&s| (s, self.draw_other(&mut rng, self.identities[s])))
                        .collect()
                } else {
                    let mut all = Vec::new();
                    for &a in chunk {
                        for &b in chunk {
                            if self.identities[a] != self.identities[b] {
                                all.push((a, b));
                            }
                        }
                    }
                    all
                };
                BatchPlan {
                    matched,
                    mismatched,
                    batch_size: self.batch_size,
                }
            })
            .collect()
    }

    /// Endless stream of batches, epoch after epoch.
    pub fn stream(&self) -> impl Iterator<Item = BatchPlan> + '_ {
        (0..).flat_map(move |e| self.epoch(e))
    }

    fn draw_other(&self, rng: &mut ChaCha8Rng, identity: usize) -> usize {
        loop {
            let s = self.pool[rng.random_range(0..self.pool.len())];
            if self.identities[s] != identity {
                return s;
            }
        }
    }
}

/// Convenience constructor over a whole dataset's identity list.
pub fn balanced_batches(
    identities: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Sampler> {
    Sampler::new(
        (0..identities.len()).collect(),
        identities.to_vec(),
        batch_size,
        true,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ids(n: usize, per: usize) -> Vec<usize> {
        (0..n * per).map(|i| i / per).collect()
    }

    #[test]
    fn full_size_batch_is_half_and_half() {
        let identities = ids(20, 5);
        let s = balanced_batches(&identities, 64, 1).unwrap();
        for b in s.epoch(0) {
            assert_eq!(b.matched.len(), 32);
            assert_eq!(b.mismatched.len(), 32);
        }
    }

    #[test]
    fn four_pairs_two_batches_cover_everything() {
        let identities = vec![0, 0, 1, 1];
        let s = balanced_batches(&identities, 4, 3).unwrap();
        let epoch = s.epoch(0);
        assert_eq!(epoch.len(), 2);
        let mut seen: Vec<usize> = epoch.iter().flat_map(|b| b.matched.iter().map(|p| p.0)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn mismatched_pairs_cross_identities() {
        let identities = ids(7, 3);
        for balanced in [true, false] {
            let s = Sampler::new((0..21).collect(), identities.clone(), 6, balanced, 9).unwrap();
            for e in 0..3 {
                for b in s.epoch(e) {
                    assert!(b.matched.iter().all(|&(i, t)| identities[i] == identities[t]));
                    assert!(b.mismatched.iter().all(|&(i, t)| identities[i] != identities[t]));
                    if balanced {
                        assert_eq!(b.matched.len(), b.mismatched.len());
                    }
                }
            }
        }
    }

    #[test]
    fn epoch_coverage_is_exact() {
        let identities = ids(6, 4);
        let s = balanced_batches(&identities, 8, 5).unwrap();
        let mut counts = BTreeMap::new();
        for b in s.epoch(2) {
            for p in b.matched {
                *counts.entry(p).or_insert(0) += 1;
            }
        }
        assert_eq!(counts.len(), 24);
        assert!(counts.values().all(|&c| c == 1));
    }

    #[test]
    fn deterministic_streams() {
        let identities = ids(5, 4);
        let a = balanced_batches(&identities, 4, 11).unwrap();
        let b = balanced_batches(&identities, 4, 11).unwrap();
        let xa: Vec<_> = a.stream().take(30).collect();
        let xb: Vec<_> = b.stream().take(30).collect();
        assert_eq!(xa, xb);
        assert_ne!(a.epoch(0), a.epoch(1));
    }

    #[test]
    fn config_errors() {
        assert!(matches!(balanced_batches(&ids(3, 2), 3, 0), Err(Error::Config(_))));
        assert!(matches!(balanced_batches(&[0, 0, 0, 0], 2, 0), Err(Error::Config(_))));
        assert!(matches!(balanced_batches(&[0, 1], 8, 0), Err(Error::Config(_))));
    }
}
