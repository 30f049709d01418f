//! Draws index pairs `(i, j)` with probability proportional to `pi_ij`:
//! first `i` from the row marginal, then `j` from the normalized row.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TransportPlan;
use crate::error::{Error, Result};

/// Precomputed cumulative tables for repeated sampling from one plan.
#[derive(Debug, Clone)]
pub struct PairSampler {
    rows: WeightedIndex<f64>,
    cols: Vec<Option<WeightedIndex<f64>>>,
}

impl PairSampler {
    pub fn new(plan: &TransportPlan) -> Result<Self> {
        let pi = &plan.matrix;
        if pi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("plan entries must be finite and nonnegative".into()));
        }
        let mut skipped = 0usize;
        let cols: Vec<Option<WeightedIndex<f64>>> = pi
            .outer_iter()
            .map(|row| {
                let w = WeightedIndex::new(row.iter().cloned()).ok();
                if w.is_none() {
                    skipped += 1;
                }
                w
            })
            .collect();
        if skipped > 0 {
            log::warn!("skipping {skipped} all-zero plan rows when sampling pairs");
        }
        let rows = WeightedIndex::new(pi.outer_iter().map(|r| r.sum()))
            .map_err(|_| Error::InvalidArgument("plan has no mass".into()))?;
        Ok(PairSampler { rows, cols })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        loop {
            let i = self.rows.sample(rng);
            // a row with positive float sum always has a table; guard anyway
            if let Some(c) = &self.cols[i] {
                return (i, c.sample(rng));
            }
        }
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// `batch` pairs drawn from `plan`, reproducible for a given seed.
pub fn sample_pairs(plan: &TransportPlan, batch: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let sampler = PairSampler::new(plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample_many(batch, &mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PlanKind;
    use ndarray::{array, Array2};

    fn plan(m: Array2<f64>) -> TransportPlan {
        TransportPlan::from_matrix(m, PlanKind::Exact, 0, true)
    }

    #[test]
    fn single_entry() {
        let p = plan(array![[0.7]]);
        assert!(sample_pairs(&p, 50, 1).unwrap().iter().all(|&x| x == (0, 0)));
    }

    #[test]
    fn diagonal_only_diagonal_pairs() {
        let p = plan(Array2::from_diag(&array![0.2, 0.5, 0.3]));
        assert!(sample_pairs(&p, 1000, 2).unwrap().iter().all(|&(i, j)| i == j));
    }

    #[test]
    fn same_seed_same_sequence() {
        let p = plan(array![[0.1, 0.2], [0.3, 0.4]]);
        assert_eq!(sample_pairs(&p, 200, 9).unwrap(), sample_pairs(&p, 200, 9).unwrap());
        assert_ne!(sample_pairs(&p, 200, 9).unwrap(), sample_pairs(&p, 200, 10).unwrap());
    }

    #[test]
    fn zero_rows_are_never_drawn() {
        let p = plan(array![[0.0, 0.0], [0.3, 0.7]]);
        assert!(sample_pairs(&p, 500, 3).unwrap().iter().all(|&(i, _)| i == 1));
    }

    #[test]
    fn frequencies_within_three_sigma() {
        let m = array![[0.05, 0.10, 0.05], [0.20, 0.02, 0.08], [0.10, 0.15, 0.25]];
        let total = m.sum();
        let draws = 100_000;
        let pairs = sample_pairs(&plan(m.clone()), draws, 11).unwrap();
        let mut counts = Array2::<f64>::zeros((3, 3));
        for (i, j) in pairs {
            counts[[i, j]] += 1.0;
        }
        for ((i, j), &c) in counts.indexed_iter() {
            let p = m[[i, j]] / total;
            let mean = p * draws as f64;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((c - mean).abs() <= 3.0 * sd, "cell ({i},{j}): {c} vs {mean} +- {sd}");
        }
    }
}
