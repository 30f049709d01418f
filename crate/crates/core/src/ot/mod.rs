//! Discrete optimal transport between point clouds.
//!
//! - [`semi_relaxed_sinkhorn`]: entropic problem whose row marginal is
//!   KL-penalized towards `1_n` while columns are pinned to `1_m`. This is the
//!   coupling used to build matching targets.
//! - [`balanced_sinkhorn`]: both marginals fixed (the `tau -> inf` limit).
//! - [`exact_emd`] / [`wasserstein1`]: unregularized optimum by network simplex.
//! - [`sinkhorn_divergence`]: debiased entropic distance with gradients.
//! - [`sample_pairs`] / [`PairSampler`]: draws `(i, j) ~ pi`.
//! - [`elbow_scan_tau`]: transport cost as a function of `tau`.

mod divergence;
mod elbow;
mod emd;
mod sampling;
mod sinkhorn;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};

pub use divergence::{sinkhorn_divergence, sinkhorn_divergence_with_grad, DivergenceGrad, DivergenceOptions};
pub use elbow::{elbow_scan_tau, write_elbow_csv, ElbowPoint};
pub use emd::{exact_emd, wasserstein1, W1Solution};
pub use sampling::{sample_pairs, PairSampler};
pub use sinkhorn::{
    balanced_sinkhorn, balanced_sinkhorn_weighted, semi_relaxed_objective, semi_relaxed_sinkhorn, SinkhornOptions,
};

pub use crate::data::{PlanKind, TransportPlan};

/// Pairwise ground costs between two point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub entries: Array2<f64>,
    /// Entries were divided by their maximum.
    pub normalized: bool,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("cost entries must be finite and nonnegative".into()));
        }
        Ok(CostMatrix {
            entries,
            normalized: false,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().cloned().fold(0.0, f64::max)
    }

    /// Divides by the maximum entry; an all-zero matrix is left unchanged.
    pub fn normalize(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            self.entries.mapv_inplace(|v| v / m);
        }
        self.normalized = true;
        self
    }
}

fn check_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    Ok(())
}

/// Squared Euclidean distances `||a_i - b_j||^2`, optionally max-normalized.
pub fn squared_cost(a: ArrayView2<f64>, b: ArrayView2<f64>, normalize: bool) -> Result<CostMatrix> {
    check_dims(&a, &b)?;
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ai) in a.outer_iter().enumerate() {
        for (j, bj) in b.outer_iter().enumerate() {
            let mut s = 0.0;
            Zip::from(&ai).and(&bj).for_each(|x, y| {
                let d = x - y;
                s += d * d;
            });
            c[[i, j]] = s;
        }
    }
    let cm = CostMatrix::new(c)?;
    Ok(if normalize { cm.normalize() } else { cm })
}

/// Euclidean distances `||a_i - b_j||`.
pub fn euclidean_cost(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<CostMatrix> {
    let mut c = squared_cost(a, b, false)?;
    c.entries.mapv_inplace(f64::sqrt);
    Ok(c)
}
