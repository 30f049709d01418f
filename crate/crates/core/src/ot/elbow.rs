//! Transport cost `sum pi_ij c_ij` of the semi-relaxed plan across a grid of
//! `tau` values, for choosing `tau` by eye.

use std::io::Write;
use std::path::Path;

use super::{semi_relaxed_sinkhorn, squared_cost, SinkhornOptions};
use crate::data::{fmt_f64, Snapshot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowPoint {
    pub tau: f64,
    /// `NaN` when the solve failed.
    pub transport_cost: f64,
    pub converged: bool,
    pub error: Option<String>,
}

/// One semi-relaxed solve per grid value. Solver failures are recorded on the
/// corresponding point instead of aborting the scan.
pub fn elbow_scan_tau(
    p0: &Snapshot,
    p1: &Snapshot,
    eps: f64,
    tau_grid: &[f64],
    normalize_cost: bool,
    opts: &SinkhornOptions,
) -> Result<Vec<ElbowPoint>> {
    if tau_grid.is_empty() {
        return Err(Error::InvalidArgument("empty tau grid".into()));
    }
    if tau_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("tau grid must be strictly increasing".into()));
    }
    let cost = squared_cost(p0.points.view(), p1.points.view(), normalize_cost)?;
    let out = tau_grid
        .iter()
        .map(|&tau| match semi_relaxed_sinkhorn(&cost, eps, tau, opts) {
            Ok(plan) => ElbowPoint {
                tau,
                transport_cost: plan.transport_cost(&cost.entries),
                converged: plan.converged,
                error: None,
            },
            Err(e) => {
                log::warn!("elbow scan: tau = {tau} failed: {e}");
                ElbowPoint {
                    tau,
                    transport_cost: f64::NAN,
                    converged: false,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    Ok(out)
}

/// CSV with header `tau,transport_cost`; failed points are written as `NaN`.
pub fn write_elbow_csv(path: &Path, points: &[ElbowPoint]) -> Result<()> {
    let mut s = String::from("tau,transport_cost\n");
    for p in points {
        s.push_str(&fmt_f64(p.tau));
        s.push(',');
        if p.transport_cost.is_finite() {
            s.push_str(&fmt_f64(p.transport_cost));
        } else {
            s.push_str("NaN");
        }
        s.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
