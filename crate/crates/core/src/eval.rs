//! Metrics: W1 between predicted and observed populations, relative mass
//! error, growth-rate correlation and mass curves.

use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::data::{fmt_f64, Dataset, Snapshot};
use crate::error::{Error, Result};
use crate::ot::wasserstein1;
use crate::simulate::step_grid;
use crate::trainer::{write_file, Model};

/// Exact W1 with Euclidean cost between the prediction (weights normalized;
/// uniform when `pred_weights` is `None`) and the snapshot (its weights
/// normalized).
pub fn w1_metric(pred: ArrayView2<f64>, pred_weights: Option<ArrayView1<f64>>, obs: &Snapshot) -> Result<f64> {
    let n = pred.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty prediction".into()));
    }
    let a = match pred_weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::ShapeMismatch(format!("{n} points but {} weights", w.len())));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument("predicted weights must be finite and nonnegative".into()));
            }
            let s = w.sum();
            if !(s > 0.0) {
                return Err(Error::InvalidArgument("predicted weights sum to zero".into()));
            }
            &w / s
        }
        None => Array1::from_elem(n, 1.0 / n as f64),
    };
    let b = &obs.weights / obs.weights.sum();
    Ok(wasserstein1(pred, a.view(), obs.points.view(), b.view())?.value)
}

/// `|m_t - m^_t| / m_t` with `m_t = obs_t / obs_0` and `m^_t = pred_mass / obs_0`.
/// Counts or total observed weights can be passed for `obs_t`, `obs_0`.
pub fn rme_metric(pred_mass: f64, obs_t: f64, obs_0: f64) -> Result<f64> {
    if !(obs_0 > 0.0) {
        return Err(Error::InvalidArgument("initial population must be nonempty".into()));
    }
    if !(obs_t > 0.0) {
        return Err(Error::InvalidArgument("observed population is empty".into()));
    }
    if !pred_mass.is_finite() || pred_mass < 0.0 {
        return Err(Error::InvalidArgument(format!("predicted mass {pred_mass} is invalid")));
    }
    let m = obs_t / obs_0;
    let mh = pred_mass / obs_0;
    Ok((m - mh).abs() / m)
}

/// Pearson correlation coefficient.
pub fn pearson(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch("correlation inputs differ in length".into()));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("correlation needs at least 3 points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.sum() / n, y.sum() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation input has zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Cells at one (possibly unobserved) time with their true growth rates.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthTruth {
    pub time: f64,
    pub points: ndarray::Array2<f64>,
    pub true_growth: Array1<f64>,
}

/// Pearson correlation between `g(x, t)` and the true rate, per record.
pub fn growth_correlation(model: &Model, truth: &[GrowthTruth]) -> Result<Vec<(f64, f64)>> {
    truth
        .iter()
        .map(|r| {
            let pred = model.growth(r.points.view(), r.time)?;
            Ok((r.time, pearson(pred.view(), r.true_growth.view())?))
        })
        .collect()
}

/// Metrics for one observed time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeMetrics {
    pub time: f64,
    /// Prediction weighted by the simulated weights.
    pub w1: f64,
    /// Prediction with uniform weights.
    pub w1_unweighted: f64,
    pub rme: f64,
    pub m_obs: f64,
    pub m_pred: f64,
}

/// Simulates the first snapshot forward over the whole horizon and scores
/// every later snapshot.
pub fn evaluate_from_start(model: &Model, ds: &Dataset, steps_per_unit: usize) -> Result<Vec<TimeMetrics>> {
    let snaps = ds.snapshots();
    if snaps.len() < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least two snapshots".into()));
    }
    let s0 = &snaps[0];
    let t_end = snaps.last().unwrap().time_index as f64;
    let (n, _) = step_grid(0.0, t_end, steps_per_unit)?;
    let bundle = model.simulate(s0.points.view(), 0.0, t_end, steps_per_unit)?;
    let lw0 = s0.weights.mapv(f64::ln);
    let mass0 = s0.weights.sum();
    snaps[1..]
        .iter()
        .map(|s| {
            let t = s.time_index as f64;
            let k = ((t / t_end) * n as f64).round() as usize;
            let x = bundle.positions_at(k);
            let w = (&bundle.log_weights.column(k) + &lw0).mapv(f64::exp);
            score(x, w.view(), s, mass0, t)
        })
        .collect()
}

fn score(x: ArrayView2<f64>, w: ArrayView1<f64>, obs: &Snapshot, mass0: f64, time: f64) -> Result<TimeMetrics> {
    let m_pred = w.sum();
    let obs_mass = obs.weights.sum();
    Ok(TimeMetrics {
        time,
        w1: w1_metric(x, Some(w), obs)?,
        w1_unweighted: w1_metric(x, None, obs)?,
        rme: rme_metric(m_pred, obs_mass, mass0)?,
        m_obs: obs_mass / mass0,
        m_pred: m_pred / mass0,
    })
}

/// Scores a model trained without snapshot `held_time`: the previous observed
/// snapshot is simulated to the held time, starting from its observed
/// weights. Relative mass is measured against the first snapshot.
pub fn evaluate_holdout(model: &Model, ds: &Dataset, held_time: usize, steps_per_unit: usize) -> Result<TimeMetrics> {
    let snaps = ds.snapshots();
    if held_time == 0 || held_time >= snaps.len() {
        return Err(Error::InvalidArgument(format!("no held-out snapshot at {held_time}")));
    }
    let prev = &snaps[held_time - 1];
    let obs = &snaps[held_time];
    let (x, lw) = model.simulate_final(prev.points.view(), prev.time_index as f64, obs.time_index as f64, steps_per_unit)?;
    let w = (&lw + &prev.weights.mapv(f64::ln)).mapv(f64::exp);
    let mass0 = snaps[0].weights.sum();
    score(x.view(), w.view(), obs, mass0, obs.time_index as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassPoint {
    pub time: f64,
    pub m_obs: f64,
    pub m_pred: f64,
}

/// Observed and predicted relative mass at every snapshot time, simulating
/// from the first snapshot.
pub fn mass_curve(model: &Model, ds: &Dataset, steps_per_unit: usize) -> Result<Vec<MassPoint>> {
    let snaps = ds.snapshots();
    let s0 = &snaps[0];
    let mass0 = s0.weights.sum();
    let mut out = vec![MassPoint {
        time: s0.time_index as f64,
        m_obs: 1.0,
        m_pred: 1.0,
    }];
    if snaps.len() == 1 {
        return Ok(out);
    }
    let t_end = snaps.last().unwrap().time_index as f64;
    let (n, _) = step_grid(0.0, t_end, steps_per_unit)?;
    let bundle = model.simulate(s0.points.view(), 0.0, t_end, steps_per_unit)?;
    let lw0 = s0.weights.mapv(f64::ln);
    for s in &snaps[1..] {
        let t = s.time_index as f64;
        let k = ((t / t_end) * n as f64).round() as usize;
        let m_pred = (&bundle.log_weights.column(k) + &lw0).mapv(f64::exp).sum() / mass0;
        out.push(MassPoint {
            time: t,
            m_obs: s.weights.sum() / mass0,
            m_pred,
        });
    }
    Ok(out)
}

/// `time,w1,rme`.
pub fn metrics_csv(rows: &[TimeMetrics]) -> String {
    let mut s = String::from("time,w1,rme\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", fmt_f64(r.time), fmt_f64(r.w1), fmt_f64(r.rme)));
    }
    s
}

/// `time,w1` for the uniformly weighted prediction.
pub fn unweighted_metrics_csv(rows: &[TimeMetrics]) -> String {
    let mut s = String::from("time,w1\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", fmt_f64(r.time), fmt_f64(r.w1_unweighted)));
    }
    s
}

/// `time,m_obs,m_pred`.
pub fn mass_curve_csv(rows: &[MassPoint]) -> String {
    let mut s = String::from("time,m_obs,m_pred\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", fmt_f64(r.time), fmt_f64(r.m_obs), fmt_f64(r.m_pred)));
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[TimeMetrics]) -> Result<()> {
    write_file(path, &metrics_csv(rows))
}

pub fn write_mass_curve_csv(path: &Path, rows: &[MassPoint]) -> Result<()> {
    write_file(path, &mass_curve_csv(rows))
}

/// `time,pearson_r`.
pub fn write_correlation_csv(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("time,pearson_r\n");
    for (t, r) in rows {
        s.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*r)));
    }
    write_file(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Architecture, NetworkParams};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_model(d: usize) -> Model {
        let a = Architecture {
            input: d + 1,
            output: d,
            width: 4,
            depth: 2,
        };
        Model {
            v: NetworkParams::zeros(a),
            g: NetworkParams::zeros(Architecture { output: 1, ..a }),
        }
    }

    #[test]
    fn w1_basic() {
        let p = array![[0.0, 0.0], [1.0, 1.0]];
        let s = Snapshot::new(0, p.clone()).unwrap();
        assert!(w1_metric(p.view(), None, &s).unwrap().abs() < 1e-12);
        let s = Snapshot::new(0, array![[1.7, 0.0]]).unwrap();
        assert!((w1_metric(array![[0.0, 0.0]].view(), None, &s).unwrap() - 1.7).abs() < 1e-12);
    }

    #[test]
    fn w1_matches_permutations_n5() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..5).collect();
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = (0..5)
                .map(|i| {
                    let d: Array1<f64> = &a.row(i) - &b.row(p[i]);
                    d.dot(&d).sqrt()
                })
                .sum::<f64>()
                / 5.0;
            best = best.min(c);
        });
        let w = w1_metric(a.view(), None, &Snapshot::new(0, b).unwrap()).unwrap();
        assert!((w - best).abs() < 1e-12, "{w} vs {best}");
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn rme_values() {
        assert_eq!(rme_metric(200.0, 200.0, 100.0).unwrap(), 0.0);
        assert!((rme_metric(190.0, 200.0, 100.0).unwrap() - 0.05).abs() < 1e-15);
        assert!(rme_metric(1.0, 0.0, 100.0).is_err());
        let a = rme_metric(173.0, 211.0, 97.0).unwrap();
        let b = rme_metric(173.0 * 4.0, 211.0 * 4.0, 97.0 * 4.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pearson_signs_and_affine_invariance() {
        let x = array![1.0, 2.0, 4.0, 3.5];
        assert!((pearson(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(x.view(), (-&x).view()).unwrap() + 1.0).abs() < 1e-15);
        let y = array![0.3, -1.0, 2.0, 0.1];
        let r = pearson(x.view(), y.view()).unwrap();
        let r2 = pearson((&x * 3.0 + 2.0).view(), (&y * 0.5 - 7.0).view()).unwrap();
        assert!((r - r2).abs() < 1e-12);
        assert!(pearson(array![1.0, 1.0, 1.0].view(), x.slice(ndarray::s![..3]).view()).is_err());
    }

    #[test]
    fn zero_model_mass_curve() {
        let ds = Dataset::new(vec![
            Snapshot::new(0, array![[0.0], [1.0]]).unwrap(),
            Snapshot::new(1, array![[0.0], [1.0], [2.0], [3.0]]).unwrap(),
        ])
        .unwrap();
        let mc = mass_curve(&zero_model(1), &ds, 5).unwrap();
        assert_eq!(mc.len(), 2);
        assert!(mc.iter().all(|m| m.m_pred == 1.0));
        assert_eq!(mc[1].m_obs, 2.0);
        let ev = evaluate_from_start(&zero_model(1), &ds, 5).unwrap();
        assert!((ev[0].rme - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_prediction_scores_zero() {
        let p = array![[0.0, 0.5], [1.0, -1.0]];
        let ds = Dataset::new(vec![Snapshot::new(0, p.clone()).unwrap(), Snapshot::new(1, p).unwrap()]).unwrap();
        let ev = evaluate_from_start(&zero_model(2), &ds, 4).unwrap();
        assert!(ev[0].w1.abs() < 1e-12 && ev[0].rme == 0.0);
        assert!(metrics_csv(&ev).starts_with("time,w1,rme\n"));
    }

    #[test]
    fn correlation_of_model_with_itself() {
        let mut m = zero_model(1);
        m.g.layers[0].weight[[0, 0]] = 1.0;
        m.g.layers[1].weight[[0, 0]] = 2.0;
        let pts = array![[0.5], [1.0], [2.0], [3.0]];
        let truth = m.growth(pts.view(), 0.5).unwrap();
        let r = growth_correlation(
            &m,
            &[GrowthTruth {
                time: 0.5,
                points: pts,
                true_growth: truth,
            }],
        )
        .unwrap();
        assert!((r[0].1 - 1.0).abs() < 1e-12);
    }
}
