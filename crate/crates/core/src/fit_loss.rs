//! Distribution-fitting loss between a simulated weighted ensemble and an
//! observed snapshot.
//!
//! Two variants: exact W1 with the optimal plan held fixed during
//! differentiation (positions get gradients, weights do not), and the
//! Sinkhorn divergence, which also differentiates through the weights.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Snapshot};
use crate::error::{Error, Result};
use crate::nets::{NetworkParams, Tape, Var};
use crate::ot::{sinkhorn_divergence_with_grad, wasserstein1, DivergenceOptions};
use crate::simulate::integrate_final;

pub const DEFAULT_SINKHORN_FIT_EPS: f64 = 0.001;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FitVariant {
    #[default]
    Emd,
    Sinkhorn { eps: f64 },
}

impl fmt::Display for FitVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitVariant::Emd => write!(f, "emd"),
            FitVariant::Sinkhorn { eps } => write!(f, "sinkhorn:{eps}"),
        }
    }
}

/// Accepts `emd`, `sinkhorn` and `sinkhorn:<eps>`.
impl FromStr for FitVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("emd") {
            return Ok(FitVariant::Emd);
        }
        let (head, tail) = s.split_once(':').map_or((s, None), |(h, t)| (h, Some(t)));
        if !head.eq_ignore_ascii_case("sinkhorn") {
            return Err(Error::InvalidArgument(format!("unknown fit variant '{s}' (expected emd or sinkhorn)")));
        }
        let eps = match tail {
            None => DEFAULT_SINKHORN_FIT_EPS,
            Some(t) => t
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad sinkhorn epsilon '{t}'")))?,
        };
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("sinkhorn epsilon must be positive, got {eps}")));
        }
        Ok(FitVariant::Sinkhorn { eps })
    }
}

/// Loss value with derivatives in the predicted positions and log-weights.
#[derive(Debug, Clone)]
pub struct FitValue {
    pub value: f64,
    pub grad_points: Array2<f64>,
    /// All zeros for the frozen-plan variant.
    pub grad_log_weights: Array1<f64>,
}

fn normalized(w: ArrayView1<f64>, what: &str) -> Result<Array1<f64>> {
    if w.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} must be positive and finite")));
    }
    let s = w.sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} has zero or non-finite total")));
    }
    Ok(&w / s)
}

fn check_dims(pred: ArrayView2<f64>, w: ArrayView1<f64>, obs: &Snapshot) -> Result<()> {
    if pred.nrows() == 0 {
        return Err(Error::InvalidArgument("empty prediction".into()));
    }
    if pred.nrows() != w.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted points but {} weights", pred.nrows(), w.len())));
    }
    if pred.ncols() != obs.dim() {
        return Err(Error::DimensionMismatch {
            expected: obs.dim(),
            got: pred.ncols(),
        });
    }
    Ok(())
}

/// Exact W1 between the normalized prediction and the normalized snapshot.
/// The gradient is `sum_j pi_ij (x_i - y_j) / |x_i - y_j|` with `pi` fixed.
pub fn weighted_w1_fit_loss(pred: ArrayView2<f64>, pred_weights: ArrayView1<f64>, obs: &Snapshot) -> Result<FitValue> {
    check_dims(pred, pred_weights, obs)?;
    let a = normalized(pred_weights, "predicted weights")?;
    let b = normalized(obs.weights.view(), "observed weights")?;
    let sol = wasserstein1(pred, a.view(), obs.points.view(), b.view())?;
    let mut grad = Array2::zeros(pred.raw_dim());
    for &(i, j, f) in &sol.pairs {
        let diff = &pred.row(i) - &obs.points.row(j);
        let norm = diff.dot(&diff).sqrt();
        if norm > 0.0 {
            grad.row_mut(i).scaled_add(f / norm, &diff);
        }
    }
    Ok(FitValue {
        value: sol.value,
        grad_points: grad,
        grad_log_weights: Array1::zeros(pred.nrows()),
    })
}

/// Sinkhorn divergence with Euclidean cost. Weights enter through
/// `a = w / sum(w)`, so the log-weight gradient is `a_i (gamma_i - <a, gamma>)`
/// for the weight gradient `gamma`.
pub fn sinkhorn_fit_loss(pred: ArrayView2<f64>, pred_weights: ArrayView1<f64>, obs: &Snapshot, eps: f64) -> Result<FitValue> {
    check_dims(pred, pred_weights, obs)?;
    let a = normalized(pred_weights, "predicted weights")?;
    let b = normalized(obs.weights.view(), "observed weights")?;
    let r = sinkhorn_divergence_with_grad(pred, a.view(), obs.points.view(), b.view(), &DivergenceOptions::new(eps))?;
    let mean = a.dot(&r.grad_a_weights);
    let glw = &a * &(&r.grad_a_weights - mean);
    Ok(FitValue {
        value: r.value,
        grad_points: r.grad_a_points,
        grad_log_weights: glw,
    })
}

/// Dispatches on the variant; `log_weights` are unnormalized.
pub fn fit_loss(pred: ArrayView2<f64>, log_weights: ArrayView1<f64>, obs: &Snapshot, variant: FitVariant) -> Result<FitValue> {
    let w = log_weights.mapv(f64::exp);
    match variant {
        FitVariant::Emd => weighted_w1_fit_loss(pred, w.view(), obs),
        FitVariant::Sinkhorn { eps } => sinkhorn_fit_loss(pred, w.view(), obs, eps),
    }
}

/// The loss as a tape node over position (`N x d`) and log-weight (`N x 1`)
/// variables.
pub fn fit_loss_tape(tape: &mut Tape, positions: Var, log_weights: Var, obs: &Snapshot, variant: FitVariant) -> Result<Var> {
    let lw = tape.value(log_weights).column(0).to_owned();
    let fv = fit_loss(tape.value(positions).view(), lw.view(), obs, variant)?;
    let mut partials = vec![(positions, fv.grad_points)];
    if matches!(variant, FitVariant::Sinkhorn { .. }) {
        partials.push((log_weights, fv.grad_log_weights.insert_axis(Axis(1))));
    }
    tape.custom_scalar(fv.value, partials)
}

/// Sum over consecutive snapshot pairs of the fitting loss between the
/// observed snapshot and the simulation started from the previous observed
/// snapshot.
pub fn multi_time_fit_loss(
    v: &NetworkParams,
    g: &NetworkParams,
    ds: &Dataset,
    steps_per_unit: usize,
    variant: FitVariant,
) -> Result<f64> {
    let snaps = ds.snapshots();
    if snaps.len() < 2 {
        return Err(Error::InvalidArgument("need at least two snapshots".into()));
    }
    let mut total = 0.0;
    for w in snaps.windows(2) {
        let (s0, s1) = (&w[0], &w[1]);
        let (x, lw) = integrate_final(
            v,
            g,
            s0.points.view(),
            s0.time_index as f64,
            s1.time_index as f64,
            steps_per_unit,
        )?;
        // observed start weights carry over multiplicatively
        let lw = lw + s0.weights.mapv(f64::ln);
        total += fit_loss(x.view(), lw.view(), s1, variant)?.value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{grad_scalar, init_network};
    use crate::ot::wasserstein1;
    use crate::simulate::integrate_tape;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snap(t: usize, p: Array2<f64>) -> Snapshot {
        Snapshot::new(t, p).unwrap()
    }

    fn ones(n: usize) -> Array1<f64> {
        Array1::ones(n)
    }

    #[test]
    fn identical_is_zero() {
        let p = array![[0.0, 1.0], [2.0, 3.0], [1.0, 1.0]];
        let r = weighted_w1_fit_loss(p.view(), ones(3).view(), &snap(1, p.clone())).unwrap();
        assert!(r.value.abs() < 1e-12);
        let s = sinkhorn_fit_loss(p.view(), ones(3).view(), &snap(1, p.clone()), 0.01).unwrap();
        assert!(s.value.abs() < 1e-6);
    }

    #[test]
    fn singletons_distance_three() {
        let r = weighted_w1_fit_loss(array![[0.0, 0.0]].view(), ones(1).view(), &snap(0, array![[3.0, 0.0]])).unwrap();
        assert!((r.value - 3.0).abs() < 1e-12);
        assert_eq!(r.grad_points, array![[-1.0, 0.0]]);
    }

    #[test]
    fn scale_invariance_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Array2::from_shape_fn((7, 2), |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(7, |_| rng.random_range(0.1..2.0));
        let o = snap(0, Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0)));
        let a = weighted_w1_fit_loss(p.view(), w.view(), &o).unwrap().value;
        let b = weighted_w1_fit_loss(p.view(), (&w * 8.0).view(), &o).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_plan_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(6, |_| rng.random_range(0.5..1.5));
        let o = snap(0, Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)));
        let base = weighted_w1_fit_loss(p.view(), w.view(), &o).unwrap();
        let a = &w / w.sum();
        let sol = wasserstein1(p.view(), a.view(), o.points.view(), (ones(4) / 4.0).view()).unwrap();
        let frozen = |q: &Array2<f64>| -> f64 {
            sol.pairs
                .iter()
                .map(|&(i, j, f)| {
                    let d = &q.row(i) - &o.points.row(j);
                    f * d.dot(&d).sqrt()
                })
                .sum()
        };
        for i in 0..6 {
            for k in 0..2 {
                let mut qp = p.clone();
                qp[[i, k]] += 1e-6;
                let mut qm = p.clone();
                qm[[i, k]] -= 1e-6;
                let fd = (frozen(&qp) - frozen(&qm)) / 2e-6;
                let g = base.grad_points[[i, k]];
                let err = (fd - g).abs();
                assert!(err < 1e-9 || err / fd.abs().max(g.abs()) < 1e-4, "{fd} vs {g}");
            }
        }
    }

    #[test]
    fn sinkhorn_symmetric_and_close_to_w1() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // two clusters at 50 points each side, 2D
        let gen = |rng: &mut ChaCha8Rng, shift: f64| {
            Array2::from_shape_fn((50, 2), |(i, k)| {
                let c = if i % 2 == 0 { 0.0 } else { 1.0 };
                c + if k == 0 { shift } else { 0.0 } + 0.1 * rng.random_range(-1.0..1.0)
            })
        };
        let p = gen(&mut rng, 0.0);
        let q = gen(&mut rng, 0.3);
        let w = ones(50);
        let o = snap(0, q.clone());
        let e = weighted_w1_fit_loss(p.view(), w.view(), &o).unwrap().value;
        let s = sinkhorn_fit_loss(p.view(), w.view(), &o, 0.001).unwrap().value;
        assert!((s - e).abs() < 0.05 * e, "{s} vs {e}");
        let s2 = sinkhorn_fit_loss(q.view(), w.view(), &snap(0, p.clone()), 0.001).unwrap().value;
        assert!((s - s2).abs() < 1e-8, "{s} {s2}");
    }

    #[test]
    fn sinkhorn_log_weight_gradient_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let lw = Array1::from_shape_fn(5, |_| rng.random_range(-0.5..0.5));
        let o = snap(0, Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)));
        let v = FitVariant::Sinkhorn { eps: 0.1 };
        let base = fit_loss(p.view(), lw.view(), &o, v).unwrap();
        for i in 0..5 {
            let mut a = lw.clone();
            a[i] += 1e-5;
            let mut b = lw.clone();
            b[i] -= 1e-5;
            let fd = (fit_loss(p.view(), a.view(), &o, v).unwrap().value - fit_loss(p.view(), b.view(), &o, v).unwrap().value) / 2e-5;
            let g = base.grad_log_weights[i];
            let err = (fd - g).abs();
            assert!(err < 1e-8 || err / fd.abs().max(g.abs()) < 1e-4, "{fd} vs {g}");
        }
    }

    #[test]
    fn unrolled_fit_gradients_match_fd() {
        let v = init_network(2, 2, 3, 4, 1).unwrap();
        let g = init_network(2, 1, 3, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x0 = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let o = snap(1, Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)));
        for variant in [FitVariant::Emd, FitVariant::Sinkhorn { eps: 0.1 }] {
            let (val, grads) = grad_scalar(&[&v, &g], |tape, nv| {
                let (x, lw) = integrate_tape(tape, &nv[0], &nv[1], x0.clone(), 0.0, 1.0, 3)?;
                fit_loss_tape(tape, x, lw, &o, variant)
            })
            .unwrap();
            // FD with the EMD plan frozen at the base point
            let frozen_sol = {
                let (x, lw) = integrate_final(&v, &g, x0.view(), 0.0, 1.0, 3).unwrap();
                let a = lw.mapv(f64::exp);
                let a = &a / a.sum();
                wasserstein1(x.view(), a.view(), o.points.view(), (ones(4) / 4.0).view()).unwrap()
            };
            let eval = |vv: &NetworkParams, gg: &NetworkParams| -> f64 {
                let (x, lw) = integrate_final(vv, gg, x0.view(), 0.0, 1.0, 3).unwrap();
                match variant {
                    FitVariant::Emd => frozen_sol
                        .pairs
                        .iter()
                        .map(|&(i, j, f)| {
                            let d = &x.row(i) - &o.points.row(j);
                            f * d.dot(&d).sqrt()
                        })
                        .sum(),
                    _ => fit_loss(x.view(), lw.view(), &o, variant).unwrap().value,
                }
            };
            assert!((val - eval(&v, &g)).abs() < 1e-9);
            for which in 0..2 {
                let net = if which == 0 { &v } else { &g };
                let flat = net.flatten();
                let gf = grads[which].flatten();
                for k in 0..flat.len() {
                    let f = |delta: f64| {
                        let mut q = flat.clone();
                        q[k] += delta;
                        let q = NetworkParams::unflatten(net.architecture(), &q).unwrap();
                        if which == 0 {
                            eval(&q, &g)
                        } else {
                            eval(&v, &q)
                        }
                    };
                    let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
                    let err = (fd - gf[k]).abs();
                    assert!(
                        err < 1e-8 || err / fd.abs().max(gf[k].abs()) < 1e-4,
                        "{variant} net {which} coord {k}: {fd} vs {}",
                        gf[k]
                    );
                }
            }
            if variant == FitVariant::Emd {
                assert!(grads[1].flatten().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn multi_time_zero_model_identical_snapshots() {
        let v = NetworkParams::zeros(crate::nets::Architecture {
            input: 3,
            output: 2,
            width: 4,
            depth: 2,
        });
        let g = NetworkParams::zeros(crate::nets::Architecture {
            input: 3,
            output: 1,
            width: 4,
            depth: 2,
        });
        let p = array![[0.0, 0.0], [1.0, 2.0]];
        let ds = Dataset::new(vec![snap(0, p.clone()), snap(1, p)]).unwrap();
        assert!(multi_time_fit_loss(&v, &g, &ds, 5, FitVariant::Emd).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dropping_weights_hurts_on_doubling_toy() {
        // one source point doubles into two observed copies; the other does not
        let pred = array![[0.0], [1.0]];
        let obs = snap(1, array![[0.0], [0.0], [1.0]]);
        let with = weighted_w1_fit_loss(pred.view(), array![2.0, 1.0].view(), &obs).unwrap().value;
        let without = weighted_w1_fit_loss(pred.view(), ones(2).view(), &obs).unwrap().value;
        assert!(with < 1e-12 && without > with);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("emd".parse::<FitVariant>().unwrap(), FitVariant::Emd);
        assert_eq!("sinkhorn".parse::<FitVariant>().unwrap(), FitVariant::Sinkhorn { eps: 0.001 });
        assert_eq!("sinkhorn:0.05".parse::<FitVariant>().unwrap(), FitVariant::Sinkhorn { eps: 0.05 });
        assert!("sinkhorn:-1".parse::<FitVariant>().is_err());
        assert!("foo".parse::<FitVariant>().is_err());
        let j = serde_json::to_string(&FitVariant::Sinkhorn { eps: 0.5 }).unwrap();
        assert_eq!(serde_json::from_str::<FitVariant>(&j).unwrap(), FitVariant::Sinkhorn { eps: 0.5 });
    }

    #[test]
    fn rejects_empty_and_zero_weights() {
        let o = snap(0, array![[0.0]]);
        let e: Array2<f64> = Array2::zeros((0, 1));
        assert!(weighted_w1_fit_loss(e.view(), Array1::zeros(0).view(), &o).is_err());
        assert!(weighted_w1_fit_loss(array![[0.0]].view(), array![0.0].view(), &o).is_err());
    }
}
