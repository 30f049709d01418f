//! Conditional velocity and growth targets drawn from a transport plan, and
//! the joint matching loss
//! `mean_k ||v(x_t, t) - v_target||^2 + |g(x_t, t) - g_target|^2`.
//!
//! For an interval `[t0, t0 + dt]` a pair `(i, j) ~ pi` gives
//! `x_t = (1 - s) x0_i + s x1_j + sigma N(0, I)` at `t = t0 + s dt`, with
//! targets `(x1_j - x0_i) / dt` and `log r_i / dt`, where `r = pi 1` is the
//! row marginal. For unit intervals these are the plain displacement and log
//! row mass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Snapshot, TransportPlan};
use crate::error::{Error, Result};
use crate::nets::{with_time, NetVars, NetworkParams, Tape, Var};
use crate::ot::PairSampler;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSample {
    pub i: usize,
    pub j: usize,
    pub x0: Array1<f64>,
    pub x1: Array1<f64>,
    pub t: f64,
    pub xt: Array1<f64>,
    pub v_target: Array1<f64>,
    pub g_target: f64,
}

/// Samples stacked row-wise for batched evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchBatch {
    pub t: Array1<f64>,
    pub xt: Array2<f64>,
    pub v_target: Array2<f64>,
    pub g_target: Array1<f64>,
}

impl MatchBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn from_samples(samples: &[MatchSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty match batch".into()))?;
        let d = first.xt.len();
        let b = samples.len();
        let mut out = MatchBatch {
            t: Array1::zeros(b),
            xt: Array2::zeros((b, d)),
            v_target: Array2::zeros((b, d)),
            g_target: Array1::zeros(b),
        };
        for (k, s) in samples.iter().enumerate() {
            out.t[k] = s.t;
            out.xt.row_mut(k).assign(&s.xt);
            out.v_target.row_mut(k).assign(&s.v_target);
            out.g_target[k] = s.g_target;
        }
        Ok(out)
    }

    /// Network inputs `[x_t, t]`.
    pub fn inputs(&self) -> Array2<f64> {
        let mut inp = with_time(self.xt.view(), 0.0);
        inp.column_mut(self.xt.ncols()).assign(&self.t);
        inp
    }
}

/// Precomputed sampling state for one interval.
#[derive(Debug, Clone)]
pub(crate) struct IntervalSampler {
    pub t0: f64,
    pub dt: f64,
    log_rows: Array1<f64>,
    pairs: PairSampler,
}

impl IntervalSampler {
    pub fn new(plan: &TransportPlan, t0: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("interval length must be positive, got {dt}")));
        }
        Ok(IntervalSampler {
            t0,
            dt,
            log_rows: plan.row_marginal.mapv(f64::ln),
            pairs: PairSampler::new(plan)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        x0: ArrayView2<f64>,
        x1: ArrayView2<f64>,
        batch: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Vec<MatchSample>> {
        let d = x0.ncols();
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (i, j) = self.pairs.sample(rng);
            let lr = self.log_rows[i];
            if !lr.is_finite() {
                return Err(Error::InvalidArgument(format!("row marginal at index {i} is not positive")));
            }
            let s: f64 = rng.random();
            let a = x0.row(i).to_owned();
            let b = x1.row(j).to_owned();
            let mut xt = &a * (1.0 - s) + &b * s;
            // drawn even when sigma = 0 so the pair stream does not depend on sigma
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                xt[k] += sigma * z;
            }
            let v_target = (&b - &a) / self.dt;
            out.push(MatchSample {
                i,
                j,
                x0: a,
                x1: b,
                t: self.t0 + s * self.dt,
                xt,
                v_target,
                g_target: lr / self.dt,
            });
        }
        Ok(out)
    }
}

/// `batch` samples for the interval between two snapshots, using their time
/// indices as interval endpoints.
pub fn build_match_batch(
    p0: &Snapshot,
    p1: &Snapshot,
    plan: &TransportPlan,
    batch: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<MatchSample>> {
    if plan.shape() != (p0.len(), p1.len()) {
        return Err(Error::ShapeMismatch(format!(
            "plan {:?} for snapshots of sizes {} and {}",
            plan.shape(),
            p0.len(),
            p1.len()
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {sigma}")));
    }
    let t0 = p0.time_index as f64;
    let dt = p1.time_index as f64 - t0;
    let sampler = IntervalSampler::new(plan, t0, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sampler.sample(p0.points.view(), p1.points.view(), batch, sigma, &mut rng)
}

/// Matching loss split into its two terms.
#[derive(Debug, Clone, Copy)]
pub struct VgfmTerms {
    pub total: Var,
    pub velocity: Var,
    pub growth: Var,
}

/// Loss on a tape, differentiable in both networks.
pub fn vgfm_loss_tape(tape: &mut Tape, v: &NetVars, g: &NetVars, batch: &MatchBatch) -> Result<VgfmTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty match batch".into()));
    }
    let b = batch.len() as f64;
    let inp = tape.leaf(batch.inputs());
    let vo = v.forward(tape, inp)?;
    let go = g.forward(tape, inp)?;
    let vt = tape.leaf(batch.v_target.clone());
    let gt = tape.leaf(batch.g_target.clone().insert_axis(Axis(1)));
    let dv = tape.sub(vo, vt)?;
    let dv2 = tape.square(dv)?;
    let sv = tape.sum(dv2)?;
    let velocity = tape.scale(sv, 1.0 / b)?;
    let dg = tape.sub(go, gt)?;
    let dg2 = tape.square(dg)?;
    let sg = tape.sum(dg2)?;
    let growth = tape.scale(sg, 1.0 / b)?;
    let total = tape.add(velocity, growth)?;
    Ok(VgfmTerms { total, velocity, growth })
}

/// Plain evaluation of the matching loss.
pub fn vgfm_loss(v: &NetworkParams, g: &NetworkParams, samples: &[MatchSample]) -> Result<f64> {
    Ok(vgfm_loss_terms(v, g, samples)?.0)
}

/// `(total, velocity term, growth term)`.
pub fn vgfm_loss_terms(v: &NetworkParams, g: &NetworkParams, samples: &[MatchSample]) -> Result<(f64, f64, f64)> {
    let batch = MatchBatch::from_samples(samples)?;
    let inp = batch.inputs();
    if v.architecture().input != inp.ncols() || g.architecture().input != inp.ncols() {
        return Err(Error::DimensionMismatch {
            expected: inp.ncols(),
            got: v.architecture().input,
        });
    }
    let vo = v.forward_inputs(inp.view());
    let go = g.forward_inputs(inp.view());
    if vo.ncols() != batch.v_target.ncols() || go.ncols() != 1 {
        return Err(Error::DimensionMismatch {
            expected: batch.v_target.ncols(),
            got: vo.ncols(),
        });
    }
    let b = batch.len() as f64;
    let sv = (&vo - &batch.v_target).mapv(|x| x * x).sum() / b;
    let sg = (&go.column(0) - &batch.g_target).mapv(|x| x * x).sum() / b;
    Ok((sv + sg, sv, sg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaReport {
    pub lambdas: Vec<f64>,
    /// Largest absolute difference between any two parameterizations' targets.
    pub max_discrepancy: f64,
}

/// Builds the per-pair targets through the two-period construction (growth
/// rate `log r_i / lambda` on `[0, lambda]`, velocity `(x1 - x0) / (1 - lambda)`
/// on `(lambda, 1]`) followed by the joint reparameterization
/// (`v~ = (1 - lambda) v`, `g~ = lambda g`) for each `lambda`, and reports how
/// far the results are from each other.
pub fn verify_lambda_free_targets_with(
    p0: &Snapshot,
    p1: &Snapshot,
    plan: &TransportPlan,
    lambdas: &[f64],
) -> Result<LambdaReport> {
    if plan.shape() != (p0.len(), p1.len()) {
        return Err(Error::ShapeMismatch("plan does not match snapshots".into()));
    }
    if lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::InvalidArgument("lambda must lie in (0, 1)".into()));
    }
    let log_r = plan.row_marginal.mapv(f64::ln);
    let targets = |lam: f64| -> Vec<(Array1<f64>, f64)> {
        let mut out = Vec::new();
        for ((i, j), &p) in plan.matrix.indexed_iter() {
            if p <= 0.0 {
                continue;
            }
            let d = &p1.points.row(j) - &p0.points.row(i);
            let v_two = &d / (1.0 - lam);
            let g_two = log_r[i] / lam;
            out.push((v_two * (1.0 - lam), g_two * lam));
        }
        out
    };
    let sets: Vec<_> = lambdas.iter().map(|&l| targets(l)).collect();
    let mut worst = 0.0f64;
    for a in 0..sets.len() {
        for b in a + 1..sets.len() {
            for ((va, ga), (vb, gb)) in sets[a].iter().zip(sets[b].iter()) {
                worst = worst.max((ga - gb).abs());
                for (x, y) in va.iter().zip(vb.iter()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    Ok(LambdaReport {
        lambdas: lambdas.to_vec(),
        max_discrepancy: worst,
    })
}

/// [`verify_lambda_free_targets_with`] at `lambda` in `{0.3, 0.7}`.
pub fn verify_lambda_free_targets(p0: &Snapshot, p1: &Snapshot, plan: &TransportPlan) -> Result<LambdaReport> {
    verify_lambda_free_targets_with(p0, p1, plan, &[0.3, 0.7])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PlanKind;
    use crate::nets::{grad_scalar, init_network, Architecture};
    use ndarray::array;

    fn snap(t: usize, pts: Array2<f64>) -> Snapshot {
        Snapshot::new(t, pts).unwrap()
    }

    fn exact(m: Array2<f64>) -> TransportPlan {
        TransportPlan::from_matrix(m, PlanKind::Exact, 0, true)
    }

    #[test]
    fn endpoint_without_noise() {
        let p0 = snap(0, array![[1.0, 2.0]]);
        let p1 = snap(1, array![[4.0, 6.0]]);
        let plan = exact(array![[1.0]]);
        let s = build_match_batch(&p0, &p1, &plan, 200, 0.0, 3).unwrap();
        for m in &s {
            assert_eq!(m.v_target, array![3.0, 4.0]);
            let sv = m.t;
            let expect = array![1.0 + 3.0 * sv, 2.0 + 4.0 * sv];
            assert!((&m.xt - &expect).iter().all(|v| v.abs() < 1e-12));
            assert!((0.0..1.0).contains(&m.t));
        }
    }

    #[test]
    fn uniform_rows_give_zero_growth() {
        let p0 = snap(0, array![[0.0], [1.0]]);
        let p1 = snap(1, array![[0.0], [1.0]]);
        let plan = exact(array![[0.5, 0.5], [0.5, 0.5]]);
        let s = build_match_batch(&p0, &p1, &plan, 50, 0.1, 1).unwrap();
        assert!(s.iter().all(|m| m.g_target == 0.0));
    }

    #[test]
    fn doubled_row_gives_log_two() {
        let p0 = snap(0, array![[0.0]]);
        let p1 = snap(1, array![[0.0], [1.0]]);
        let plan = exact(array![[1.0, 1.0]]);
        let s = build_match_batch(&p0, &p1, &plan, 10, 0.0, 1).unwrap();
        assert!(s.iter().all(|m| (m.g_target - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn growth_target_independent_of_noise() {
        let p0 = snap(0, array![[0.0], [2.0]]);
        let p1 = snap(1, array![[0.0], [1.0], [3.0]]);
        let plan = exact(array![[0.9, 0.3, 0.0], [0.1, 0.7, 1.0]]);
        let a = build_match_batch(&p0, &p1, &plan, 100, 0.0, 8).unwrap();
        let b = build_match_batch(&p0, &p1, &plan, 100, 0.5, 8).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!((x.i, x.j), (y.i, y.j));
            assert_eq!(x.g_target, y.g_target);
        }
    }

    #[test]
    fn two_unit_interval_scales_targets() {
        let p0 = snap(0, array![[0.0]]);
        let p1 = snap(2, array![[4.0], [4.0]]);
        let plan = exact(array![[1.0, 1.0]]);
        let s = build_match_batch(&p0, &p1, &plan, 20, 0.0, 2).unwrap();
        for m in s {
            assert_eq!(m.v_target, array![2.0]);
            assert!((m.g_target - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
            assert!((0.0..2.0).contains(&m.t));
        }
    }

    #[test]
    fn zero_nets_single_sample_loss_one() {
        let arch = Architecture {
            input: 3,
            output: 2,
            width: 4,
            depth: 2,
        };
        let v = NetworkParams::zeros(arch);
        let g = NetworkParams::zeros(Architecture { output: 1, ..arch });
        let s = MatchSample {
            i: 0,
            j: 0,
            x0: array![0.0, 0.0],
            x1: array![1.0, 0.0],
            t: 0.3,
            xt: array![0.3, 0.0],
            v_target: array![1.0, 0.0],
            g_target: 0.0,
        };
        assert_eq!(vgfm_loss(&v, &g, &[s]).unwrap(), 1.0);
    }

    #[test]
    fn tape_loss_matches_plain_and_finite_differences() {
        let v = init_network(2, 2, 3, 4, 1).unwrap();
        let g = init_network(2, 1, 3, 4, 2).unwrap();
        let p0 = snap(0, array![[0.0, 0.1], [1.0, -0.5], [0.3, 0.3]]);
        let p1 = snap(1, array![[0.5, 0.5], [1.5, 0.0]]);
        let plan = exact(array![[0.6, 0.1], [0.2, 0.7], [0.2, 0.2]]);
        let samples = build_match_batch(&p0, &p1, &plan, 16, 0.05, 4).unwrap();
        let batch = MatchBatch::from_samples(&samples).unwrap();
        let (val, grads) = grad_scalar(&[&v, &g], |t, nv| Ok(vgfm_loss_tape(t, &nv[0], &nv[1], &batch)?.total)).unwrap();
        assert!((val - vgfm_loss(&v, &g, &samples).unwrap()).abs() < 1e-12);

        for (net, which) in [(&v, 0usize), (&g, 1usize)] {
            let flat = net.flatten();
            let gf = grads[which].flatten();
            let h = 1e-5;
            for k in 0..flat.len() {
                let eval = |delta: f64| {
                    let mut f = flat.clone();
                    f[k] += delta;
                    let q = NetworkParams::unflatten(net.architecture(), &f).unwrap();
                    if which == 0 {
                        vgfm_loss(&q, &g, &samples).unwrap()
                    } else {
                        vgfm_loss(&v, &q, &samples).unwrap()
                    }
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - gf[k]).abs();
                assert!(err < 1e-9 || err / fd.abs().max(gf[k].abs()) < 1e-4, "net {which} coord {k}: {fd} vs {}", gf[k]);
            }
        }
    }

    #[test]
    fn loss_nonnegative() {
        let v = init_network(1, 1, 3, 8, 1).unwrap();
        let g = init_network(1, 1, 3, 8, 2).unwrap();
        let p0 = snap(0, array![[0.0], [1.0]]);
        let plan = exact(array![[0.5, 0.5], [0.5, 0.5]]);
        let s = build_match_batch(&p0, &snap(1, p0.points.clone()), &plan, 30, 0.1, 0).unwrap();
        assert!(vgfm_loss(&v, &g, &s).unwrap() >= 0.0);
    }

    #[test]
    fn lambda_free_targets() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p0 = snap(0, Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)));
        let p1 = snap(1, Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)));
        let plan = exact(Array2::from_shape_fn((4, 4), |_| rng.random_range(0.05..1.0)));
        let r = verify_lambda_free_targets(&p0, &p1, &plan).unwrap();
        assert!(r.max_discrepancy < 1e-12, "{}", r.max_discrepancy);
        assert!(verify_lambda_free_targets_with(&p0, &p1, &plan, &[0.5, 0.9]).unwrap().max_discrepancy < 1e-12);
    }

    #[test]
    fn plan_shape_checked() {
        let p0 = snap(0, array![[0.0]]);
        let p1 = snap(1, array![[0.0]]);
        let plan = exact(array![[0.5, 0.5]]);
        assert!(matches!(build_match_batch(&p0, &p1, &plan, 1, 0.0, 0), Err(Error::ShapeMismatch(_))));
    }
}
