//! Entropic Sinkhorn solvers.
//!
//! Both solvers iterate on dual potentials `f` (rows) and `g` (columns) with
//! the plan recovered as `pi_ij = exp((f_i + g_j - c_ij) / eps)`. Potentials
//! are stored as an absorbed part plus a log-scaling, and the Gibbs kernel is
//! rebuilt from the absorbed part whenever a log-scaling leaves
//! `[-ABSORB, ABSORB]`. Rows or columns whose kernel sum underflows fall back
//! to an explicit log-sum-exp. Each iteration updates `f` then `g`, so the
//! returned plan satisfies the column constraint to rounding.
//!
//! Semi-relaxed rows use the scaling exponent `kappa = tau / (tau + eps)`,
//! balanced rows use `kappa = 1`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::CostMatrix;
use crate::data::{PlanKind, TransportPlan};
use crate::error::{Error, Result};

const ABSORB: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub max_iter: usize,
    /// Sup-norm change of the log-scalings `f / eps`, `g / eps` between sweeps.
    pub tol: f64,
    /// Warm-start through a geometric sequence of larger epsilons.
    pub eps_scaling: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            max_iter: 5000,
            tol: 1e-9,
            eps_scaling: true,
        }
    }
}

struct Potentials {
    f: Array1<f64>,
    g: Array1<f64>,
    iterations: usize,
    converged: bool,
}

pub(super) fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Generic solver: row targets `log_a` with exponent `kappa`, hard column
/// targets `log_b`.
fn solve(
    cost: ArrayView2<f64>,
    log_a: ArrayView1<f64>,
    log_b: ArrayView1<f64>,
    eps: f64,
    tau: Option<f64>,
    opts: &SinkhornOptions,
) -> Result<Potentials> {
    let (n, m) = cost.dim();
    let kappa_for = |e: f64| tau.map_or(1.0, |t| t / (t + e));
    let cost_t = cost.t().as_standard_layout().into_owned();

    let mut schedule = Vec::new();
    if opts.eps_scaling {
        let cmax = cost.iter().cloned().fold(0.0, f64::max);
        let mut e = cmax;
        while e > 2.0 * eps {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(eps);

    // absorbed potentials (cost units) and log-scalings
    let mut fa = Array1::<f64>::zeros(n);
    let mut ga = Array1::<f64>::zeros(m);
    let mut lu = Array1::<f64>::zeros(n);
    let mut lv = Array1::<f64>::zeros(m);
    let mut kern = Array2::<f64>::zeros((n, m));
    let mut kern_t = Array2::<f64>::zeros((m, n));
    let mut total_iters = 0usize;
    let mut converged = false;
    let mut last_change = f64::INFINITY;

    let rebuild = |fa: &Array1<f64>, ga: &Array1<f64>, e: f64, kern: &mut Array2<f64>, kern_t: &mut Array2<f64>| {
        for i in 0..n {
            let ci = cost.row(i);
            let mut krow = kern.row_mut(i);
            for j in 0..m {
                krow[j] = ((fa[i] + ga[j] - ci[j]) / e).exp();
            }
        }
        kern_t.assign(&kern.t());
    };

    for (stage, &e) in schedule.iter().enumerate() {
        let last_stage = stage + 1 == schedule.len();
        // fold scalings into the potentials before changing epsilon
        let prev_e = if stage == 0 { e } else { schedule[stage - 1] };
        fa.zip_mut_with(&lu, |a, l| *a += prev_e * l);
        ga.zip_mut_with(&lv, |a, l| *a += prev_e * l);
        lu.fill(0.0);
        lv.fill(0.0);
        rebuild(&fa, &ga, e, &mut kern, &mut kern_t);
        let kappa = kappa_for(e);
        let stage_cap = if last_stage { opts.max_iter } else { 100 };
        let stage_tol = if last_stage { opts.tol } else { 1e-3 };
        let mut prev_fe: Array1<f64> = &fa / e + &lu;
        let mut prev_ge: Array1<f64> = &ga / e + &lv;

        for _ in 0..stage_cap {
            total_iters += 1;
            // rows
            let v = lv.mapv(f64::exp);
            let kv = kern.dot(&v);
            for i in 0..n {
                let s = kv[i];
                let log_row = if s > 1e-280 && s.is_finite() {
                    s.ln() - fa[i] / e
                } else {
                    let ci = cost.row(i);
                    log_sum_exp((0..m).map(|j| (ga[j] + e * lv[j] - ci[j]) / e))
                };
                lu[i] = kappa * log_a[i] - kappa * log_row - fa[i] / e;
            }
            // columns
            let u = lu.mapv(f64::exp);
            let ku = kern_t.dot(&u);
            for j in 0..m {
                let s = ku[j];
                let log_col = if s > 1e-280 && s.is_finite() {
                    s.ln() - ga[j] / e
                } else {
                    let cj = cost_t.row(j);
                    log_sum_exp((0..n).map(|i| (fa[i] + e * lu[i] - cj[i]) / e))
                };
                lv[j] = log_b[j] - log_col - ga[j] / e;
            }
            if lu.iter().chain(lv.iter()).any(|x| !x.is_finite()) {
                return Err(Error::SinkhornOverflow(format!(
                    "eps = {e:.3e} after {total_iters} iterations"
                )));
            }

            let fe: Array1<f64> = &fa / e + &lu;
            let ge: Array1<f64> = &ga / e + &lv;
            let change = fe
                .iter()
                .zip(prev_fe.iter())
                .chain(ge.iter().zip(prev_ge.iter()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            prev_fe = fe;
            prev_ge = ge;
            last_change = change;
            if change < stage_tol {
                if last_stage {
                    converged = true;
                }
                break;
            }
            let big = lu.iter().chain(lv.iter()).any(|x| x.abs() > ABSORB);
            if big {
                fa.zip_mut_with(&lu, |a, l| *a += e * l);
                ga.zip_mut_with(&lv, |a, l| *a += e * l);
                lu.fill(0.0);
                lv.fill(0.0);
                rebuild(&fa, &ga, e, &mut kern, &mut kern_t);
            }
        }
    }
    if !converged {
        log::debug!("sinkhorn stopped after {total_iters} iterations (last change {last_change:.3e})");
    }
    let f = &fa + &(eps * &lu);
    let g = &ga + &(eps * &lv);
    Ok(Potentials {
        f,
        g,
        iterations: total_iters,
        converged,
    })
}

fn plan_from_potentials(cost: ArrayView2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Array2<f64> {
    let mut pi = Array2::zeros(cost.dim());
    for ((i, j), p) in pi.indexed_iter_mut() {
        *p = ((f[i] + g[j] - cost[[i, j]]) / eps).exp();
    }
    pi
}

pub(super) fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn warn_zero_rows(pi: &Array2<f64>) {
    let zero: Vec<usize> = pi
        .sum_axis(Axis(1))
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !zero.is_empty() {
        log::warn!("transport plan has {} all-zero rows (first: {})", zero.len(), zero[0]);
    }
}

/// Minimizes `<c, pi> + eps H(pi) + tau KL(pi 1_m || 1_n)` subject to
/// `pi^T 1_n = 1_m`.
pub fn semi_relaxed_sinkhorn(cost: &CostMatrix, eps: f64, tau: f64, opts: &SinkhornOptions) -> Result<TransportPlan> {
    check_positive("eps", eps)?;
    check_positive("tau", tau)?;
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    let zeros_n = Array1::zeros(n);
    let zeros_m = Array1::zeros(m);
    let pot = solve(cost.entries.view(), zeros_n.view(), zeros_m.view(), eps, Some(tau), opts)?;
    let pi = plan_from_potentials(cost.entries.view(), &pot.f, &pot.g, eps);
    warn_zero_rows(&pi);
    Ok(TransportPlan::from_matrix(
        pi,
        PlanKind::SemiRelaxed { epsilon: eps, tau },
        pot.iterations,
        pot.converged,
    ))
}

/// Entropic problem with row marginal `(m/n) 1_n` and column marginal `1_m`,
/// which is the `tau -> inf` limit of [`semi_relaxed_sinkhorn`] when `n = m`.
pub fn balanced_sinkhorn(cost: &CostMatrix, eps: f64, opts: &SinkhornOptions) -> Result<TransportPlan> {
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    let a = Array1::from_elem(n, m as f64 / n as f64);
    let b = Array1::ones(m);
    balanced_sinkhorn_weighted(a.view(), b.view(), cost, eps, opts)
}

/// Entropic problem with arbitrary positive marginals of equal mass.
pub fn balanced_sinkhorn_weighted(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    cost: &CostMatrix,
    eps: f64,
    opts: &SinkhornOptions,
) -> Result<TransportPlan> {
    check_positive("eps", eps)?;
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "marginals {}x{} for cost {n}x{m}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidArgument("marginals must be positive".into()));
    }
    let (sa, sb) = (a.sum(), b.sum());
    if (sa - sb).abs() > 1e-9 * sa.max(sb) {
        return Err(Error::Infeasible(format!("marginal masses differ: {sa} vs {sb}")));
    }
    let pot = solve(cost.entries.view(), a.mapv(f64::ln).view(), b.mapv(f64::ln).view(), eps, None, opts)?;
    let pi = plan_from_potentials(cost.entries.view(), &pot.f, &pot.g, eps);
    Ok(TransportPlan::from_matrix(
        pi,
        PlanKind::Balanced { epsilon: eps },
        pot.iterations,
        pot.converged,
    ))
}

/// `<c, pi> + eps sum pi (log pi - 1) + tau sum_i (r_i log r_i - r_i + 1)`
/// with `r = pi 1_m`; `0 log 0 = 0`.
pub fn semi_relaxed_objective(cost: &Array2<f64>, pi: &Array2<f64>, eps: f64, tau: f64) -> f64 {
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let transport = (cost * pi).sum();
    let entropy: f64 = pi.iter().map(|&p| xlogx(p) - p).sum();
    let kl: f64 = pi.sum_axis(Axis(1)).iter().map(|&r| xlogx(r) - r + 1.0).sum();
    transport + eps * entropy + tau * kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn cm(a: Array2<f64>) -> CostMatrix {
        CostMatrix::new(a).unwrap()
    }

    #[test]
    fn single_entry_plan_is_one() {
        let p = semi_relaxed_sinkhorn(&cm(array![[3.7]]), 0.1, 2.0, &SinkhornOptions::default()).unwrap();
        assert!((p.matrix[[0, 0]] - 1.0).abs() < 1e-12);
        let b = balanced_sinkhorn(&cm(array![[3.7]]), 0.1, &SinkhornOptions::default()).unwrap();
        assert!((b.matrix[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        let p = semi_relaxed_sinkhorn(&cm(Array2::from_elem((4, 4), 0.7)), 0.05, 1.0, &SinkhornOptions::default())
            .unwrap();
        for v in p.matrix.iter() {
            assert!((v - 0.25).abs() < 1e-9, "{v}");
        }
        assert!(p.converged);
    }

    #[test]
    fn column_constraint_is_hard() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(1..9);
            let m = rng.random_range(1..9);
            let c = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..3.0));
            let p = semi_relaxed_sinkhorn(&cm(c), 0.02, rng.random_range(0.1..10.0), &SinkhornOptions::default())
                .unwrap();
            p.validate(1e-6).unwrap();
        }
    }

    #[test]
    fn balanced_diagonal_optimum() {
        let mut c = Array2::from_elem((5, 5), 10.0);
        for i in 0..5 {
            c[[i, i]] = 0.0;
        }
        let p = balanced_sinkhorn(&cm(c), 0.1, &SinkhornOptions::default()).unwrap();
        let off: f64 = p
            .matrix
            .indexed_iter()
            .filter(|((i, j), _)| i != j)
            .map(|(_, v)| *v)
            .sum();
        assert!(off < 1e-3, "{off}");
        for v in p.row_marginal.iter().chain(p.col_marginal.iter()) {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn small_eps_stays_finite() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let c = Array2::from_shape_fn((30, 40), |_| rng.random_range(0.0..10.0));
        let p = semi_relaxed_sinkhorn(&cm(c), 1e-3, 10.0, &SinkhornOptions::default()).unwrap();
        assert!(p.matrix.iter().all(|v| v.is_finite()));
        p.validate(1e-6).unwrap();
    }

    #[test]
    fn rejects_bad_parameters() {
        let c = cm(array![[1.0]]);
        let o = SinkhornOptions::default();
        assert!(semi_relaxed_sinkhorn(&c, 0.0, 1.0, &o).is_err());
        assert!(semi_relaxed_sinkhorn(&c, 0.1, -1.0, &o).is_err());
    }

    #[test]
    fn row_marginal_mass_equals_column_count() {
        let c = cm(array![[0.0, 1.0, 4.0], [4.0, 1.0, 0.0]]);
        let p = semi_relaxed_sinkhorn(&c, 0.1, 1.0, &SinkhornOptions::default()).unwrap();
        assert!((p.row_marginal.sum() - 3.0).abs() < 1e-9);
    }
}
