//! Debiased entropic transport `S_eps(a, b) = OT(a, b) - OT(a, a)/2 - OT(b, b)/2`
//! with Euclidean ground cost.
//!
//! `OT(a, b) = min <C, pi> + eps KL(pi | a x b)` over couplings of `a` and `b`.
//! Potentials returned by the generic solver live in the `exp((f + g - C)/eps)`
//! parameterization; subtracting `eps log a` converts them to the
//! `a x b`-relative ones whose values are the weight gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::sinkhorn::{check_positive, log_sum_exp};
use super::euclidean_cost;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceOptions {
    pub eps: f64,
    /// Iteration cap per epsilon stage.
    pub max_iter: usize,
    /// L1 violation of the coupling marginals at which a solve stops.
    pub tol: f64,
    pub eps_scaling: bool,
}

impl DivergenceOptions {
    pub fn new(eps: f64) -> Self {
        DivergenceOptions {
            eps,
            max_iter: 200_000,
            tol: 1e-6,
            eps_scaling: true,
        }
    }
}

/// Value and first-order derivatives of the divergence.
#[derive(Debug, Clone)]
pub struct DivergenceGrad {
    pub value: f64,
    pub grad_a_points: Array2<f64>,
    pub grad_a_weights: Array1<f64>,
    pub grad_b_points: Array2<f64>,
    pub grad_b_weights: Array1<f64>,
}

struct Term {
    value: f64,
    // a x b-relative potentials on the full (unfiltered) supports
    f: Array1<f64>,
    g: Array1<f64>,
    // plan over the positive-weight supports, with index maps
    plan: Array2<f64>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn positive(w: ArrayView1<f64>) -> Vec<usize> {
    (0..w.len()).filter(|&i| w[i] > 0.0).collect()
}

fn select(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(ndarray::Axis(0), idx)
}

/// `OT(a, b)` in the log domain with epsilon-scaling; every stage runs until
/// the marginal violation is small. Cross terms use alternating updates.
/// Self terms (`symmetric`) use the averaged map `p <- (p + T(p)) / 2`,
/// which keeps `f = g` and avoids the slow drift alternating updates show
/// on nearly diagonal couplings.
fn ot_term(
    x: ArrayView2<f64>,
    a: ArrayView1<f64>,
    y: ArrayView2<f64>,
    b: ArrayView1<f64>,
    symmetric: bool,
    opts: &DivergenceOptions,
) -> Result<Term> {
    let eps = opts.eps;
    let rows = positive(a);
    let cols = positive(b);
    let xs = select(x, &rows);
    let ys = select(y, &cols);
    let la: Array1<f64> = rows.iter().map(|&i| a[i].ln()).collect();
    let lb: Array1<f64> = cols.iter().map(|&j| b[j].ln()).collect();
    let cost = euclidean_cost(xs.view(), ys.view())?;
    let c = &cost.entries;
    let ct = c.t().as_standard_layout().into_owned();
    let (n, m) = c.dim();

    // T(p)_i = -e LSE_k (lw_k + (p_k - c_ik) / e)
    let transform = |p: &Array1<f64>, lw: &Array1<f64>, cm: &Array2<f64>, e: f64| -> Array1<f64> {
        cm.outer_iter()
            .map(|ci| -e * log_sum_exp((0..p.len()).map(|k| lw[k] + (p[k] - ci[k]) / e)))
            .collect()
    };

    let mut schedule = Vec::new();
    if opts.eps_scaling {
        let mut e = cost.max();
        while e > 2.0 * eps {
            schedule.push(e);
            e *= 0.5;
        }
    }
    schedule.push(eps);

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    for (stage, &e) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        let tol = if last { opts.tol } else { opts.tol.max(1e-4) };
        err = f64::INFINITY;
        for k in 0..opts.max_iter {
            iterations += 1;
            if symmetric {
                let t = transform(&f, &la, c, e);
                f = 0.5 * (&f + &t);
                g = f.clone();
            } else {
                f = transform(&g, &lb, c, e);
                g = transform(&f, &la, &ct, e);
            }
            if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
                return Err(Error::SinkhornOverflow(format!("divergence term at eps = {e:.3e}")));
            }
            if k % 10 == 9 {
                err = marginal_error(c, &f, &g, &la, &lb, e);
                if err < tol {
                    break;
                }
            }
        }
        if !(err < tol) {
            return Err(Error::NotConverged {
                iterations,
                last_change: err,
            });
        }
    }
    log::trace!("divergence term converged in {iterations} iterations (marginal error {err:.2e})");
    Ok(finish_term(x, a, y, b, c, f, g, rows, cols, eps))
}

fn marginal_error(c: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, la: &Array1<f64>, lb: &Array1<f64>, e: f64) -> f64 {
    let (n, m) = c.dim();
    let mut rows = vec![0.0; n];
    let mut cols = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let p = (la[i] + lb[j] + (f[i] + g[j] - c[[i, j]]) / e).exp();
            rows[i] += p;
            cols[j] += p;
        }
    }
    rows.iter().zip(la.iter()).map(|(r, l)| (r - l.exp()).abs()).sum::<f64>()
        + cols.iter().zip(lb.iter()).map(|(r, l)| (r - l.exp()).abs()).sum::<f64>()
}

/// Assembles a term from converged `a x b`-relative potentials on the
/// positive-weight supports.
#[allow(clippy::too_many_arguments)]
fn finish_term(
    x: ArrayView2<f64>,
    a: ArrayView1<f64>,
    y: ArrayView2<f64>,
    b: ArrayView1<f64>,
    cost: &Array2<f64>,
    ff: Array1<f64>,
    gf: Array1<f64>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    eps: f64,
) -> Term {
    let mut plan = Array2::zeros(cost.dim());
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p = a[rows[i]] * b[cols[j]] * ((ff[i] + gf[j] - cost[[i, j]]) / eps).exp();
    }
    let mass = plan.sum();
    let value = rows.iter().zip(ff.iter()).map(|(&i, v)| a[i] * v).sum::<f64>()
        + cols.iter().zip(gf.iter()).map(|(&j, v)| b[j] * v).sum::<f64>()
        - eps * (mass - a.sum() * b.sum());

    // soft c-transforms extend the potentials to zero-weight points
    let c_transform = |p: ArrayView1<f64>, pts: ArrayView2<f64>, w: ArrayView1<f64>, pot: &Array1<f64>, idx: &[usize]| -> f64 {
        let terms: Vec<f64> = idx
            .iter()
            .zip(pot.iter())
            .map(|(&k, &pk)| {
                let d: f64 = p.iter().zip(pts.row(k).iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                w[k].ln() + (pk - d) / eps
            })
            .collect();
        -eps * log_sum_exp(terms.iter().cloned())
    };
    let f_full: Array1<f64> = (0..x.nrows()).map(|i| c_transform(x.row(i), y, b, &gf, &cols)).collect();
    let g_full: Array1<f64> = (0..y.nrows()).map(|j| c_transform(y.row(j), x, a, &ff, &rows)).collect();
    Term {
        value,
        f: f_full,
        g: g_full,
        plan,
        rows,
        cols,
    }
}

fn check(x: ArrayView2<f64>, a: ArrayView1<f64>, name: &str) -> Result<()> {
    if x.nrows() != a.len() {
        return Err(Error::ShapeMismatch(format!("{name}: {} points, {} weights", x.nrows(), a.len())));
    }
    if a.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{name}: weights must be finite and nonnegative")));
    }
    let s = a.sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name}: weights sum to {s}, expected 1")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} points")));
    }
    Ok(())
}

fn unit(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    let d = &u - &v;
    let n = d.dot(&d).sqrt();
    if n > 1e-300 {
        d / n
    } else {
        Array1::zeros(u.len())
    }
}

/// Accumulates `sum_j plan_ij * d/dx_i |x_i - y_j|` into `out`.
fn cross_point_grad(x: ArrayView2<f64>, y: ArrayView2<f64>, t: &Term, out: &mut Array2<f64>, transpose: bool) {
    for (pi, &i) in t.rows.iter().enumerate() {
        for (pj, &j) in t.cols.iter().enumerate() {
            let p = t.plan[[pi, pj]];
            if p == 0.0 {
                continue;
            }
            if transpose {
                let u = unit(y.row(j), x.row(i));
                out.row_mut(j).scaled_add(p, &u);
            } else {
                let u = unit(x.row(i), y.row(j));
                out.row_mut(i).scaled_add(p, &u);
            }
        }
    }
}

/// Gradient of `OT(a, a) / 2` with respect to the points of `a`.
fn self_point_grad(x: ArrayView2<f64>, t: &Term, out: &mut Array2<f64>) {
    for (pi, &i) in t.rows.iter().enumerate() {
        for (pj, &j) in t.cols.iter().enumerate() {
            if i == j {
                continue;
            }
            let p = 0.5 * (t.plan[[pi, pj]] + t.plan[[pj, pi]]);
            let u = unit(x.row(i), x.row(j));
            out.row_mut(i).scaled_add(-p, &u);
        }
    }
}

/// `S_eps(a, b)` for weighted point sets with weights summing to one.
pub fn sinkhorn_divergence(
    x: ArrayView2<f64>,
    a: ArrayView1<f64>,
    y: ArrayView2<f64>,
    b: ArrayView1<f64>,
    opts: &DivergenceOptions,
) -> Result<f64> {
    check_positive("eps", opts.eps)?;
    check(x, a, "a")?;
    check(y, b, "b")?;
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    let ab = ot_term(x, a, y, b, false, opts)?;
    let aa = ot_term(x, a, x, a, true, opts)?;
    let bb = ot_term(y, b, y, b, true, opts)?;
    Ok(ab.value - 0.5 * aa.value - 0.5 * bb.value)
}

/// Divergence together with gradients in both point sets and weight vectors.
/// Weight gradients are defined up to an additive constant (the simplex
/// tangent space); the returned representatives are the dual potentials.
pub fn sinkhorn_divergence_with_grad(
    x: ArrayView2<f64>,
    a: ArrayView1<f64>,
    y: ArrayView2<f64>,
    b: ArrayView1<f64>,
    opts: &DivergenceOptions,
) -> Result<DivergenceGrad> {
    check_positive("eps", opts.eps)?;
    check(x, a, "a")?;
    check(y, b, "b")?;
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    let ab = ot_term(x, a, y, b, false, opts)?;
    let aa = ot_term(x, a, x, a, true, opts)?;
    let bb = ot_term(y, b, y, b, true, opts)?;
    let value = ab.value - 0.5 * aa.value - 0.5 * bb.value;

    let grad_a_weights = &ab.f - &(0.5 * (&aa.f + &aa.g));
    let grad_b_weights = &ab.g - &(0.5 * (&bb.f + &bb.g));

    let mut gx = Array2::zeros(x.raw_dim());
    cross_point_grad(x, y, &ab, &mut gx, false);
    self_point_grad(x, &aa, &mut gx);
    let mut gy = Array2::zeros(y.raw_dim());
    cross_point_grad(x, y, &ab, &mut gy, true);
    self_point_grad(y, &bb, &mut gy);

    Ok(DivergenceGrad {
        value,
        grad_a_points: gx,
        grad_a_weights,
        grad_b_points: gy,
        grad_b_weights,
    })
}
