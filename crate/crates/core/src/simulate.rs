//! Forward Euler integration of `dx/dt = v(x, t)`, `d log w/dt = g(x, t)`,
//! either with plain arrays or unrolled on a tape.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::TrajectoryBundle;
use crate::error::{Error, Result};
use crate::nets::{NetVars, NetworkParams, Tape, Var};
use crate::ot::wasserstein1;

pub const DEFAULT_STEPS_PER_UNIT: usize = 20;

/// Number of steps and step length covering `[t0, t1]` at roughly
/// `steps_per_unit` steps per unit time.
pub fn step_grid(t0: f64, t1: f64, steps_per_unit: usize) -> Result<(usize, f64)> {
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidArgument(format!("need t_end > t_start, got [{t0}, {t1}]")));
    }
    if steps_per_unit == 0 {
        return Err(Error::InvalidArgument("steps_per_unit must be at least 1".into()));
    }
    let n = (((t1 - t0) * steps_per_unit as f64).round() as usize).max(1);
    Ok((n, (t1 - t0) / n as f64))
}

/// Euler integration for arbitrary fields. `v` maps `(N x d, t)` to `N x d`
/// and `g` maps `(N x d, t)` to a length-`N` log-rate. When `keep_path` is
/// false only the start and end states are stored.
pub fn integrate_fields<V, G>(
    start: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    steps_per_unit: usize,
    keep_path: bool,
    mut v: V,
    mut g: G,
) -> Result<TrajectoryBundle>
where
    V: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
    G: FnMut(ArrayView2<f64>, f64) -> Result<Array1<f64>>,
{
    let (n, _) = step_grid(t_start, t_end, steps_per_unit)?;
    euler_steps(start, t_start, t_end, n, keep_path, &mut v, &mut g)
}

fn euler_steps<V, G>(
    start: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    n: usize,
    keep_path: bool,
    v: &mut V,
    g: &mut G,
) -> Result<TrajectoryBundle>
where
    V: FnMut(ArrayView2<f64>, f64) -> Result<Array2<f64>>,
    G: FnMut(ArrayView2<f64>, f64) -> Result<Array1<f64>>,
{
    let h = (t_end - t_start) / n as f64;
    let (p, d) = start.dim();
    if start.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("start points".into()));
    }
    let kept = if keep_path { n + 1 } else { 2 };
    let mut positions = Array3::zeros((p, kept, d));
    let mut log_weights = Array2::zeros((p, kept));
    let mut times = Vec::with_capacity(kept);
    positions.index_axis_mut(Axis(1), 0).assign(&start);
    times.push(t_start);

    let mut x = start.to_owned();
    let mut lw = Array1::<f64>::zeros(p);
    for k in 0..n {
        let t = t_start + k as f64 * h;
        let dv = v(x.view(), t)?;
        let dg = g(x.view(), t)?;
        if dv.dim() != (p, d) || dg.len() != p {
            return Err(Error::ShapeMismatch("field output has the wrong shape".into()));
        }
        x.scaled_add(h, &dv);
        lw.scaled_add(h, &dg);
        if x.iter().chain(lw.iter()).any(|v| !v.is_finite()) {
            return Err(Error::IntegrationBlowup { step: k + 1 });
        }
        let slot = if keep_path {
            k + 1
        } else if k + 1 == n {
            1
        } else {
            continue;
        };
        positions.index_axis_mut(Axis(1), slot).assign(&x);
        log_weights.column_mut(slot).assign(&lw);
        times.push(if k + 1 == n { t_end } else { t + h });
    }
    Ok(TrajectoryBundle {
        times,
        positions,
        log_weights,
    })
}

fn check_pair(v: &NetworkParams, g: &NetworkParams, d: usize) -> Result<()> {
    let (av, ag) = (v.architecture(), g.architecture());
    if av.input != d + 1 || av.output != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: av.output,
        });
    }
    if ag.input != d + 1 || ag.output != 1 {
        return Err(Error::ShapeMismatch(format!(
            "growth network maps {} -> {}, expected {} -> 1",
            ag.input,
            ag.output,
            d + 1
        )));
    }
    Ok(())
}

/// Integrates learned networks from `start`, keeping every grid time.
pub fn integrate(
    v: &NetworkParams,
    g: &NetworkParams,
    start: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    steps_per_unit: usize,
) -> Result<TrajectoryBundle> {
    check_pair(v, g, start.ncols())?;
    integrate_fields(
        start,
        t_start,
        t_end,
        steps_per_unit,
        true,
        |x, t| v.forward_batch(x, t),
        |x, t| Ok(g.forward_batch(x, t)?.index_axis_move(Axis(1), 0)),
    )
}

/// Final positions and log-weights only.
pub fn integrate_final(
    v: &NetworkParams,
    g: &NetworkParams,
    start: ArrayView2<f64>,
    t_start: f64,
    t_end: f64,
    steps_per_unit: usize,
) -> Result<(Array2<f64>, Array1<f64>)> {
    check_pair(v, g, start.ncols())?;
    let b = integrate_fields(
        start,
        t_start,
        t_end,
        steps_per_unit,
        false,
        |x, t| v.forward_batch(x, t),
        |x, t| Ok(g.forward_batch(x, t)?.index_axis_move(Axis(1), 0)),
    )?;
    Ok((b.final_positions().to_owned(), b.log_weights.column(1).to_owned()))
}

/// The same Euler scheme recorded on a tape. Returns the final positions
/// (`N x d`) and log-weights (`N x 1`).
pub fn integrate_tape(
    tape: &mut Tape,
    v: &NetVars,
    g: &NetVars,
    start: Array2<f64>,
    t_start: f64,
    t_end: f64,
    steps_per_unit: usize,
) -> Result<(Var, Var)> {
    let (n, h) = step_grid(t_start, t_end, steps_per_unit)?;
    let p = start.nrows();
    let mut x = tape.leaf(start);
    let mut lw = tape.leaf(Array2::zeros((p, 1)));
    for k in 0..n {
        let t = t_start + k as f64 * h;
        let dv = v.forward_at(tape, x, t)?;
        let dg = g.forward_at(tape, x, t)?;
        let dv = tape.scale(dv, h)?;
        let dg = tape.scale(dg, h)?;
        x = tape.add(x, dv)?;
        lw = tape.add(lw, dg)?;
        if tape.value(x).iter().chain(tape.value(lw).iter()).any(|v| !v.is_finite()) {
            return Err(Error::IntegrationBlowup { step: k + 1 });
        }
    }
    Ok((x, lw))
}

/// Gap between the endpoint of the two-period system (growth only on
/// `[0, lambda]`, then transport only) and the single joint system with
/// `v~_t = (1 - lambda) v_{(1 - lambda) t + lambda}` and
/// `g~_t(x) = lambda g_{lambda t}(x_0(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReparamGap {
    /// Weighted W1 between the normalized final ensembles.
    pub w1_gap: f64,
    /// `|M_two - M_joint| / M_two` for total masses.
    pub mass_gap: f64,
}

/// Integrates both systems from the same particles with `steps` Euler steps
/// over the unit interval. `v` and `g` take `(N x d, t)`.
///
/// The joint growth term needs the preimage of the current position under the
/// joint flow; particles carry their start position, so the preimage is exact.
pub fn reparam_equivalence_check<V, G>(v: V, g: G, particles: ArrayView2<f64>, lambda: f64, steps: usize) -> Result<ReparamGap>
where
    V: Fn(ArrayView2<f64>, f64) -> Array2<f64>,
    G: Fn(ArrayView2<f64>, f64) -> Array1<f64>,
{
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument("need at least 2 steps".into()));
    }
    let (p, d) = particles.dim();
    let zero_v = Array2::<f64>::zeros((p, d));
    let zero_g = Array1::<f64>::zeros(p);

    // two-period: the growth phase gets its share of the steps
    let n_grow = ((lambda * steps as f64).round() as usize).clamp(1, steps - 1);
    let grow = euler_steps(
        particles,
        0.0,
        lambda,
        n_grow,
        false,
        &mut |_, _| Ok(zero_v.clone()),
        &mut |x, t| Ok(g(x, t)),
    )?;
    let lw_two = grow.log_weights.column(1).to_owned();
    let mv = euler_steps(
        particles,
        lambda,
        1.0,
        steps - n_grow,
        false,
        &mut |x, t| Ok(v(x, t)),
        &mut |_, _| Ok(zero_g.clone()),
    )?;
    let x_two = mv.final_positions().to_owned();

    let x0 = particles.to_owned();
    let joint = euler_steps(
        particles,
        0.0,
        1.0,
        steps,
        false,
        &mut |x, t| Ok(v(x, (1.0 - lambda) * t + lambda) * (1.0 - lambda)),
        &mut |_, t| Ok(g(x0.view(), lambda * t) * lambda),
    )?;
    let x_joint = joint.final_positions().to_owned();
    let lw_joint = joint.log_weights.column(1).to_owned();

    let w_two = lw_two.mapv(f64::exp);
    let w_joint = lw_joint.mapv(f64::exp);
    let (m_two, m_joint) = (w_two.sum(), w_joint.sum());
    if !(m_two > 0.0 && m_joint > 0.0) || !m_two.is_finite() || !m_joint.is_finite() {
        return Err(Error::NonFinite("total mass".into()));
    }
    let w1 = wasserstein1(x_two.view(), (&w_two / m_two).view(), x_joint.view(), (&w_joint / m_joint).view())?;
    Ok(ReparamGap {
        w1_gap: w1.value,
        mass_gap: (m_two - m_joint).abs() / m_two,
    })
}

/// The reference instance: `p0 = N(2, 0.5^2)` in one dimension, `v_t(x) = 2t`,
/// `g_t(x) = -log(x + 1) + t^3`.
pub fn reparam_reference_check(n_particles: usize, steps: usize, lambda: f64, seed: u64) -> Result<ReparamGap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(2.0, 0.5).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let pts = Array2::from_shape_fn((n_particles, 1), |_| normal.sample(&mut rng));
    reparam_equivalence_check(
        |x, t| Array2::from_elem(x.raw_dim(), 2.0 * t),
        |x, t| x.column(0).mapv(|v| -(v + 1.0).ln() + t * t * t),
        pts.view(),
        lambda,
        steps,
    )
}
