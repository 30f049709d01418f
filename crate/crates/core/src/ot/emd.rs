//! Exact (unregularized) transport by the primal network simplex method.
//!
//! The bipartite transportation graph has one arc per `(i, j)` pair plus one
//! artificial arc per node to an extra root. The spanning tree is stored with
//! parent / thread / successor-count arrays so that pivots cost time
//! proportional to the subtree they touch, and entering arcs are chosen by
//! block search over the arc list. Uncapacitated arcs mean every arc outside
//! the tree sits at its lower bound.

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::{euclidean_cost, CostMatrix};
use crate::data::{PlanKind, TransportPlan};
use crate::error::{Error, Result};

const INVALID: usize = usize::MAX;
const STATE_TREE: i8 = 0;
const STATE_LOWER: i8 = 1;
const DIR_UP: i8 = 1;
const DIR_DOWN: i8 = -1;

struct NetworkSimplex<'a> {
    n: usize,
    m: usize,
    node_num: usize,
    arc_num: usize,
    cost: &'a Array2<f64>,
    art_cost: f64,
    // artificial arcs: source/target/cost stored explicitly
    art_source: Vec<usize>,
    art_target: Vec<usize>,
    flow: Vec<f64>,
    state: Vec<i8>,
    pi: Vec<f64>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    thread: Vec<usize>,
    rev_thread: Vec<usize>,
    succ_num: Vec<usize>,
    last_succ: Vec<usize>,
    pred_dir: Vec<i8>,
    dirty_revs: Vec<usize>,
    // pivot scratch
    in_arc: usize,
    join: usize,
    u_in: usize,
    v_in: usize,
    u_out: usize,
    delta: f64,
    next_arc: usize,
    block_size: usize,
    tol: f64,
}

impl<'a> NetworkSimplex<'a> {
    fn new(supply: &[f64], demand: &[f64], cost: &'a Array2<f64>) -> Self {
        let (n, m) = cost.dim();
        let node_num = n + m;
        let arc_num = n * m;
        let root = node_num;
        let cmax = cost.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let art_cost = (cmax + 1.0) * (node_num as f64 + 1.0);
        let all = arc_num + node_num;

        let mut s = NetworkSimplex {
            n,
            m,
            node_num,
            arc_num,
            cost,
            art_cost,
            art_source: vec![0; node_num],
            art_target: vec![0; node_num],
            flow: vec![0.0; all],
            state: vec![STATE_LOWER; all],
            pi: vec![0.0; node_num + 1],
            parent: vec![INVALID; node_num + 1],
            pred: vec![INVALID; node_num + 1],
            thread: vec![0; node_num + 1],
            rev_thread: vec![0; node_num + 1],
            succ_num: vec![0; node_num + 1],
            last_succ: vec![0; node_num + 1],
            pred_dir: vec![0; node_num + 1],
            dirty_revs: Vec::new(),
            in_arc: 0,
            join: 0,
            u_in: 0,
            v_in: 0,
            u_out: 0,
            delta: 0.0,
            next_arc: 0,
            block_size: ((arc_num as f64).sqrt().ceil() as usize).max(10),
            tol: 64.0 * f64::EPSILON * (cmax + art_cost),
        };

        s.parent[root] = INVALID;
        s.pred[root] = INVALID;
        s.thread[root] = 0;
        s.rev_thread[0] = root;
        s.succ_num[root] = node_num + 1;
        s.last_succ[root] = root - 1;
        s.pi[root] = 0.0;

        for u in 0..node_num {
            let e = arc_num + u;
            let sup = if u < n { supply[u] } else { -demand[u - n] };
            s.parent[u] = root;
            s.pred[u] = e;
            s.thread[u] = u + 1;
            s.rev_thread[u + 1] = u;
            s.succ_num[u] = 1;
            s.last_succ[u] = u;
            s.state[e] = STATE_TREE;
            if sup >= 0.0 {
                s.pred_dir[u] = DIR_UP;
                s.pi[u] = 0.0;
                s.art_source[u] = u;
                s.art_target[u] = root;
                s.flow[e] = sup;
            } else {
                s.pred_dir[u] = DIR_DOWN;
                s.pi[u] = art_cost;
                s.art_source[u] = root;
                s.art_target[u] = u;
                s.flow[e] = -sup;
            }
        }
        s
    }

    #[inline]
    fn source(&self, e: usize) -> usize {
        if e < self.arc_num {
            e / self.m
        } else {
            self.art_source[e - self.arc_num]
        }
    }

    #[inline]
    fn target(&self, e: usize) -> usize {
        if e < self.arc_num {
            self.n + e % self.m
        } else {
            self.art_target[e - self.arc_num]
        }
    }

    #[inline]
    fn arc_cost(&self, e: usize) -> f64 {
        if e < self.arc_num {
            self.cost.as_slice().map_or_else(|| self.cost[[e / self.m, e % self.m]], |s| s[e])
        } else if self.art_source[e - self.arc_num] == self.node_num {
            self.art_cost
        } else {
            0.0
        }
    }

    /// Block search pivot rule over real arcs.
    fn find_entering_arc(&mut self) -> bool {
        let mut min = -self.tol;
        let mut found = false;
        let mut cnt = self.block_size;
        let total = self.arc_num;
        let m = self.m;
        let n = self.n;
        let cs = self.cost.as_slice();
        let mut e = self.next_arc;
        for _ in 0..total {
            if self.state[e] == STATE_LOWER {
                let i = e / m;
                let j = e % m;
                let c = match cs {
                    Some(s) => s[e],
                    None => self.cost[[i, j]],
                };
                let rc = c + self.pi[i] - self.pi[n + j];
                if rc < min {
                    min = rc;
                    self.in_arc = e;
                    found = true;
                }
            }
            e += 1;
            if e == total {
                e = 0;
            }
            cnt -= 1;
            if cnt == 0 {
                if found {
                    self.next_arc = e;
                    return true;
                }
                cnt = self.block_size;
            }
        }
        if found {
            self.next_arc = e;
        }
        found
    }

    fn find_join_node(&mut self) {
        let mut u = self.source(self.in_arc);
        let mut v = self.target(self.in_arc);
        while u != v {
            if self.succ_num[u] < self.succ_num[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        self.join = u;
    }

    /// Returns false if the cycle is unbounded (cannot happen for balanced
    /// supplies).
    fn find_leaving_arc(&mut self) -> bool {
        // in_arc is always at its lower bound
        let first = self.source(self.in_arc);
        let second = self.target(self.in_arc);
        self.delta = f64::INFINITY;
        let mut result = 0;
        let mut u = first;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_DOWN { f64::INFINITY } else { self.flow[e] };
            if d < self.delta {
                self.delta = d;
                self.u_out = u;
                result = 1;
            }
            u = self.parent[u];
        }
        u = second;
        while u != self.join {
            let e = self.pred[u];
            let d = if self.pred_dir[u] == DIR_UP { f64::INFINITY } else { self.flow[e] };
            if d <= self.delta {
                self.delta = d;
                self.u_out = u;
                result = 2;
            }
            u = self.parent[u];
        }
        if result == 1 {
            self.u_in = first;
            self.v_in = second;
        } else {
            self.u_in = second;
            self.v_in = first;
        }
        result != 0
    }

    fn change_flow(&mut self) {
        let val = self.delta;
        if val > 0.0 {
            self.flow[self.in_arc] += val;
            let mut u = self.source(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] -= f64::from(self.pred_dir[u]) * val;
                u = self.parent[u];
            }
            u = self.target(self.in_arc);
            while u != self.join {
                let e = self.pred[u];
                self.flow[e] += f64::from(self.pred_dir[u]) * val;
                u = self.parent[u];
            }
        }
        self.state[self.in_arc] = STATE_TREE;
        let out = self.pred[self.u_out];
        self.flow[out] = 0.0;
        self.state[out] = STATE_LOWER;
    }

    fn update_tree_structure(&mut self) {
        let u_in = self.u_in;
        let v_in = self.v_in;
        let u_out = self.u_out;
        let join = self.join;
        let old_rev_thread = self.rev_thread[u_out];
        let old_succ_num = self.succ_num[u_out];
        let old_last_succ = self.last_succ[u_out];
        let v_out = self.parent[u_out];

        if u_in == u_out {
            self.parent[u_in] = v_in;
            self.pred[u_in] = self.in_arc;
            self.pred_dir[u_in] = if u_in == self.source(self.in_arc) { DIR_UP } else { DIR_DOWN };

            if self.thread[v_in] != u_out {
                let mut after = self.thread[old_last_succ];
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
                after = self.thread[v_in];
                self.thread[v_in] = u_out;
                self.rev_thread[u_out] = v_in;
                self.thread[old_last_succ] = after;
                self.rev_thread[after] = old_last_succ;
            }
        } else {
            let thread_continue = if old_rev_thread == v_in {
                self.thread[old_last_succ]
            } else {
                self.thread[v_in]
            };

            let mut stem = u_in;
            let mut par_stem = v_in;
            let mut last = self.last_succ[u_in];
            let mut after = self.thread[last];
            self.thread[v_in] = u_in;
            self.dirty_revs.clear();
            self.dirty_revs.push(v_in);
            while stem != u_out {
                let next_stem = self.parent[stem];
                self.thread[last] = next_stem;
                self.dirty_revs.push(last);

                let before = self.rev_thread[stem];
                self.thread[before] = after;
                self.rev_thread[after] = before;

                self.parent[stem] = par_stem;
                par_stem = stem;
                stem = next_stem;

                last = if self.last_succ[stem] == self.last_succ[par_stem] {
                    self.rev_thread[par_stem]
                } else {
                    self.last_succ[stem]
                };
                after = self.thread[last];
            }
            self.parent[u_out] = par_stem;
            self.thread[last] = thread_continue;
            self.rev_thread[thread_continue] = last;
            self.last_succ[u_out] = last;

            if old_rev_thread != v_in {
                self.thread[old_rev_thread] = after;
                self.rev_thread[after] = old_rev_thread;
            }

            for k in 0..self.dirty_revs.len() {
                let u = self.dirty_revs[k];
                let t = self.thread[u];
                self.rev_thread[t] = u;
            }

            let mut tmp_sc = 0usize;
            let tmp_ls = self.last_succ[u_out];
            let mut u = u_out;
            let mut p = self.parent[u];
            while u != u_in {
                self.pred[u] = self.pred[p];
                self.pred_dir[u] = -self.pred_dir[p];
                // succ_num[u] - succ_num[p] is negative; accumulate in wrapping arithmetic
                tmp_sc = tmp_sc.wrapping_add(self.succ_num[u]).wrapping_sub(self.succ_num[p]);
                self.succ_num[u] = tmp_sc;
                self.last_succ[p] = tmp_ls;
                u = p;
                p = self.parent[u];
            }
            self.pred[u_in] = self.in_arc;
            self.pred_dir[u_in] = if u_in == self.source(self.in_arc) { DIR_UP } else { DIR_DOWN };
            self.succ_num[u_in] = old_succ_num;
        }

        let up_limit_out = if self.last_succ[join] == v_in { join } else { INVALID };
        let last_succ_out = self.last_succ[u_out];
        let mut u = v_in;
        while u != INVALID && self.last_succ[u] == v_in {
            self.last_succ[u] = last_succ_out;
            u = self.parent[u];
        }

        if join != old_rev_thread && v_in != old_rev_thread {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = old_rev_thread;
                u = self.parent[u];
            }
        } else if last_succ_out != old_last_succ {
            let mut u = v_out;
            while u != up_limit_out && self.last_succ[u] == old_last_succ {
                self.last_succ[u] = last_succ_out;
                u = self.parent[u];
            }
        }

        let mut u = v_in;
        while u != join {
            self.succ_num[u] += old_succ_num;
            u = self.parent[u];
        }
        let mut u = v_out;
        while u != join {
            self.succ_num[u] -= old_succ_num;
            u = self.parent[u];
        }
    }

    fn update_potential(&mut self) {
        let u_in = self.u_in;
        let sigma = self.pi[self.v_in] - self.pi[u_in] - f64::from(self.pred_dir[u_in]) * self.arc_cost(self.in_arc);
        let end = self.thread[self.last_succ[u_in]];
        let mut u = u_in;
        while u != end {
            self.pi[u] += sigma;
            u = self.thread[u];
        }
    }

    fn run(&mut self) -> Result<usize> {
        let mut pivots = 0usize;
        while self.find_entering_arc() {
            self.find_join_node();
            if !self.find_leaving_arc() || !self.delta.is_finite() {
                return Err(Error::Infeasible("unbounded transport cycle".into()));
            }
            self.change_flow();
            self.update_tree_structure();
            self.update_potential();
            pivots += 1;
        }
        let art: f64 = self.flow[self.arc_num..].iter().sum();
        if art > 1e-9 {
            return Err(Error::Infeasible(format!("{art:.3e} mass left on artificial arcs")));
        }
        Ok(pivots)
    }

    fn positive_flows(&self) -> Vec<(usize, usize, f64)> {
        (0..self.arc_num)
            .filter(|&e| self.flow[e] > 0.0)
            .map(|e| (e / self.m, e % self.m, self.flow[e]))
            .collect()
    }
}

fn check_weights(name: &str, w: ArrayView1<f64>) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} is empty")));
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative")));
    }
    Ok(w.sum())
}

fn solve_sparse(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &Array2<f64>) -> Result<Vec<(usize, usize, f64)>> {
    let sa = check_weights("a_weights", a)?;
    let sb = check_weights("b_weights", b)?;
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Infeasible(format!("weight sums differ: {sa} vs {sb}")));
    }
    let (n, m) = cost.dim();
    if a.len() != n || b.len() != m {
        return Err(Error::ShapeMismatch(format!("weights {}x{} for cost {n}x{m}", a.len(), b.len())));
    }
    let cost_std;
    let cost_ref = if cost.is_standard_layout() {
        cost
    } else {
        cost_std = cost.as_standard_layout().into_owned();
        &cost_std
    };
    let mut ns = NetworkSimplex::new(a.as_slice().unwrap_or(&a.to_vec()), b.as_slice().unwrap_or(&b.to_vec()), cost_ref);
    let pivots = ns.run()?;
    log::trace!("network simplex finished after {pivots} pivots on {n}x{m}");
    Ok(ns.positive_flows())
}

/// Exact optimal plan and its cost `sum pi_ij c_ij`.
pub fn exact_emd(a_weights: ArrayView1<f64>, b_weights: ArrayView1<f64>, cost: &CostMatrix) -> Result<(TransportPlan, f64)> {
    let sa = check_weights("a_weights", a_weights)?;
    let sb = check_weights("b_weights", b_weights)?;
    if (sa - 1.0).abs() > 1e-9 || (sb - 1.0).abs() > 1e-9 {
        return Err(Error::Infeasible(format!("weights must sum to 1 (got {sa} and {sb})")));
    }
    let flows = solve_sparse(a_weights, b_weights, &cost.entries)?;
    let mut pi = Array2::zeros(cost.shape());
    let mut value = 0.0;
    for (i, j, f) in flows {
        pi[[i, j]] = f;
        value += f * cost.entries[[i, j]];
    }
    Ok((TransportPlan::from_matrix(pi, PlanKind::Exact, 0, true), value))
}

/// Exact 1-Wasserstein solution between weighted point sets.
#[derive(Debug, Clone)]
pub struct W1Solution {
    pub value: f64,
    /// Support of the optimal plan as `(i, j, mass)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Exact `W_1` with Euclidean ground cost between weighted point sets of
/// equal total mass. One-dimensional inputs use the sorted (monotone)
/// coupling, which is optimal there; otherwise the network simplex runs on
/// the dense distance matrix.
pub fn wasserstein1(
    a_pts: ArrayView2<f64>,
    a_w: ArrayView1<f64>,
    b_pts: ArrayView2<f64>,
    b_w: ArrayView1<f64>,
) -> Result<W1Solution> {
    if a_pts.nrows() != a_w.len() || b_pts.nrows() != b_w.len() {
        return Err(Error::ShapeMismatch("points and weights differ in length".into()));
    }
    if a_pts.ncols() != b_pts.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a_pts.ncols(),
            got: b_pts.ncols(),
        });
    }
    let sa = check_weights("a_weights", a_w)?;
    let sb = check_weights("b_weights", b_w)?;
    if (sa - sb).abs() > 1e-9 * sa.max(sb).max(1.0) {
        return Err(Error::Infeasible(format!("weight sums differ: {sa} vs {sb}")));
    }
    if a_pts.ncols() == 1 {
        return Ok(w1_sorted(a_pts.column(0), a_w, b_pts.column(0), b_w));
    }
    let cost = euclidean_cost(a_pts, b_pts)?;
    let pairs = solve_sparse(a_w, b_w, &cost.entries)?;
    let value = pairs.iter().map(|&(i, j, f)| f * cost.entries[[i, j]]).sum();
    Ok(W1Solution { value, pairs })
}

fn w1_sorted(a: ArrayView1<f64>, aw: ArrayView1<f64>, b: ArrayView1<f64>, bw: ArrayView1<f64>) -> W1Solution {
    let mut ia: Vec<usize> = (0..a.len()).collect();
    let mut ib: Vec<usize> = (0..b.len()).collect();
    ia.sort_by(|&x, &y| a[x].total_cmp(&a[y]));
    ib.sort_by(|&x, &y| b[x].total_cmp(&b[y]));
    let (mut p, mut q) = (0, 0);
    let mut ra = aw[ia[0]];
    let mut rb = bw[ib[0]];
    let mut pairs = Vec::with_capacity(a.len() + b.len());
    let mut value = 0.0;
    loop {
        let (i, j) = (ia[p], ib[q]);
        let mass = ra.min(rb);
        if mass > 0.0 {
            pairs.push((i, j, mass));
            value += mass * (a[i] - b[j]).abs();
        }
        ra -= mass;
        rb -= mass;
        if ra <= rb {
            p += 1;
            if p == ia.len() {
                break;
            }
            ra = aw[ia[p]];
        } else {
            q += 1;
            if q == ib.len() {
                break;
            }
            rb = bw[ib[q]];
        }
    }
    W1Solution { value, pairs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identical_sets_cost_zero() {
        let x = array![[0.0, 1.0], [2.0, 3.0], [-1.0, 0.5]];
        let w = array![0.2, 0.5, 0.3];
        let c = euclidean_cost(x.view(), x.view()).unwrap();
        let (_, v) = exact_emd(w.view(), w.view(), &c).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn singletons() {
        let c = CostMatrix::new(array![[2.5]]).unwrap();
        let (p, v) = exact_emd(array![1.0].view(), array![1.0].view(), &c).unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(p.matrix[[0, 0]], 1.0);
    }

    #[test]
    fn four_by_four_matches_permutations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..5.0));
            let best = permutations(4)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / 4.0)
                .fold(f64::INFINITY, f64::min);
            let w = Array1::from_elem(4, 0.25);
            let (plan, v) = exact_emd(w.view(), w.view(), &CostMatrix::new(c).unwrap()).unwrap();
            assert!((v - best).abs() <= 1e-12, "{v} vs {best}");
            for s in plan.row_marginal.iter().chain(plan.col_marginal.iter()) {
                assert!((s - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_unequal_mass() {
        let c = CostMatrix::new(array![[1.0, 2.0]]).unwrap();
        let r = exact_emd(array![1.0].view(), array![0.5, 0.4].view(), &c);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn marginals_preserved_on_random_rectangular() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(1..30);
            let m = rng.random_range(1..30);
            let mut a = Array1::from_shape_fn(n, |_| rng.random_range(0.1..1.0));
            let mut b = Array1::from_shape_fn(m, |_| rng.random_range(0.1..1.0));
            a /= a.sum();
            b /= b.sum();
            let c = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..10.0));
            let (p, _) = exact_emd(a.view(), b.view(), &CostMatrix::new(c).unwrap()).unwrap();
            for (x, y) in p.row_marginal.iter().zip(a.iter()) {
                assert!((x - y).abs() < 1e-8);
            }
            for (x, y) in p.col_marginal.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-8);
            }
            // basic solution: at most n + m - 1 positive entries
            assert!(p.matrix.iter().filter(|v| **v > 0.0).count() <= n + m - 1);
        }
    }

    #[test]
    fn one_dimensional_path_matches_simplex() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.random_range(1..25);
            let m = rng.random_range(1..25);
            let a = Array2::from_shape_fn((n, 1), |_| rng.random_range(-3.0..3.0));
            let b = Array2::from_shape_fn((m, 1), |_| rng.random_range(-3.0..3.0));
            let mut aw = Array1::from_shape_fn(n, |_| rng.random_range(0.1..1.0));
            let mut bw = Array1::from_shape_fn(m, |_| rng.random_range(0.1..1.0));
            aw /= aw.sum();
            bw /= bw.sum();
            let fast = wasserstein1(a.view(), aw.view(), b.view(), bw.view()).unwrap();
            let c = euclidean_cost(a.view(), b.view()).unwrap();
            let (_, slow) = exact_emd(aw.view(), bw.view(), &c).unwrap();
            assert!((fast.value - slow).abs() < 1e-10, "{} vs {slow}", fast.value);
            let moved: f64 = fast.pairs.iter().map(|p| p.2).sum();
            assert!((moved - 1.0).abs() < 1e-10);
        }
    }
}
