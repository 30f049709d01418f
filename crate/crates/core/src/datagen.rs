//! Synthetic datasets with known ground truth.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, Snapshot};
use crate::error::{Error, Result};

/// Parameters of the three-gene toggle switch with division.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneSimParams {
    pub alpha: [f64; 3],
    pub gamma: [f64; 3],
    pub delta: [f64; 3],
    pub eta: [f64; 3],
    pub eta_d: f64,
    pub beta: f64,
    pub dt: f64,
    /// Simulation step counts at which snapshots are recorded; must be evenly
    /// spaced and start at 0.
    pub obs_steps: Vec<usize>,
    /// Extra unobserved recording steps (for out-of-distribution checks).
    pub ood_steps: Vec<usize>,
    pub init_means: [[f64; 3]; 2],
    /// Per-coordinate standard deviation of the initial clusters.
    pub init_std: f64,
}

impl Default for GeneSimParams {
    fn default() -> Self {
        GeneSimParams {
            alpha: [0.5, 1.0, 1.0],
            gamma: [0.5, 1.0, 10.0],
            delta: [0.4, 0.4, 0.4],
            eta: [0.05, 0.05, 0.05],
            eta_d: 0.014,
            beta: 1.0,
            dt: 1.0,
            obs_steps: vec![0, 8, 16, 24, 32],
            ood_steps: vec![4, 12, 20, 28],
            init_means: [[2.0, 0.2, 0.0], [0.0, 0.0, 2.0]],
            init_std: 0.01,
        }
    }
}

impl GeneSimParams {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .alpha
            .iter()
            .chain(&self.gamma)
            .chain(&self.delta)
            .chain(&self.eta)
            .chain([&self.eta_d, &self.beta, &self.init_std]);
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::InvalidArgument("gene simulator parameters must be nonnegative".into()));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if self.obs_steps.len() < 2 || self.obs_steps[0] != 0 {
            return Err(Error::InvalidArgument("need at least two observation steps starting at 0".into()));
        }
        let gap = self.obs_steps[1];
        if gap == 0 || self.obs_steps.windows(2).any(|w| w[1] != w[0] + gap) {
            return Err(Error::InvalidArgument("observation steps must be evenly spaced".into()));
        }
        if self.ood_steps.iter().any(|&s| s > *self.obs_steps.last().unwrap()) {
            return Err(Error::InvalidArgument("extra recording steps exceed the horizon".into()));
        }
        Ok(())
    }

    /// Simulation steps between consecutive observations.
    pub fn steps_per_gap(&self) -> usize {
        self.obs_steps[1]
    }

    fn drift(&self, x: &[f64; 3]) -> [f64; 3] {
        let [a1, a2, a3] = self.alpha;
        let [g1, g2, g3] = self.gamma;
        let [d1, d2, d3] = self.delta;
        let (x1, x2, x3) = (x[0] * x[0], x[1] * x[1], x[2] * x[2]);
        let b = self.beta;
        [
            (a1 * x1 + b) / (1.0 + a1 * x1 + g2 * x2 + g3 * x3 + b) - d1 * x[0],
            (a2 * x2 + b) / (1.0 + g1 * x1 + a2 * x2 + g3 * x3 + b) - d2 * x[1],
            a3 * x3 / (1.0 + a3 * x3) - d3 * x[2],
        ]
    }
}

/// Division probability per simulation step: `alpha_2 X_2^2 / (1 + X_2^2)` percent.
pub fn division_probability(x2: f64, params: &GeneSimParams) -> f64 {
    let s = x2 * x2;
    params.alpha[1] * s / (1.0 + s) / 100.0
}

/// Growth rate in log-mass per unit of snapshot index time, using the
/// conversion `p * steps_per_gap` from the per-step division probability `p`.
pub fn true_growth_rate(x: &[f64], params: &GeneSimParams) -> f64 {
    division_probability(x[1], params) * params.steps_per_gap() as f64
}

/// Cells recorded at one time, in the exported two-gene coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneRecord {
    /// Time in snapshot index units (`step / steps_per_gap`).
    pub time: f64,
    /// `N x 2` positions `(X1, X2)`.
    pub points: Array2<f64>,
    pub true_growth: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneSimOutput {
    pub dataset: Dataset,
    /// One record per observation step, aligned with the dataset snapshots.
    pub observed: Vec<GeneRecord>,
    /// Records at the unobserved steps.
    pub ood: Vec<GeneRecord>,
    /// Number of division events per observation interval.
    pub divisions: Vec<usize>,
}

fn clip(x: &mut [f64; 3]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Euler-Maruyama simulation of the toggle switch with stochastic division.
/// Daughters are appended after the existing cells and start moving on the
/// next step. Snapshots keep `(X1, X2)`.
pub fn gen_simulation_gene(params: &GeneSimParams, n_init_per_cluster: usize, seed: u64) -> Result<GeneSimOutput> {
    params.validate()?;
    if n_init_per_cluster == 0 {
        return Err(Error::InvalidArgument("need at least one initial cell per cluster".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<[f64; 3]> = Vec::with_capacity(4 * n_init_per_cluster);
    for mean in &params.init_means {
        for _ in 0..n_init_per_cluster {
            let mut c = [0.0; 3];
            for k in 0..3 {
                let z: f64 = rng.sample(StandardNormal);
                c[k] = mean[k] + params.init_std * z;
            }
            clip(&mut c);
            cells.push(c);
        }
    }

    let gap = params.steps_per_gap();
    let horizon = *params.obs_steps.last().unwrap();
    let record = |cells: &[[f64; 3]], step: usize| GeneRecord {
        time: step as f64 / gap as f64,
        points: Array2::from_shape_fn((cells.len(), 2), |(i, k)| cells[i][k]),
        true_growth: cells.iter().map(|c| true_growth_rate(c, params)).collect(),
    };
    let mut observed = vec![record(&cells, 0)];
    let mut ood = Vec::new();
    if params.ood_steps.contains(&0) {
        ood.push(record(&cells, 0));
    }
    let mut divisions = vec![0usize; params.obs_steps.len() - 1];
    let sqdt = params.dt.sqrt();
    for step in 1..=horizon {
        let n = cells.len();
        for i in 0..n {
            let f = params.drift(&cells[i]);
            for k in 0..3 {
                let z: f64 = rng.sample(StandardNormal);
                cells[i][k] += f[k] * params.dt + params.eta[k] * sqdt * z;
            }
            clip(&mut cells[i]);
            let u: f64 = rng.random();
            if u < division_probability(cells[i][1], params) * params.dt {
                let parent = cells[i];
                let mut kids = [parent; 2];
                for kid in kids.iter_mut() {
                    for k in 0..3 {
                        let z: f64 = rng.sample(StandardNormal);
                        kid[k] += params.eta_d * z;
                    }
                    clip(kid);
                }
                cells[i] = kids[0];
                cells.push(kids[1]);
                divisions[(step - 1) / gap] += 1;
            }
        }
        if step % gap == 0 {
            observed.push(record(&cells, step));
        }
        if params.ood_steps.contains(&step) {
            ood.push(record(&cells, step));
        }
    }
    let snaps = observed
        .iter()
        .enumerate()
        .map(|(t, r)| Snapshot::new(t, r.points.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneSimOutput {
        dataset: Dataset::new(snaps)?,
        observed,
        ood,
        divisions,
    })
}

/// Sidecar CSV `t,cell,true_growth` for a list of records.
pub fn write_growth_truth_csv(path: &Path, records: &[GeneRecord]) -> Result<()> {
    let mut s = String::from("t,cell,true_growth\n");
    for r in records {
        for (i, g) in r.true_growth.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", fmt_f64(r.time), i, fmt_f64(*g)));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Two-snapshot unbalanced mixture. In the first two coordinates the initial
/// population has a lower and an upper unit-variance component; at the final
/// time the lower one has split into two side components and the upper one has
/// proliferated in place. Remaining coordinates carry `ambient_std` noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureParams {
    pub dim: usize,
    pub upper: [f64; 2],
    pub lower: [f64; 2],
    pub lower_left: [f64; 2],
    pub lower_right: [f64; 2],
    pub std: f64,
    pub ambient_std: f64,
    pub n0_lower: usize,
    pub n0_upper: usize,
    pub n1_upper: usize,
    pub n1_side: usize,
}

impl Default for MixtureParams {
    fn default() -> Self {
        MixtureParams {
            dim: 100,
            upper: [0.0, 8.0],
            lower: [0.0, 0.0],
            lower_left: [-6.0, 0.0],
            lower_right: [6.0, 0.0],
            std: 1.0,
            ambient_std: 0.0,
            n0_lower: 400,
            n0_upper: 100,
            n1_upper: 1000,
            n1_side: 200,
        }
    }
}

/// Mixture dataset with the component label of every point.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    pub labels: Vec<Vec<usize>>,
    /// Component means per snapshot, in label order, first two coordinates.
    pub means: Vec<Vec<[f64; 2]>>,
}

pub fn gen_gaussian_mixture_with(params: &MixtureParams, seed: u64) -> Result<LabeledDataset> {
    if params.dim < 2 {
        return Err(Error::InvalidArgument("mixture dimension must be at least 2".into()));
    }
    if !(params.std >= 0.0 && params.ambient_std >= 0.0) {
        return Err(Error::InvalidArgument("standard deviations must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dim;
    let mut draw = |parts: &[([f64; 2], usize)]| {
        let n: usize = parts.iter().map(|p| p.1).sum();
        let mut pts = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (label, (mean, count)) in parts.iter().enumerate() {
            for _ in 0..*count {
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    pts[[row, k]] = if k < 2 { mean[k] + params.std * z } else { params.ambient_std * z };
                }
                labels.push(label);
                row += 1;
            }
        }
        (pts, labels)
    };
    let p0 = [(params.lower, params.n0_lower), (params.upper, params.n0_upper)];
    let p1 = [
        (params.upper, params.n1_upper),
        (params.lower_left, params.n1_side),
        (params.lower_right, params.n1_side),
    ];
    let (x0, l0) = draw(&p0);
    let (x1, l1) = draw(&p1);
    Ok(LabeledDataset {
        dataset: Dataset::new(vec![Snapshot::new(0, x0)?, Snapshot::new(1, x1)?])?,
        labels: vec![l0, l1],
        means: vec![p0.iter().map(|p| p.0).collect(), p1.iter().map(|p| p.0).collect()],
    })
}

pub fn gen_gaussian_mixture(d: usize, seed: u64) -> Result<Dataset> {
    let p = MixtureParams {
        dim: d,
        ..MixtureParams::default()
    };
    Ok(gen_gaussian_mixture_with(&p, seed)?.dataset)
}

/// Branching toy: every branch starts at the origin and moves along its own
/// direction in the first two coordinates at `speed` per unit time; branch `k`
/// has `n0 * exp(growth[k] * t)` points at time `t` (rounded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchParams {
    pub dim: usize,
    pub num_times: usize,
    pub n0_per_branch: usize,
    pub speed: f64,
    pub std: f64,
    pub growth: Vec<f64>,
}

impl Default for BranchParams {
    fn default() -> Self {
        BranchParams {
            dim: 2,
            num_times: 4,
            n0_per_branch: 60,
            speed: 1.0,
            std: 0.1,
            growth: vec![0.0, 0.4],
        }
    }
}

impl BranchParams {
    /// The three-branch 5D layout with one static, one mildly and one strongly
    /// growing branch.
    pub fn three_branch_5d() -> Self {
        BranchParams {
            dim: 5,
            num_times: 4,
            n0_per_branch: 50,
            speed: 1.0,
            std: 0.1,
            growth: vec![0.0, 0.2, 0.4],
        }
    }

    pub fn count(&self, branch: usize, t: usize) -> usize {
        ((self.n0_per_branch as f64) * (self.growth[branch] * t as f64).exp()).round() as usize
    }

    pub fn direction(&self, branch: usize) -> [f64; 2] {
        let nb = self.growth.len() as f64;
        let angle = std::f64::consts::PI * (0.5 + branch as f64) / nb;
        [angle.cos(), angle.sin()]
    }
}

pub fn gen_branching(params: &BranchParams, seed: u64) -> Result<Dataset> {
    if params.dim < 2 || params.num_times < 2 || params.growth.is_empty() || params.n0_per_branch == 0 {
        return Err(Error::InvalidArgument("branching toy needs dim >= 2, >= 2 times, >= 1 branch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snaps = Vec::with_capacity(params.num_times);
    for t in 0..params.num_times {
        let n: usize = (0..params.growth.len()).map(|b| params.count(b, t)).sum();
        let mut pts = Array2::zeros((n, params.dim));
        let mut row = 0;
        for b in 0..params.growth.len() {
            let dir = params.direction(b);
            for _ in 0..params.count(b, t) {
                for k in 0..params.dim {
                    let z: f64 = rng.sample(StandardNormal);
                    let c = if k < 2 { dir[k] * params.speed * t as f64 } else { 0.0 };
                    pts[[row, k]] = c + params.std * z;
                }
                row += 1;
            }
        }
        snaps.push(Snapshot::new(t, pts)?);
    }
    Dataset::new(snaps)
}

/// One Gaussian cloud translated by `drift` per unit time; every snapshot is
/// the same base sample shifted, so the true flow is known exactly.
pub fn gen_linear_drift(n: usize, drift: &[f64], num_times: usize, std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || drift.is_empty() || num_times < 2 {
        return Err(Error::InvalidArgument("linear drift toy needs n >= 1, d >= 1, >= 2 times".into()));
    }
    let d = drift.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Array2::from_shape_fn((n, d), |_| std * rng.sample::<f64, _>(StandardNormal));
    let shift = Array1::from(drift.to_vec());
    let snaps = (0..num_times)
        .map(|t| Snapshot::new(t, &base + &(&shift * t as f64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(snaps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn division_rate_formula() {
        let p = GeneSimParams::default();
        assert!((division_probability(1.0, &p) - 0.005).abs() < 1e-15);
        assert!((division_probability(3.0, &p) - 0.009).abs() < 1e-15);
        assert_eq!(division_probability(0.0, &p), 0.0);
        assert!((division_probability(1e8, &p) - 0.01).abs() < 1e-12);
        assert_eq!(true_growth_rate(&[0.0, 1.0, 0.0], &p), 0.04);
    }

    #[test]
    fn no_growth_without_alpha2() {
        let p = GeneSimParams {
            alpha: [0.5, 0.0, 1.0],
            ..GeneSimParams::default()
        };
        let out = gen_simulation_gene(&p, 20, 1).unwrap();
        assert!(out.dataset.counts().iter().all(|&c| c == 40));
    }

    #[test]
    fn default_run_grows_in_active_branch() {
        let p = GeneSimParams::default();
        let out = gen_simulation_gene(&p, 300, 7).unwrap();
        let c = out.dataset.counts();
        assert_eq!(c.len(), 5);
        assert!(c.windows(2).all(|w| w[1] >= w[0]), "{c:?}");
        assert!(c[4] > c[0]);
        assert!(out.dataset.snapshots().iter().all(|s| s.points.iter().all(|&v| v >= 0.0)));
        // divisions come from the X2-high region
        let last = &out.observed[4];
        let active: Vec<f64> = last.points.column(1).iter().copied().filter(|&x| x > 0.5).collect();
        assert!(!active.is_empty());
        assert_eq!(out.ood.len(), 4);
        assert_eq!(out.ood[2].time, 2.5);
    }

    #[test]
    fn quiescent_branch_rarely_divides() {
        let p = GeneSimParams {
            init_means: [[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]],
            ..GeneSimParams::default()
        };
        let out = gen_simulation_gene(&p, 200, 3).unwrap();
        let total: usize = out.divisions.iter().sum();
        assert!((total as f64) < 0.01 * 400.0, "{total}");
    }

    #[test]
    fn gene_deterministic() {
        let p = GeneSimParams::default();
        let a = gen_simulation_gene(&p, 30, 11).unwrap();
        let b = gen_simulation_gene(&p, 30, 11).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn mixture_counts_and_labels() {
        let l = gen_gaussian_mixture_with(&MixtureParams::default(), 2).unwrap();
        assert_eq!(l.dataset.counts(), vec![500, 1400]);
        assert_eq!(l.dataset.dim(), 100);
        let mut correct = 0;
        let mut total = 0;
        for (t, s) in l.dataset.snapshots().iter().enumerate() {
            for (i, row) in s.points.rows().into_iter().enumerate() {
                let best = l.means[t]
                    .iter()
                    .enumerate()
                    .map(|(k, m)| (k, (row[0] - m[0]).powi(2) + (row[1] - m[1]).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                correct += (best == l.labels[t][i]) as usize;
                total += 1;
            }
        }
        assert!(correct as f64 > 0.99 * total as f64);
        let m1 = 1400.0 / 500.0;
        assert!((m1 - 2.8f64).abs() < 1e-15);
    }

    #[test]
    fn branching_counts() {
        let p = BranchParams::three_branch_5d();
        let ds = gen_branching(&p, 1).unwrap();
        assert_eq!(ds.num_times(), 4);
        assert_eq!(ds.dim(), 5);
        assert_eq!(ds.counts()[0], 150);
        assert!(ds.counts().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn drift_translates_base() {
        let ds = gen_linear_drift(10, &[1.0, -0.5], 3, 0.3, 4).unwrap();
        let s = ds.snapshots();
        let diff = &s[2].points - &s[0].points;
        assert!(diff.column(0).iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(diff.column(1).iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn truth_sidecar_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let out = gen_simulation_gene(&GeneSimParams::default(), 3, 1).unwrap();
        write_growth_truth_csv(&path, &out.observed).unwrap();
        let s = std::fs::read_to_string(&path).unwrap();
        assert!(s.starts_with("t,cell,true_growth\n"));
        let rows = s.lines().count() - 1;
        assert_eq!(rows, out.dataset.counts().iter().sum::<usize>());
    }
}
