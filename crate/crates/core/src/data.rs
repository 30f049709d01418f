//! Domain types shared by every other module: snapshots, datasets, transport
//! plans and simulated trajectory bundles, plus their CSV formats.
//!
//! Snapshot CSV: header `t,x1,...,xd` or `t,x1,...,xd,w`, one row per point.
//! `t` is the integer snapshot index; the optional `w` column holds positive
//! per-point weights. Numbers are written with 17 significant digits so a
//! write/parse cycle reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Points observed at a single time index.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time_index: usize,
    /// `N x d` coordinates.
    pub points: Array2<f64>,
    /// Positive per-point weights, all ones unless the source provided them.
    pub weights: Array1<f64>,
}

impl Snapshot {
    pub fn new(time_index: usize, points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        Self::with_weights(time_index, points, Array1::ones(n))
    }

    pub fn with_weights(time_index: usize, points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let s = Snapshot {
            time_index,
            points,
            weights,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn has_nonunit_weights(&self) -> bool {
        self.weights.iter().any(|&w| w != 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.time_index;
        if self.points.nrows() == 0 {
            return Err(Error::Validation(format!("snapshot t={t} has no points")));
        }
        if self.points.ncols() == 0 {
            return Err(Error::Validation(format!("snapshot t={t} has zero dimension")));
        }
        if self.weights.len() != self.points.nrows() {
            return Err(Error::Validation(format!(
                "snapshot t={t}: {} weights for {} points",
                self.weights.len(),
                self.points.nrows()
            )));
        }
        if let Some((i, _)) = self
            .points
            .outer_iter()
            .enumerate()
            .find(|(_, row)| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Validation(format!("snapshot t={t}: point {i} is not finite")));
        }
        if let Some((i, w)) = self
            .weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::Validation(format!(
                "snapshot t={t}: weight {i} = {w} is not a positive finite number"
            )));
        }
        Ok(())
    }
}

/// Ordered snapshots with time indices `0, 1, ..., T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    snapshots: Vec<Snapshot>,
}

impl Dataset {
    pub fn new(snapshots: Vec<Snapshot>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::Validation("dataset has no snapshots".into()));
        }
        let d = snapshots[0].dim();
        for (k, s) in snapshots.iter().enumerate() {
            s.validate()?;
            if s.time_index != k {
                return Err(Error::Validation(format!(
                    "time indices must be 0..T-1 without gaps; position {k} holds t={}",
                    s.time_index
                )));
            }
            if s.dim() != d {
                return Err(Error::Validation(format!(
                    "snapshot t={} has dimension {} but t=0 has {d}",
                    s.time_index,
                    s.dim()
                )));
            }
        }
        Ok(Dataset { snapshots })
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, t: usize) -> Option<&Snapshot> {
        self.snapshots.get(t)
    }

    pub fn num_times(&self) -> usize {
        self.snapshots.len()
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].dim()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.snapshots.iter().map(Snapshot::len).collect()
    }

    pub fn into_snapshots(self) -> Vec<Snapshot> {
        self.snapshots
    }
}

/// Which problem produced a [`TransportPlan`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanKind {
    /// Entropic problem with KL-relaxed rows and hard unit columns.
    SemiRelaxed { epsilon: f64, tau: f64 },
    /// Entropic problem with both marginals fixed.
    Balanced { epsilon: f64 },
    /// Unregularized optimum from the network simplex.
    Exact,
}

/// Nonnegative coupling matrix together with its marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub kind: PlanKind,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    pub fn from_matrix(matrix: Array2<f64>, kind: PlanKind, iterations: usize, converged: bool) -> Self {
        let row_marginal = matrix.sum_axis(Axis(1));
        let col_marginal = matrix.sum_axis(Axis(0));
        TransportPlan {
            matrix,
            row_marginal,
            col_marginal,
            kind,
            iterations,
            converged,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.dim()
    }

    pub fn epsilon(&self) -> f64 {
        match self.kind {
            PlanKind::SemiRelaxed { epsilon, .. } | PlanKind::Balanced { epsilon } => epsilon,
            PlanKind::Exact => 0.0,
        }
    }

    pub fn tau(&self) -> f64 {
        match self.kind {
            PlanKind::SemiRelaxed { tau, .. } => tau,
            _ => f64::INFINITY,
        }
    }

    /// `sum_ij pi_ij c_ij`.
    pub fn transport_cost(&self, cost: &Array2<f64>) -> f64 {
        (&self.matrix * cost).sum()
    }

    /// Checks nonnegativity, stored marginals and, for semi-relaxed plans,
    /// the hard unit column constraint.
    pub fn validate(&self, col_tol: f64) -> Result<()> {
        if self.matrix.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("plan has negative or non-finite entries".into()));
        }
        let rows = self.matrix.sum_axis(Axis(1));
        let cols = self.matrix.sum_axis(Axis(0));
        let row_err = max_abs_diff(rows.view(), self.row_marginal.view());
        let col_err = max_abs_diff(cols.view(), self.col_marginal.view());
        if row_err > 1e-9 || col_err > 1e-9 {
            return Err(Error::Validation(format!(
                "stored marginals disagree with sums (rows {row_err:.2e}, cols {col_err:.2e})"
            )));
        }
        if let PlanKind::SemiRelaxed { .. } = self.kind {
            let dev = cols.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max);
            if dev > col_tol {
                return Err(Error::Validation(format!("column marginal deviates from 1 by {dev:.2e}")));
            }
        }
        Ok(())
    }
}

fn max_abs_diff(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Simulated particle positions and log-weights on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub times: Vec<f64>,
    /// `particles x grid times x d`.
    pub positions: Array3<f64>,
    /// `particles x grid times`; column 0 is all zeros.
    pub log_weights: Array2<f64>,
}

impl TrajectoryBundle {
    pub fn num_particles(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.positions.shape()[2]
    }

    /// Positions at grid index `k` as an `N x d` view.
    pub fn positions_at(&self, k: usize) -> ArrayView2<'_, f64> {
        self.positions.index_axis(Axis(1), k)
    }

    pub fn weights_at(&self, k: usize) -> Array1<f64> {
        self.log_weights.column(k).mapv(f64::exp)
    }

    pub fn final_positions(&self) -> ArrayView2<'_, f64> {
        self.positions_at(self.times.len() - 1)
    }

    pub fn final_weights(&self) -> Array1<f64> {
        self.weights_at(self.times.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, k, _) = self.positions.dim();
        if self.log_weights.dim() != (p, k) || self.times.len() != k {
            return Err(Error::Validation("trajectory arrays disagree in shape".into()));
        }
        if self.log_weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("trajectory log-weights are not finite".into()));
        }
        if k > 0 && self.log_weights.column(0).iter().any(|&v| v != 0.0) {
            return Err(Error::Validation("initial log-weights must be zero".into()));
        }
        Ok(())
    }

    /// Writes `particle,t,x1,...,xd,logw`, one row per particle and grid time.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d = self.dim();
        let mut out = String::from("particle,t");
        for k in 1..=d {
            let _ = write!(out, ",x{k}");
        }
        out.push_str(",logw\n");
        for p in 0..self.num_particles() {
            for (k, t) in self.times.iter().enumerate() {
                let _ = write!(out, "{p},{}", fmt_f64(*t));
                for c in 0..d {
                    let _ = write!(out, ",{}", fmt_f64(self.positions[[p, k, c]]));
                }
                let _ = writeln!(out, ",{}", fmt_f64(self.log_weights[[p, k]]));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a file produced by [`TrajectoryBundle::write_csv`]. Rows must be
    /// ordered by particle and share the same time grid.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 4 || cols[0] != "particle" || cols[1] != "t" || cols[cols.len() - 1] != "logw" {
            return Err(parse_err(path, 1, "expected header particle,t,x1,...,xd,logw"));
        }
        let d = cols.len() - 3;
        let mut rows: Vec<(usize, f64, Vec<f64>, f64)> = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 3 {
                return Err(parse_err(path, ln + 1, "wrong number of fields"));
            }
            let p: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(path, ln + 1, "bad particle index"))?;
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err(path, ln + 1, "bad number"))?;
            rows.push((p, nums[0], nums[1..=d].to_vec(), nums[d + 1]));
        }
        if rows.is_empty() {
            return Err(parse_err(path, 2, "no data rows"));
        }
        let num_particles = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
        if rows.len() % num_particles != 0 {
            return Err(parse_err(path, 2, "ragged particle trajectories"));
        }
        let k = rows.len() / num_particles;
        let times: Vec<f64> = rows[..k].iter().map(|r| r.1).collect();
        let mut positions = Array3::zeros((num_particles, k, d));
        let mut log_weights = Array2::zeros((num_particles, k));
        for (idx, (p, t, x, lw)) in rows.into_iter().enumerate() {
            let (ep, ek) = (idx / k, idx % k);
            if p != ep || t != times[ek] {
                return Err(parse_err(path, idx + 2, "rows must be grouped by particle on a shared grid"));
            }
            for c in 0..d {
                positions[[p, ek, c]] = x[c];
            }
            log_weights[[p, ek]] = lw;
        }
        let b = TrajectoryBundle {
            times,
            positions,
            log_weights,
        };
        b.validate()?;
        Ok(b)
    }
}

/// 17 significant digits, enough for an exact `f64` round trip.
pub(crate) fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.fract() == 0.0 && v.abs() < 1e15 {
        return format!("{v:.1}");
    }
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

/// Reads a snapshot CSV into a validated [`Dataset`].
pub fn parse_snapshot_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_snapshot_str(&text, path)
}

pub(crate) fn parse_snapshot_str(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(parse_err(path, 1, "header must start with `t`"));
    }
    let has_w = cols.last() == Some(&"w");
    let d = cols.len() - 1 - usize::from(has_w);
    if d == 0 {
        return Err(parse_err(path, 1, "header has no coordinate columns"));
    }
    for (k, c) in cols[1..=d].iter().enumerate() {
        if *c != format!("x{}", k + 1) {
            return Err(parse_err(path, 1, &format!("expected column x{} but found `{c}`", k + 1)));
        }
    }

    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (ln, line) in lines {
        let lineno = ln + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                path,
                lineno,
                &format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let t: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, &format!("time index `{}` is not a nonnegative integer", fields[0])))?;
        let mut vals = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, lineno, &format!("`{f}` is not a number")))?;
            vals.push(v);
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("line {lineno}: non-finite value")));
        }
        if t >= groups.len() {
            groups.resize_with(t + 1, Default::default);
        }
        let (pts, ws) = &mut groups[t];
        pts.extend_from_slice(&vals[..d]);
        ws.push(if has_w { vals[d] } else { 1.0 });
    }
    if groups.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let mut snapshots = Vec::with_capacity(groups.len());
    for (t, (pts, ws)) in groups.into_iter().enumerate() {
        if ws.is_empty() {
            return Err(Error::Validation(format!(
                "time indices are not contiguous: no rows for t={t}"
            )));
        }
        let n = ws.len();
        let points = Array2::from_shape_vec((n, d), pts).expect("row-major fill");
        snapshots.push(Snapshot::with_weights(t, points, Array1::from(ws))?);
    }
    Dataset::new(snapshots)
}

/// Writes a dataset in the snapshot CSV format. The `w` column is emitted
/// only when some weight differs from 1.
pub fn write_dataset_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_csv(ds)).map_err(|e| Error::io(path, e))
}

pub(crate) fn dataset_to_csv(ds: &Dataset) -> String {
    let d = ds.dim();
    let with_w = ds.snapshots().iter().any(Snapshot::has_nonunit_weights);
    let mut out = String::from("t");
    for k in 1..=d {
        let _ = write!(out, ",x{k}");
    }
    if with_w {
        out.push_str(",w");
    }
    out.push('\n');
    for s in ds.snapshots() {
        for (row, w) in s.points.outer_iter().zip(s.weights.iter()) {
            let _ = write!(out, "{}", s.time_index);
            for v in row {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            if with_w {
                let _ = write!(out, ",{}", fmt_f64(*w));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<Dataset> {
        parse_snapshot_str(text, &PathBuf::from("mem.csv"))
    }

    #[test]
    fn minimal_file() {
        let ds = parse("t,x1,x2\n0,0,0\n1,1,1\n").unwrap();
        assert_eq!(ds.num_times(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.counts(), vec![1, 1]);
        assert_eq!(ds.snapshot(1).unwrap().points, array![[1.0, 1.0]]);
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(parse(""), Err(Error::Parse { .. })));
        assert!(matches!(parse("t,x1\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn malformed_row_reports_line() {
        match parse("t,x1,x2\n0,0,0\n0,abc,1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse("t,x1,x2\n0,0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaps_and_nonfinite_are_validation_errors() {
        assert!(matches!(parse("t,x1\n0,1\n2,1\n"), Err(Error::Validation(_))));
        assert!(matches!(parse("t,x1\n0,NaN\n"), Err(Error::Validation(_))));
        assert!(matches!(parse("t,x1\n0,inf\n"), Err(Error::Validation(_))));
        assert!(matches!(parse("t,x1,w\n0,1,0\n"), Err(Error::Validation(_))));
    }

    #[test]
    fn rows_grouped_by_time() {
        let ds = parse("t,x1,w\n1,5,2\n0,1,1\n1,6,3\n").unwrap();
        assert_eq!(ds.snapshot(1).unwrap().points, array![[5.0], [6.0]]);
        assert_eq!(ds.snapshot(1).unwrap().weights, array![2.0, 3.0]);
    }

    #[test]
    fn single_point_writes_two_lines() {
        let s = Snapshot::new(0, array![[0.25, -3.0]]).unwrap();
        let ds = Dataset::new(vec![s]).unwrap();
        let text = dataset_to_csv(&ds);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), "t,x1,x2");
    }

    #[test]
    fn weights_column_only_when_needed() {
        let s = Snapshot::with_weights(0, array![[1.0], [2.0]], array![1.0, 2.5]).unwrap();
        let ds = Dataset::new(vec![s]).unwrap();
        let text = dataset_to_csv(&ds);
        assert_eq!(text.lines().next().unwrap(), "t,x1,w");
        let back = parse(&text).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn file_round_trip_500_rows() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let snaps = (0..5)
            .map(|t| {
                let pts = Array2::from_shape_fn((100, 3), |_| rng.random_range(-1e3..1e3) * rng.random::<f64>());
                Snapshot::new(t, pts).unwrap()
            })
            .collect();
        let ds = Dataset::new(snaps).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        write_dataset_csv(&ds, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 501);
        let back = parse_snapshot_csv(&p).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let b = TrajectoryBundle {
            times: vec![0.0, 0.5, 1.0],
            positions: Array3::from_shape_fn((2, 3, 2), |(p, k, c)| p as f64 + 0.1 * k as f64 - c as f64 / 3.0),
            log_weights: array![[0.0, 0.1, 0.2], [0.0, -0.3, -0.7]],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        b.write_csv(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 1 + 2 * 3);
        assert_eq!(TrajectoryBundle::read_csv(&p).unwrap(), b);
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (1usize..4, 1usize..4, any::<bool>()).prop_flat_map(|(t, d, weighted)| {
            proptest::collection::vec(
                proptest::collection::vec((proptest::collection::vec(-1e6f64..1e6, d), 0.01f64..10.0), 1..6),
                t,
            )
            .prop_map(move |snaps| {
                let snapshots = snaps
                    .into_iter()
                    .enumerate()
                    .map(|(ti, rows)| {
                        let n = rows.len();
                        let pts = Array2::from_shape_vec((n, d), rows.iter().flat_map(|r| r.0.clone()).collect()).unwrap();
                        let w = if weighted {
                            Array1::from(rows.iter().map(|r| r.1).collect::<Vec<_>>())
                        } else {
                            Array1::ones(n)
                        };
                        Snapshot::with_weights(ti, pts, w).unwrap()
                    })
                    .collect();
                Dataset::new(snapshots).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_write(ds in arb_dataset()) {
            let text = dataset_to_csv(&ds);
            let back = parse(&text).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn validated_datasets_satisfy_invariants(ds in arb_dataset()) {
            let d = ds.dim();
            for (k, s) in ds.snapshots().iter().enumerate() {
                prop_assert_eq!(s.time_index, k);
                prop_assert_eq!(s.dim(), d);
                prop_assert!(s.len() >= 1);
                prop_assert!(s.points.iter().all(|v| v.is_finite()));
                prop_assert!(s.weights.iter().all(|w| *w > 0.0));
            }
        }
    }
}
