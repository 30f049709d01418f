//! Plan precomputation, the warm-up phase on the matching loss and the joint
//! phase adding the fitting loss.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{fmt_f64, Dataset, Snapshot, TrajectoryBundle, TransportPlan};
use crate::error::{Error, Result};
use crate::fit_loss::{fit_loss_tape, FitVariant};
use crate::matching::{vgfm_loss_tape, vgfm_loss_terms, IntervalSampler, MatchBatch, MatchSample};
use crate::nets::{adam_step, default_depth, init_network, AdamState, NetworkParams, Tape, DEFAULT_WIDTH};
use crate::ot::{semi_relaxed_sinkhorn, squared_cost, SinkhornOptions};
use crate::simulate::{integrate, integrate_final, integrate_tape, DEFAULT_STEPS_PER_UNIT};

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eps: f64,
    pub tau: f64,
    /// Standard deviation of the noise added to interpolants.
    pub sigma: f64,
    pub batch: usize,
    /// Points per side in the fitting loss of a joint step; `None` uses the
    /// whole interval part.
    pub ot_batch: Option<usize>,
    pub warmup_iters: usize,
    pub joint_epochs: usize,
    pub lr_warmup: f64,
    pub lr_joint: f64,
    pub steps_per_unit: usize,
    pub big_batches: usize,
    pub fit_variant: FitVariant,
    pub rng_seed: u64,
    pub width: usize,
    /// Number of affine layers; `None` picks 3, or 5 above 50 dimensions.
    pub depth: Option<usize>,
    /// Divide the squared cost by its maximum before solving.
    pub normalize_cost: bool,
    /// Include the matching loss in the joint phase. Turning it off (with no
    /// warm-up) trains on the fitting loss alone.
    pub use_vgfm: bool,
    pub sinkhorn_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::gene()
    }
}

impl TrainConfig {
    /// Toggle-switch gene data.
    pub fn gene() -> Self {
        TrainConfig {
            eps: 0.003,
            tau: 10.0,
            sigma: 0.05,
            batch: 256,
            ot_batch: None,
            warmup_iters: 500,
            joint_epochs: 30,
            lr_warmup: 1e-3,
            lr_joint: 1e-4,
            steps_per_unit: DEFAULT_STEPS_PER_UNIT,
            big_batches: 1,
            fit_variant: FitVariant::Emd,
            rng_seed: 0,
            width: DEFAULT_WIDTH,
            depth: None,
            normalize_cost: false,
            use_vgfm: true,
            sinkhorn_max_iter: 5000,
        }
    }

    /// Unbalanced Gaussian mixture.
    pub fn gaussian() -> Self {
        TrainConfig {
            eps: 0.03,
            tau: 5.0,
            ..TrainConfig::gene()
        }
    }

    /// Low-dimensional branching data.
    pub fn mouse_2d() -> Self {
        TrainConfig {
            eps: 0.005,
            tau: 20.0,
            ..TrainConfig::gene()
        }
    }

    /// Preprocessed real data: normalized cost, longer warm-up, big batches.
    pub fn real_data() -> Self {
        TrainConfig {
            eps: 0.01,
            tau: 5.0,
            warmup_iters: 5000,
            big_batches: 5,
            normalize_cost: true,
            ..TrainConfig::gene()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "gene" => Ok(Self::gene()),
            "gaussian" => Ok(Self::gaussian()),
            "mouse" | "mouse-2d" | "two-branch" => Ok(Self::mouse_2d()),
            "real" => Ok(Self::real_data()),
            _ => Err(Error::InvalidArgument(format!("unknown preset '{name}'"))),
        }
    }

    /// Parses a JSON object; keys it does not mention keep the values of
    /// `base` and are listed in the returned vector.
    pub fn from_json_over(base: &TrainConfig, json: &str) -> Result<(Self, Vec<String>)> {
        let user: serde_json::Value = serde_json::from_str(json)?;
        let obj = user
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("config must be a JSON object".into()))?;
        let mut merged = serde_json::to_value(base)?;
        let target = merged.as_object_mut().expect("config serializes to an object");
        let mut missing = Vec::new();
        for key in target.keys().cloned().collect::<Vec<_>>() {
            match obj.get(&key) {
                Some(v) => {
                    target.insert(key, v.clone());
                }
                None => missing.push(key),
            }
        }
        for key in obj.keys() {
            if !target.contains_key(key) {
                return Err(Error::InvalidArgument(format!("unknown config key '{key}'")));
            }
        }
        let cfg: TrainConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok((cfg, missing))
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("eps", self.eps),
            ("tau", self.tau),
            ("lr_warmup", self.lr_warmup),
            ("lr_joint", self.lr_joint),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        for (name, v) in [
            ("batch", self.batch),
            ("steps_per_unit", self.steps_per_unit),
            ("big_batches", self.big_batches),
            ("width", self.width),
            ("sinkhorn_max_iter", self.sinkhorn_max_iter),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.ot_batch == Some(0) {
            return Err(Error::InvalidArgument("ot_batch must be at least 1".into()));
        }
        if let Some(d) = self.depth {
            if d < 2 {
                return Err(Error::InvalidArgument("depth must be at least 2".into()));
            }
        }
        if let FitVariant::Sinkhorn { eps } = self.fit_variant {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::InvalidArgument("sinkhorn fit epsilon must be positive".into()));
            }
        }
        if !self.use_vgfm && self.joint_epochs == 0 {
            return Err(Error::InvalidArgument("nothing to train: matching loss disabled and no joint epochs".into()));
        }
        Ok(())
    }

    fn sinkhorn_options(&self) -> SinkhornOptions {
        SinkhornOptions {
            max_iter: self.sinkhorn_max_iter,
            ..SinkhornOptions::default()
        }
    }
}

/// Velocity and growth networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub v: NetworkParams,
    pub g: NetworkParams,
}

impl Model {
    pub fn init(d: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        Ok(Model {
            v: init_network(d, d, depth, width, mix(seed, STREAM_INIT, 0))?,
            g: init_network(d, 1, depth, width, mix(seed, STREAM_INIT, 1))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.v.state_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.g.is_finite()
    }

    pub fn velocity(&self, x: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        self.v.forward_batch(x, t)
    }

    pub fn growth(&self, x: ArrayView2<f64>, t: f64) -> Result<Array1<f64>> {
        Ok(self.g.forward_batch(x, t)?.index_axis_move(Axis(1), 0))
    }

    pub fn simulate(&self, start: ArrayView2<f64>, t0: f64, t1: f64, steps_per_unit: usize) -> Result<TrajectoryBundle> {
        integrate(&self.v, &self.g, start, t0, t1, steps_per_unit)
    }

    pub fn simulate_final(
        &self,
        start: ArrayView2<f64>,
        t0: f64,
        t1: f64,
        steps_per_unit: usize,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        integrate_final(&self.v, &self.g, start, t0, t1, steps_per_unit)
    }
}

const STREAM_PLAN: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_WARMUP: u64 = 3;
const STREAM_JOINT: u64 = 4;
const STREAM_EVAL: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream)) ^ index)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream, index))
}

/// A plan between one subset of the source snapshot and one of the target.
#[derive(Debug, Clone)]
pub struct PlanPart {
    /// Row indices into the source snapshot.
    pub source: Vec<usize>,
    /// Row indices into the target snapshot.
    pub target: Vec<usize>,
    pub plan: TransportPlan,
    x0: Array2<f64>,
    x1: Array2<f64>,
    sampler: IntervalSampler,
}

/// Plans for one consecutive pair of training snapshots.
#[derive(Debug, Clone)]
pub struct IntervalPlans {
    pub t0: f64,
    pub t1: f64,
    pub parts: Vec<PlanPart>,
}

/// Training snapshots with their (possibly non-consecutive) times.
#[derive(Debug, Clone)]
struct Series {
    times: Vec<f64>,
    snaps: Vec<Snapshot>,
}

impl Series {
    fn from_dataset(ds: &Dataset) -> Self {
        Series {
            times: ds.snapshots().iter().map(|s| s.time_index as f64).collect(),
            snaps: ds.snapshots().to_vec(),
        }
    }

    fn dim(&self) -> usize {
        self.snaps[0].dim()
    }
}

fn split_even(mut idx: Vec<usize>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![idx];
    }
    idx.shuffle(rng);
    let len = idx.len();
    (0..n).map(|k| idx[k * len / n..(k + 1) * len / n].to_vec()).collect()
}

fn plans_for(series: &Series, cfg: &TrainConfig) -> Result<Vec<IntervalPlans>> {
    if series.snaps.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least two snapshots".into()));
    }
    let opts = cfg.sinkhorn_options();
    let mut out = Vec::with_capacity(series.snaps.len() - 1);
    for k in 0..series.snaps.len() - 1 {
        let (s0, s1) = (&series.snaps[k], &series.snaps[k + 1]);
        let (t0, t1) = (series.times[k], series.times[k + 1]);
        let nb = cfg.big_batches;
        if nb > s0.len() || nb > s1.len() {
            return Err(Error::Interval {
                index: k,
                source: Box::new(Error::InvalidArgument(format!(
                    "{nb} big batches for snapshots of {} and {} points",
                    s0.len(),
                    s1.len()
                ))),
            });
        }
        let mut rng = rng_for(cfg.rng_seed, STREAM_PLAN, k as u64);
        let src = split_even((0..s0.len()).collect(), nb, &mut rng);
        let dst = split_even((0..s1.len()).collect(), nb, &mut rng);
        let mut parts = Vec::with_capacity(nb);
        for (source, target) in src.into_iter().zip(dst) {
            let solve = || -> Result<PlanPart> {
                let x0 = s0.points.select(Axis(0), &source);
                let x1 = s1.points.select(Axis(0), &target);
                let cost = squared_cost(x0.view(), x1.view(), cfg.normalize_cost)?;
                let plan = semi_relaxed_sinkhorn(&cost, cfg.eps, cfg.tau, &opts)?;
                if !plan.converged {
                    log::warn!(
                        "interval {k}: Sinkhorn stopped after {} iterations without meeting the tolerance",
                        plan.iterations
                    );
                }
                let sampler = IntervalSampler::new(&plan, t0, t1 - t0)?;
                Ok(PlanPart {
                    source: source.clone(),
                    target: target.clone(),
                    plan,
                    x0,
                    x1,
                    sampler,
                })
            };
            parts.push(solve().map_err(|e| Error::Interval {
                index: k,
                source: Box::new(e),
            })?);
        }
        out.push(IntervalPlans { t0, t1, parts });
    }
    Ok(out)
}

/// One semi-relaxed plan per consecutive snapshot pair, or `big_batches`
/// plans per pair between random equal splits of the two snapshots.
pub fn precompute_plans(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<IntervalPlans>> {
    cfg.validate()?;
    plans_for(&Series::from_dataset(ds), cfg)
}

/// Warm-up iteration record. Losses are summed over intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupRecord {
    pub iter: usize,
    pub loss: f64,
    pub velocity: f64,
    pub growth: f64,
}

/// Joint-phase epoch record: mean per-step losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_vgfm: f64,
    pub loss_ot: f64,
    /// Wall time; not stored in checkpoints.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub warmup: Vec<WarmupRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_loss_vgfm(&self) -> Option<f64> {
        self.epochs
            .last()
            .map(|e| e.loss_vgfm)
            .or_else(|| self.warmup.last().map(|w| w.loss))
    }

    pub fn final_loss_ot(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss_ot)
    }

    /// `epoch,loss_vgfm,loss_ot,seconds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss_vgfm,loss_ot,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                fmt_f64(e.loss_vgfm),
                fmt_f64(e.loss_ot),
                fmt_f64(e.seconds)
            ));
        }
        s
    }

    /// `iter,loss_vgfm,loss_velocity,loss_growth`.
    pub fn warmup_csv(&self) -> String {
        let mut s = String::from("iter,loss_vgfm,loss_velocity,loss_growth\n");
        for w in &self.warmup {
            s.push_str(&format!(
                "{},{},{},{}\n",
                w.iter,
                fmt_f64(w.loss),
                fmt_f64(w.velocity),
                fmt_f64(w.growth)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }

    pub fn write_warmup_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.warmup_csv())
    }
}

pub(crate) fn write_file(path: &Path, s: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// How far a run has progressed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub warmup_done: usize,
    pub epochs_done: usize,
}

/// Full mutable training state, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt_v: AdamState,
    pub opt_g: AdamState,
    pub progress: Progress,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Writes `warmup.ckpt` after the warm-up and `epoch_NNN.ckpt` after
    /// every joint epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a saved state; the configuration must match apart from
    /// the number of joint epochs.
    pub resume: Option<Checkpoint>,
}

fn diverged(iteration: usize, reason: impl Into<String>, last: &Model) -> Error {
    Error::Diverged {
        iteration,
        reason: reason.into(),
        last_good: Box::new(Some(last.clone())),
    }
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut b = b.clone();
    b.joint_epochs = a.joint_epochs;
    *a == b
}

struct Trainer<'a> {
    series: &'a Series,
    cfg: &'a TrainConfig,
    plans: Vec<IntervalPlans>,
    opts: &'a TrainOptions,
}

impl Trainer<'_> {
    fn save(&self, state: &TrainState, name: &str) -> Result<()> {
        if let Some(dir) = &self.opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Checkpoint::from_state(state, self.cfg).save(&dir.join(name))?;
        }
        Ok(())
    }

    fn warmup_step(&self, state: &mut TrainState, it: usize) -> Result<()> {
        let cfg = self.cfg;
        let mut rng = rng_for(cfg.rng_seed, STREAM_WARMUP, it as u64);
        let mut tape = Tape::new();
        let vv = state.model.v.to_tape(&mut tape);
        let gv = state.model.g.to_tape(&mut tape);
        let mut total = None;
        let (mut vel, mut gro) = (0.0, 0.0);
        for iv in &self.plans {
            let part = &iv.parts[rng.random_range(0..iv.parts.len())];
            let samples = part.sampler.sample(part.x0.view(), part.x1.view(), cfg.batch, cfg.sigma, &mut rng)?;
            let batch = MatchBatch::from_samples(&samples)?;
            let terms = vgfm_loss_tape(&mut tape, &vv, &gv, &batch)?;
            vel += tape.scalar(terms.velocity);
            gro += tape.scalar(terms.growth);
            total = Some(match total {
                None => terms.total,
                Some(t) => tape.add(t, terms.total)?,
            });
        }
        let total = total.expect("at least one interval");
        let loss = tape.scalar(total);
        if !loss.is_finite() {
            return Err(diverged(it, "non-finite matching loss during warm-up", &state.model));
        }
        let grads = tape.backward(total)?;
        let (gvn, ggn) = (vv.gradient(&grads)?, gv.gradient(&grads)?);
        let before = state.model.clone();
        state.opt_v.lr = cfg.lr_warmup;
        state.opt_g.lr = cfg.lr_warmup;
        adam_step(&mut state.model.v, &mut state.opt_v, &gvn)?;
        adam_step(&mut state.model.g, &mut state.opt_g, &ggn)?;
        if !state.model.is_finite() {
            return Err(diverged(it, "non-finite parameters after warm-up step", &before));
        }
        state.report.warmup.push(WarmupRecord {
            iter: it,
            loss,
            velocity: vel,
            growth: gro,
        });
        Ok(())
    }

    /// One joint step on a single interval part; returns `(vgfm, ot)`.
    fn joint_step(&self, state: &mut TrainState, rng: &mut ChaCha8Rng, iv_idx: usize, part_idx: usize, step_id: usize) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        let iv = &self.plans[iv_idx];
        let part = &iv.parts[part_idx];
        let (s0, s1) = (&self.series.snaps[iv_idx], &self.series.snaps[iv_idx + 1]);

        let mut tape = Tape::new();
        let vv = state.model.v.to_tape(&mut tape);
        let gv = state.model.g.to_tape(&mut tape);

        let samples = part.sampler.sample(part.x0.view(), part.x1.view(), cfg.batch, cfg.sigma, rng)?;
        let batch = MatchBatch::from_samples(&samples)?;
        let terms = vgfm_loss_tape(&mut tape, &vv, &gv, &batch)?;

        let ot_batch = cfg.ot_batch.unwrap_or(usize::MAX);
        let src_sel: Vec<usize> = subset(rng, part.source.len(), ot_batch)
            .into_iter()
            .map(|i| part.source[i])
            .collect();
        let dst_sel: Vec<usize> = subset(rng, part.target.len(), ot_batch)
            .into_iter()
            .map(|i| part.target[i])
            .collect();
        let start = s0.points.select(Axis(0), &src_sel);
        let (xf, mut lw) = integrate_tape(&mut tape, &vv, &gv, start, iv.t0, iv.t1, cfg.steps_per_unit)?;
        if s0.has_nonunit_weights() {
            let w0 = tape.leaf(s0.weights.select(Axis(0), &src_sel).mapv(f64::ln).insert_axis(Axis(1)));
            lw = tape.add(lw, w0)?;
        }
        let obs = Snapshot::with_weights(
            s1.time_index,
            s1.points.select(Axis(0), &dst_sel),
            s1.weights.select(Axis(0), &dst_sel),
        )?;
        let ot = fit_loss_tape(&mut tape, xf, lw, &obs, cfg.fit_variant)?;
        let total = if cfg.use_vgfm { tape.add(terms.total, ot)? } else { ot };
        let (lv, lo) = (tape.scalar(terms.total), tape.scalar(ot));
        if !tape.scalar(total).is_finite() {
            return Err(diverged(step_id, "non-finite loss in joint phase", &state.model));
        }
        let grads = tape.backward(total)?;
        let (gvn, ggn) = (vv.gradient(&grads)?, gv.gradient(&grads)?);
        let before = state.model.clone();
        state.opt_v.lr = cfg.lr_joint;
        state.opt_g.lr = cfg.lr_joint;
        adam_step(&mut state.model.v, &mut state.opt_v, &gvn)?;
        adam_step(&mut state.model.g, &mut state.opt_g, &ggn)?;
        if !state.model.is_finite() {
            return Err(diverged(step_id, "non-finite parameters after joint step", &before));
        }
        Ok((lv, lo))
    }

    fn run(&self, mut state: TrainState) -> Result<TrainState> {
        let cfg = self.cfg;
        let warm_start = state.progress.warmup_done;
        for it in warm_start..cfg.warmup_iters {
            self.warmup_step(&mut state, it)?;
            state.progress.warmup_done = it + 1;
            if (it + 1) % 100 == 0 {
                log::info!("warm-up {}/{}: loss {:.5}", it + 1, cfg.warmup_iters, state.report.warmup.last().unwrap().loss);
            }
        }
        if warm_start < cfg.warmup_iters {
            self.save(&state, "warmup.ckpt")?;
        }
        let combos: Vec<(usize, usize)> = self
            .plans
            .iter()
            .enumerate()
            .flat_map(|(i, iv)| (0..iv.parts.len()).map(move |p| (i, p)))
            .collect();
        for epoch in state.progress.epochs_done..cfg.joint_epochs {
            let clock = Instant::now();
            let mut rng = rng_for(cfg.rng_seed, STREAM_JOINT, epoch as u64);
            let mut order = combos.clone();
            order.shuffle(&mut rng);
            let (mut sv, mut so) = (0.0, 0.0);
            for (k, &(i, p)) in order.iter().enumerate() {
                let step_id = cfg.warmup_iters + epoch * combos.len() + k;
                let (lv, lo) = self.joint_step(&mut state, &mut rng, i, p, step_id)?;
                sv += lv;
                so += lo;
            }
            let n = order.len() as f64;
            let rec = EpochRecord {
                epoch: epoch + 1,
                loss_vgfm: sv / n,
                loss_ot: so / n,
                seconds: clock.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {}/{}: vgfm {:.5} ot {:.5} ({:.1}s)",
                rec.epoch,
                cfg.joint_epochs,
                rec.loss_vgfm,
                rec.loss_ot,
                rec.seconds
            );
            state.report.epochs.push(rec);
            state.progress.epochs_done = epoch + 1;
            self.save(&state, &format!("epoch_{:03}.ckpt", epoch + 1))?;
        }
        Ok(state)
    }
}

fn subset(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    if amount >= len {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, amount).into_vec()
    }
}

fn initial_state(series: &Series, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainState> {
    if let Some(ck) = &opts.resume {
        let ck_cfg = ck
            .config
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training configuration".into()))?;
        if !same_run(cfg, ck_cfg) {
            return Err(Error::InvalidArgument("checkpoint was written with a different configuration".into()));
        }
        if ck.model.dim() != series.dim() {
            return Err(Error::DimensionMismatch {
                expected: series.dim(),
                got: ck.model.dim(),
            });
        }
        return ck.to_state();
    }
    let d = series.dim();
    let depth = cfg.depth.unwrap_or_else(|| default_depth(d));
    let model = Model::init(d, cfg.width, depth, cfg.rng_seed)?;
    Ok(TrainState {
        opt_v: AdamState::for_params(&model.v, cfg.lr_warmup),
        opt_g: AdamState::for_params(&model.g, cfg.lr_warmup),
        model,
        progress: Progress::default(),
        report: TrainReport::default(),
    })
}

fn train_series(series: &Series, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainState> {
    cfg.validate()?;
    let clock = Instant::now();
    let plans = plans_for(series, cfg)?;
    log::info!("computed {} interval plans in {:.1}s", plans.len(), clock.elapsed().as_secs_f64());
    let state = initial_state(series, cfg, opts)?;
    Trainer {
        series,
        cfg,
        plans,
        opts,
    }
    .run(state)
}

/// Trains on every snapshot of `ds`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let s = train_with(ds, cfg, &TrainOptions::default())?;
    Ok((s.model, s.report))
}

/// [`train`] with checkpointing and resume.
pub fn train_with(ds: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainState> {
    train_series(&Series::from_dataset(ds), cfg, opts)
}

#[derive(Debug, Clone)]
pub struct HoldoutModel {
    pub model: Model,
    pub report: TrainReport,
    pub held_time: usize,
    /// Times of the snapshots used for training.
    pub train_times: Vec<f64>,
}

/// Trains without snapshot `held_time`; the neighbouring interval then spans
/// two time units.
pub fn holdout_train(ds: &Dataset, cfg: &TrainConfig, held_time: usize) -> Result<HoldoutModel> {
    let t = ds.num_times();
    if held_time == 0 || held_time + 1 >= t {
        return Err(Error::InvalidArgument(format!(
            "held-out time must be an interior index in 1..{}, got {held_time}",
            t.saturating_sub(1)
        )));
    }
    let mut series = Series::from_dataset(ds);
    series.times.remove(held_time);
    series.snaps.remove(held_time);
    let state = train_series(&series, cfg, &TrainOptions::default())?;
    Ok(HoldoutModel {
        model: state.model,
        report: state.report,
        held_time,
        train_times: series.times,
    })
}

/// Matching loss of `model` on a fixed, seed-determined sample of
/// `per_interval` pairs from every interval: `(total, velocity, growth)`
/// summed over intervals.
pub fn evaluate_vgfm(model: &Model, plans: &[IntervalPlans], cfg: &TrainConfig, per_interval: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = rng_for(seed, STREAM_EVAL, 0);
    let (mut tot, mut vel, mut gro) = (0.0, 0.0, 0.0);
    for iv in plans {
        let mut samples: Vec<MatchSample> = Vec::with_capacity(per_interval);
        for part in &iv.parts {
            let k = per_interval / iv.parts.len();
            samples.extend(part.sampler.sample(part.x0.view(), part.x1.view(), k.max(1), cfg.sigma, &mut rng)?);
        }
        let (t, v, g) = vgfm_loss_terms(&model.v, &model.g, &samples)?;
        tot += t;
        vel += v;
        gro += g;
    }
    Ok((tot, vel, gro))
}
