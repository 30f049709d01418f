//! Command-line interface: `gen`, `tune`, `train`, `eval`, `simulate`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, Array2};

use crate::checkpoint::{load_model, save_model, Checkpoint};
use crate::data::{fmt_f64, parse_snapshot_csv, write_dataset_csv, Dataset};
use crate::datagen::{gen_branching, gen_gaussian_mixture_with, gen_simulation_gene, write_growth_truth_csv, BranchParams, GeneRecord, GeneSimParams, MixtureParams};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_from_start, evaluate_holdout, growth_correlation, mass_curve, metrics_csv, unweighted_metrics_csv, write_correlation_csv,
    write_mass_curve_csv, write_metrics_csv, GrowthTruth,
};
use crate::fit_loss::FitVariant;
use crate::ot::{elbow_scan_tau, write_elbow_csv, SinkhornOptions};
use crate::trainer::{holdout_train, write_file, TrainConfig, TrainOptions};

#[derive(Debug, Parser)]
#[command(name = "vgfm", version, about = "Velocity-growth flow matching on population snapshots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Scan the transport cost of the semi-relaxed plan over a tau grid.
    Tune(TuneArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a trained model against a dataset.
    Eval(EvalArgs),
    /// Simulate a trained model from one snapshot.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Gene,
    Gaussian,
    TwoBranch,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    /// JSON generator parameters; unspecified fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Initial cells per cluster (gene only).
    #[arg(long, default_value_t = 300)]
    pub cells: usize,
    /// Ambient dimension (gaussian only).
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eps: f64,
    /// Comma-separated, strictly increasing tau values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tau: Vec<f64>,
    /// Source snapshot index; the target is the next one.
    #[arg(long, default_value_t = 0)]
    pub from: usize,
    #[arg(long)]
    pub normalize_cost: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Hyperparameter overrides shared by `train`.
#[derive(Debug, Args)]
pub struct Overrides {
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `emd`, `sinkhorn` or `sinkhorn:<eps>`.
    #[arg(long)]
    pub fit_variant: Option<FitVariant>,
    #[arg(long)]
    pub steps_per_unit: Option<usize>,
    #[arg(long)]
    pub warmup_iters: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON with `TrainConfig` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base configuration: gene, gaussian, mouse, real.
    #[arg(long, default_value = "gene")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Train without this snapshot index.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score only this snapshot, simulated from the previous one.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long, default_value_t = crate::simulate::DEFAULT_STEPS_PER_UNIT)]
    pub steps_per_unit: usize,
    /// Growth truth file with header `t,x1..xd,true_growth`.
    #[arg(long)]
    pub growth_truth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Snapshot index to start from.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// End time; defaults to the last snapshot time.
    #[arg(long)]
    pub until: Option<f64>,
    #[arg(long, default_value_t = crate::simulate::DEFAULT_STEPS_PER_UNIT)]
    pub steps_per_unit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command. Usage errors
/// are returned as clap errors so the caller can print them verbatim.
pub fn run_from<I, T>(args: I) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(CliError::Usage)?;
    run(cli).map_err(CliError::Run)
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Tune(a) => cmd_tune(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `data.csv` becomes `data.<suffix>.csv`.
pub fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}.csv"))
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    match a.kind {
        GenKind::Gene => {
            let params: GeneSimParams = match &a.config {
                Some(p) => read_json(p)?,
                None => GeneSimParams::default(),
            };
            let out = gen_simulation_gene(&params, a.cells, a.seed)?;
            write_dataset_csv(&out.dataset, &a.out)?;
            write_growth_truth_csv(&sidecar_path(&a.out, "truth"), &out.observed)?;
            write_growth_records(&sidecar_path(&a.out, "ood"), &out.ood)?;
        }
        GenKind::Gaussian => {
            let mut params: MixtureParams = match &a.config {
                Some(p) => read_json(p)?,
                None => MixtureParams::default(),
            };
            if let Some(d) = a.dim {
                params.dim = d;
            }
            write_dataset_csv(&gen_gaussian_mixture_with(&params, a.seed)?.dataset, &a.out)?;
        }
        GenKind::TwoBranch => {
            let params: BranchParams = match &a.config {
                Some(p) => read_json(p)?,
                None => BranchParams::default(),
            };
            write_dataset_csv(&gen_branching(&params, a.seed)?, &a.out)?;
        }
    }
    Ok(())
}

/// Positions with their true growth rates: `t,x1..xd,true_growth`.
pub fn write_growth_records(path: &Path, records: &[GeneRecord]) -> Result<()> {
    let d = records.first().map_or(0, |r| r.points.ncols());
    let mut s = String::from("t");
    for k in 1..=d {
        s.push_str(&format!(",x{k}"));
    }
    s.push_str(",true_growth\n");
    for r in records {
        for (row, g) in r.points.rows().into_iter().zip(r.true_growth.iter()) {
            s.push_str(&fmt_f64(r.time));
            for v in row {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push(',');
            s.push_str(&fmt_f64(*g));
            s.push('\n');
        }
    }
    write_file(path, &s)
}

/// Reads the format written by [`write_growth_records`], grouped by time in
/// order of first appearance.
pub fn read_growth_records(path: &Path) -> Result<Vec<GrowthTruth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "t" || cols.last() != Some(&"true_growth") {
        return Err(perr(1, "header must be `t,x1..xd,true_growth`".into()));
    }
    let d = cols.len() - 2;
    let mut groups: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, line) in lines {
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(i + 1, e.to_string()))?;
        if vals.len() != d + 2 {
            return Err(perr(i + 1, format!("expected {} fields, found {}", d + 2, vals.len())));
        }
        let t = vals[0];
        let pos = match groups.iter().position(|g| g.0 == t) {
            Some(p) => p,
            None => {
                groups.push((t, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[pos].1.extend_from_slice(&vals[1..=d]);
        groups[pos].2.push(vals[d + 1]);
    }
    Ok(groups
        .into_iter()
        .map(|(time, pts, g)| GrowthTruth {
            time,
            points: Array2::from_shape_vec((g.len(), d), pts).expect("row-major fill"),
            true_growth: Array1::from(g),
        })
        .collect())
}

pub fn cmd_tune(a: &TuneArgs) -> Result<()> {
    let ds = parse_snapshot_csv(&a.data)?;
    let snaps = ds.snapshots();
    if a.from + 1 >= snaps.len() {
        return Err(Error::InvalidArgument(format!("no snapshot after index {}", a.from)));
    }
    let pts = elbow_scan_tau(&snaps[a.from], &snaps[a.from + 1], a.eps, &a.tau, a.normalize_cost, &SinkhornOptions::default())?;
    write_elbow_csv(&a.out, &pts)
}

/// Preset, then config file, then flags.
pub fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (c, missing) = TrainConfig::from_json_over(&cfg, &text)?;
        for key in missing {
            log::warn!("config key '{key}' missing; using default");
        }
        cfg = c;
    }
    let o = &a.overrides;
    if let Some(v) = a.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = o.eps {
        cfg.eps = v;
    }
    if let Some(v) = o.tau {
        cfg.tau = v;
    }
    if let Some(v) = o.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = o.fit_variant {
        cfg.fit_variant = v;
    }
    if let Some(v) = o.steps_per_unit {
        cfg.steps_per_unit = v;
    }
    if let Some(v) = o.warmup_iters {
        cfg.warmup_iters = v;
    }
    if let Some(v) = o.epochs {
        cfg.joint_epochs = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let ds = parse_snapshot_csv(&a.data)?;
    let cfg = resolve_config(a)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    let (model, report) = match a.holdout {
        Some(h) => {
            if a.resume.is_some() {
                return Err(Error::InvalidArgument("--resume cannot be combined with --holdout".into()));
            }
            let hm = holdout_train(&ds, &cfg, h)?;
            (hm.model, hm.report)
        }
        None => {
            let ckdir = a.out.join("checkpoints");
            create_dir(&ckdir)?;
            let opts = TrainOptions {
                checkpoint_dir: Some(ckdir),
                resume: a.resume.as_deref().map(Checkpoint::load).transpose()?,
            };
            let st = crate::trainer::train_with(&ds, &cfg, &opts)?;
            (st.model, st.report)
        }
    };
    save_model(&model, &a.out.join("model.ckpt"))?;
    report.write_csv(&a.out.join("report.csv"))?;
    report.write_warmup_csv(&a.out.join("warmup.csv"))?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ds: Dataset = parse_snapshot_csv(&a.data)?;
    let model = load_model(&a.model)?;
    create_dir(&a.out)?;
    let rows = match a.holdout {
        Some(h) => vec![evaluate_holdout(&model, &ds, h, a.steps_per_unit)?],
        None => {
            let rows = evaluate_from_start(&model, &ds, a.steps_per_unit)?;
            write_mass_curve_csv(&a.out.join("mass_curve.csv"), &mass_curve(&model, &ds, a.steps_per_unit)?)?;
            rows
        }
    };
    write_metrics_csv(&a.out.join("metrics.csv"), &rows)?;
    write_file(&a.out.join("metrics_unweighted.csv"), &unweighted_metrics_csv(&rows))?;
    if let Some(p) = &a.growth_truth {
        let truth = read_growth_records(p)?;
        write_correlation_csv(&a.out.join("growth_correlation.csv"), &growth_correlation(&model, &truth)?)?;
    }
    log::info!("{}", metrics_csv(&rows).trim_end());
    Ok(())
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let ds = parse_snapshot_csv(&a.data)?;
    let model = load_model(&a.model)?;
    let snap = ds
        .snapshots()
        .get(a.start)
        .ok_or_else(|| Error::InvalidArgument(format!("no snapshot at index {}", a.start)))?;
    let t0 = snap.time_index as f64;
    let t1 = a.until.unwrap_or(ds.snapshots().last().unwrap().time_index as f64);
    let bundle = model.simulate(snap.points.view(), t0, t1, a.steps_per_unit)?;
    bundle.write_csv(&a.out)
}
