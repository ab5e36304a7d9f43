//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};
use setgan::discriminator::Architecture;
use setgan::metrics::{multiscale_sbd, sbd_against};
use setgan::Tensor;

use crate::config::{apply_overrides, load_map, ExperimentConfig};
use crate::data::{datagen_grid, load_train_data, read_samples, write_samples, GridDatasetSpec};
use crate::error::{LabError, LabResult};
use crate::eval::{evaluate, EvalProtocol, Sampler};
use crate::report;
use crate::runs::{self, train_run};
use crate::sweep::{run_sweep, SweepSpec};

#[derive(Debug, Parser)]
#[command(name = "setgan", version, about = "Set-based GAN experiments on Gaussian-mixture grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write samples from the Gaussian grid to a CSV file.
    Datagen(DatagenArgs),
    /// Train one run and write its run directory.
    Train(TrainArgs),
    /// Score the best generator of a run over repeated trials.
    Eval(EvalArgs),
    /// Train and evaluate a grid of architectures and hyperparameters.
    Sweep(SweepArgs),
    /// Space binning distance between two sample files.
    Sbd(SbdArgs),
    /// Summarize a sweep results file per architecture and GD ratio.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 25_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub side: usize,
    #[arg(long, default_value_t = 2.0)]
    pub spacing: f64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Configuration sources shared by `train` and `sweep`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any configuration key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub arch: Option<Architecture>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gd_ratio: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Run directory; defaults to `<runs-dir>/<run id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 4000)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 3.0)]
    pub n_std: f64,
}

impl ProtocolArgs {
    fn protocol(&self, seed: u64) -> EvalProtocol {
        EvalProtocol {
            trials: self.trials,
            samples: self.samples,
            depth: self.depth,
            n_std: self.n_std,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(required_unless_present = "ground_truth")]
    pub run: Option<PathBuf>,
    /// Evaluate the true mixture sampler instead of a generator.
    #[arg(long, conflicts_with = "run")]
    pub ground_truth: bool,
    /// Data configuration for `--ground-truth`.
    #[arg(long, requires = "ground_truth")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub protocol: ProtocolArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics file; defaults to `<run>/eval.csv`, or stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "gan,md,pacgan,setgan")]
    pub archs: Vec<Architecture>,
    #[arg(long, default_value_t = 2e-5)]
    pub lr_low: f64,
    #[arg(long, default_value_t = 2e-3)]
    pub lr_high: f64,
    #[arg(long, default_value_t = 8)]
    pub lr_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub lr_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub ratios: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, env = "SETGAN_JOBS", default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SbdArgs {
    pub real: PathBuf,
    pub fake: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    /// Skip one header line in both files.
    #[arg(long)]
    pub header: bool,
    /// Also compare Haar detail bands of square images stored one per row.
    #[arg(long, requires = "image_side")]
    pub haar_levels: Option<usize>,
    #[arg(long)]
    pub image_side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub results: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn base_map(args: &ConfigArgs) -> LabResult<Map<String, Value>> {
    let mut map = match &args.config {
        Some(p) => load_map(p)?,
        None => Map::new(),
    };
    if let Some(e) = args.epochs {
        map.insert("epochs".into(), Value::from(e));
    }
    Ok(map)
}

/// Resolves file, flags and `--set` pairs; later sources win.
pub fn resolve_train_config(args: &TrainArgs) -> LabResult<ExperimentConfig> {
    let mut map = base_map(&args.config)?;
    if let Some(a) = args.arch {
        map.insert("arch".into(), Value::from(a.name()));
    }
    let ints = [("k", args.k), ("gd_ratio", args.gd_ratio), ("batch", args.batch)];
    for (key, v) in ints {
        if let Some(v) = v {
            map.insert(key.into(), Value::from(v));
        }
    }
    if let Some(lr) = args.lr {
        map.insert("lr".into(), Value::from(lr));
    }
    if let Some(s) = args.seed {
        map.insert("seed".into(), Value::from(s));
    }
    apply_overrides(&mut map, &args.config.set)?;
    ExperimentConfig::from_map(map)?.validate()
}

fn emit(text: &str, out: Option<&Path>) -> LabResult<()> {
    print!("{text}");
    if let Some(p) = out {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e))?;
        }
        std::fs::write(p, text).map_err(|e| LabError::file(p, e))?;
    }
    Ok(())
}

fn datagen(a: &DatagenArgs) -> LabResult<()> {
    let spec = GridDatasetSpec {
        side: a.side,
        spacing: a.spacing,
        sigma: a.sigma,
        samples: a.samples,
        seed: a.seed,
    };
    write_samples(&a.out, &datagen_grid(&spec)?)
}

fn cmd_train(a: &TrainArgs) -> LabResult<()> {
    let cfg = resolve_train_config(a)?;
    let dir = a.out.clone().unwrap_or_else(|| runs::default_dir(&a.runs_dir, &cfg));
    let (summary, _) = train_run(&cfg, &dir)?;
    println!("{}", dir.display());
    log::info!(
        "run {}: {} epochs, best epoch {}, best sbd {:?}",
        summary.id,
        summary.epochs_run,
        summary.best_epoch,
        summary.best_sbd
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> LabResult<()> {
    let protocol = a.protocol.protocol(a.seed);
    let (cfg, generator, default_out) = match &a.run {
        Some(dir) => {
            let (cfg, g) = runs::load_generator(dir)?;
            (cfg, Some(g), Some(dir.join("eval.csv")))
        }
        None => {
            let map = match &a.config {
                Some(p) => load_map(p)?,
                None => Map::new(),
            };
            (ExperimentConfig::from_map(map)?.validate()?, None, None)
        }
    };
    let mixture = GridDatasetSpec::from_data_config(&cfg.data).mixture()?;
    let reference = load_train_data(&cfg.data)?.heldout;
    let report = match generator {
        Some(mut g) => evaluate(Sampler::Generator(&mut g), &reference, &mixture, &protocol)?,
        None => evaluate(Sampler::GroundTruth(&mixture), &reference, &mixture, &protocol)?,
    };
    emit(&report.to_csv(), a.out.as_deref().or(default_out.as_deref()))
}

fn cmd_sweep(a: &SweepArgs) -> LabResult<()> {
    let mut map = base_map(&a.config)?;
    apply_overrides(&mut map, &a.config.set)?;
    let base = ExperimentConfig::from_map(map)?;
    let spec = SweepSpec {
        archs: a.archs.clone(),
        lr_low: a.lr_low,
        lr_high: a.lr_high,
        lr_draws: a.lr_draws,
        lr_seed: a.lr_seed,
        ratios: a.ratios.clone(),
        seeds: a.seeds.clone(),
    };
    let protocol = EvalProtocol {
        trials: a.trials,
        samples: base.run.eval_samples,
        ..EvalProtocol::default()
    };
    let rows = run_sweep(&base, &spec, &protocol, a.jobs, &a.out)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{}: {} runs, {} failed", a.out.display(), rows.len(), failed);
    Ok(())
}

fn images(t: &Tensor, side: usize) -> LabResult<Vec<Tensor>> {
    if t.cols() != side * side {
        return Err(LabError::usage(format!(
            "rows have {} values, images of side {side} need {}",
            t.cols(),
            side * side
        )));
    }
    (0..t.rows())
        .map(|i| Ok(Tensor::new(vec![side, side], t.row(i).to_vec())?))
        .collect()
}

fn cmd_sbd(a: &SbdArgs) -> LabResult<()> {
    let real = read_samples(&a.real, a.header)?;
    let fake = read_samples(&a.fake, a.header)?;
    if real.cols() != fake.cols() {
        return Err(LabError::usage(format!(
            "width mismatch: {} has {} columns, {} has {}",
            a.real.display(),
            real.cols(),
            a.fake.display(),
            fake.cols()
        )));
    }
    println!("sbd,{}", sbd_against(&real, &fake, a.depth)?);
    if let (Some(levels), Some(side)) = (a.haar_levels, a.image_side) {
        let m = multiscale_sbd(&images(&real, side)?, &images(&fake, side)?, a.depth, levels)?;
        for (i, v) in m.per_level.iter().enumerate() {
            println!("sbd_level_{},{v}", i + 1);
        }
        println!("sbd_haar_mean,{}", m.mean);
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> LabResult<()> {
    emit(&report::to_csv(&report::summarize(&a.results)?), a.out.as_deref())
}

pub fn run(cli: &Cli) -> LabResult<()> {
    match &cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Sbd(a) => cmd_sbd(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
