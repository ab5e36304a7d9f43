//! Hyperparameter sweeps: architecture × learning rate × GD ratio × seed.
//!
//! Each cell is an independent deterministic run. Rows are appended to the
//! results file as cells finish, then the file is rewritten in grid order so
//! its bytes do not depend on scheduling. Wall-clock times go to a separate
//! timings file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setgan::discriminator::Architecture;
use setgan::metrics::MixtureSpec;
use setgan::training::{train, TrainData};

use crate::config::ExperimentConfig;
use crate::data::{load_train_data, GridDatasetSpec};
use crate::error::{LabError, LabResult};
use crate::eval::{evaluate, EvalProtocol, Sampler};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub archs: Vec<Architecture>,
    pub lr_low: f64,
    pub lr_high: f64,
    pub lr_draws: usize,
    /// Seed for the learning-rate draws.
    pub lr_seed: u64,
    pub ratios: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            archs: Architecture::ALL.to_vec(),
            lr_low: 2e-5,
            lr_high: 2e-3,
            lr_draws: 8,
            lr_seed: 0,
            ratios: vec![1, 2, 3],
            seeds: vec![0],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> LabResult<()> {
        if !(self.lr_low > 0.0 && self.lr_low < self.lr_high && self.lr_high.is_finite()) {
            return Err(LabError::usage("invalid sweep: need 0 < lr low < lr high"));
        }
        if self.lr_draws == 0 || self.archs.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(LabError::usage("invalid sweep: every axis needs at least one value"));
        }
        if self.ratios.contains(&0) {
            return Err(LabError::usage("invalid sweep: GD ratios must be at least 1"));
        }
        Ok(())
    }

    /// Learning rates drawn uniformly from `[lr_low, lr_high)`, shared by
    /// every architecture.
    pub fn learning_rates(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.lr_seed);
        (0..self.lr_draws).map(|_| rng.random_range(self.lr_low..self.lr_high)).collect()
    }

    /// Every cell in grid order.
    pub fn cells(&self) -> Vec<Cell> {
        let lrs = self.learning_rates();
        let mut out = Vec::new();
        for &arch in &self.archs {
            for &lr in &lrs {
                for &gd_ratio in &self.ratios {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            arch,
                            lr,
                            gd_ratio,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub arch: Architecture,
    pub lr: f64,
    pub gd_ratio: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: Cell,
    pub sbd: Option<f64>,
    pub inception: Option<f64>,
    pub high_quality: Option<f64>,
    pub modes: Option<f64>,
    pub epochs_run: usize,
    pub status: String,
}

pub const HEADER: &str = "arch,lr,gd_ratio,seed,sbd,is,hq,modes,epochs_run,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepRow {
    pub fn to_csv_line(&self) -> String {
        let c = &self.cell;
        format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.arch,
            c.lr,
            c.gd_ratio,
            c.seed,
            opt(self.sbd),
            opt(self.inception),
            opt(self.high_quality),
            opt(self.modes),
            self.epochs_run,
            self.status
        )
    }
}

/// Trains and evaluates one cell; failures become a row with a status.
pub fn run_cell(
    base: &ExperimentConfig,
    cell: Cell,
    data: &TrainData,
    mixture: &MixtureSpec,
    protocol: &EvalProtocol,
) -> SweepRow {
    let mut row = SweepRow {
        cell,
        sbd: None,
        inception: None,
        high_quality: None,
        modes: None,
        epochs_run: 0,
        status: String::new(),
    };
    let mut cfg = base.clone();
    cfg.run.arch = cell.arch;
    cfg.run.lr = cell.lr;
    cfg.run.gd_ratio = cell.gd_ratio;
    cfg.run.seed = cell.seed;
    if matches!(cell.arch, Architecture::Gan | Architecture::Md) {
        cfg.run.k = 1;
    }
    let result = (|| -> LabResult<()> {
        let cfg = cfg.validate()?;
        let mut out = train(&cfg.run, data)?;
        row.epochs_run = out.epochs_run;
        let p = EvalProtocol {
            seed: cell.seed,
            ..protocol.clone()
        };
        let rep = evaluate(Sampler::Generator(&mut out.generator), &data.heldout, mixture, &p)?;
        let mean = |m: &str| rep.metric(m).map(|s| s.mean);
        row.sbd = mean("sbd");
        row.inception = mean("inception");
        row.high_quality = mean("high_quality");
        row.modes = mean("modes");
        Ok(())
    })();
    row.status = match result {
        Ok(()) => "ok".into(),
        Err(e) => {
            log::warn!("{} lr={} gd={} seed={}: {e}", cell.arch, cell.lr, cell.gd_ratio, cell.seed);
            match e {
                LabError::Core(setgan::Error::NumericalAbort { epoch, .. }) => {
                    row.epochs_run = epoch;
                    "numerical_abort".into()
                }
                _ => "error".into(),
            }
        }
    };
    row
}

pub fn timings_path(results: &Path) -> PathBuf {
    let stem = results.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    results.with_file_name(format!("{stem}.timings.csv"))
}

/// Runs every cell with up to `jobs` workers and writes `results`.
pub fn run_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    protocol: &EvalProtocol,
    jobs: usize,
    results: &Path,
) -> LabResult<Vec<SweepRow>> {
    spec.validate()?;
    protocol.validate()?;
    let data = load_train_data(&base.data)?;
    let mixture = GridDatasetSpec::from_data_config(&base.data).mixture()?;
    let cells = spec.cells();
    if let Some(dir) = results.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e))?;
    }
    let mut file = fs::File::create(results).map_err(|e| LabError::file(results, e))?;
    file.write_all(format!("{HEADER}\n").as_bytes())
        .map_err(|e| LabError::file(results, e))?;
    let writer = Mutex::new(file);
    let slots: Vec<Mutex<Option<(SweepRow, f64)>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let write_err = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let start = Instant::now();
                let row = run_cell(base, cells[i], &data, &mixture, protocol);
                let wall = start.elapsed().as_secs_f64();
                log::info!("cell {}/{}: {}", i + 1, cells.len(), row.to_csv_line().trim_end());
                {
                    let mut f = writer.lock().expect("writer lock");
                    if let Err(e) = f.write_all(row.to_csv_line().as_bytes()).and_then(|_| f.flush()) {
                        write_err.lock().expect("error lock").get_or_insert(e);
                    }
                }
                *slots[i].lock().expect("slot lock") = Some((row, wall));
            });
        }
    });
    if let Some(e) = write_err.into_inner().expect("error lock") {
        return Err(LabError::file(results, e));
    }
    let done: Vec<(SweepRow, f64)> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every cell ran"))
        .collect();
    let mut body = format!("{HEADER}\n");
    let mut timings = String::from("arch,lr,gd_ratio,seed,wall_s\n");
    for (row, wall) in &done {
        body.push_str(&row.to_csv_line());
        let c = &row.cell;
        timings.push_str(&format!("{},{},{},{},{:.3}\n", c.arch, c.lr, c.gd_ratio, c.seed, wall));
    }
    fs::write(results, body).map_err(|e| LabError::file(results, e))?;
    let tp = timings_path(results);
    fs::write(&tp, timings).map_err(|e| LabError::file(&tp, e))?;
    Ok(done.into_iter().map(|(r, _)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rates_stay_in_range() {
        let s = SweepSpec::default();
        let lrs = s.learning_rates();
        assert_eq!(lrs.len(), 8);
        assert!(lrs.iter().all(|&l| (2e-5..2e-3).contains(&l)));
        assert_eq!(lrs, s.learning_rates());
    }

    #[test]
    fn grid_size_is_the_product_of_axes() {
        let s = SweepSpec {
            archs: vec![Architecture::Gan, Architecture::Setgan],
            lr_draws: 4,
            ratios: vec![1, 2],
            seeds: vec![0, 1, 2],
            ..SweepSpec::default()
        };
        assert_eq!(s.cells().len(), 2 * 4 * 2 * 3);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let base = SweepSpec::default();
        assert!(SweepSpec { lr_low: 1e-2, ..base.clone() }.validate().is_err());
        assert!(SweepSpec { lr_draws: 0, ..base.clone() }.validate().is_err());
        assert!(SweepSpec { ratios: vec![0], ..base }.validate().is_err());
    }

    #[test]
    fn timings_live_beside_results() {
        assert_eq!(timings_path(Path::new("out/sweep.csv")), Path::new("out/sweep.timings.csv"));
    }
}
