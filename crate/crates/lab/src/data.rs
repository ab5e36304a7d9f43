//! Synthetic grid data and sample files.
//!
//! Sample files are headerless CSV with one sample per row. Values are
//! written in Rust's shortest round-trip decimal form, so files are
//! byte-identical for a given seed and parse back to the same `f64`s.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use setgan::metrics::MixtureSpec;
use setgan::training::TrainData;
use setgan::Tensor;

use crate::config::DataConfig;
use crate::error::{LabError, LabResult};

/// Stream for the held-out slice of a synthesized dataset.
const HELDOUT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GridDatasetSpec {
    pub side: usize,
    pub spacing: f64,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GridDatasetSpec {
    fn default() -> Self {
        GridDatasetSpec {
            side: 5,
            spacing: 2.0,
            sigma: 0.05,
            samples: 25_000,
            seed: 0,
        }
    }
}

impl GridDatasetSpec {
    /// Centers run over `spacing * (i - (side - 1) / 2)` on both axes.
    pub fn mixture(&self) -> LabResult<MixtureSpec> {
        let start = -self.spacing * (self.side as f64 - 1.0) / 2.0;
        Ok(MixtureSpec::grid(self.side, start, self.spacing, self.sigma)?)
    }

    pub fn from_data_config(d: &DataConfig) -> Self {
        GridDatasetSpec {
            side: d.side,
            spacing: d.spacing,
            sigma: d.sigma,
            samples: d.samples,
            seed: d.seed,
        }
    }
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// `samples` draws from the grid mixture, deterministic in `seed`.
pub fn datagen_grid(spec: &GridDatasetSpec) -> LabResult<Tensor> {
    if spec.samples == 0 {
        return Err(LabError::usage("datagen needs at least one sample"));
    }
    Ok(spec.mixture()?.sample(spec.samples, &mut stream(spec.seed, 0)))
}

pub fn samples_to_csv(t: &Tensor) -> String {
    let mut s = String::with_capacity(t.numel() * 12);
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_samples(path: &Path, t: &Tensor) -> LabResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| LabError::file(path, e))?;
    f.write_all(samples_to_csv(t).as_bytes())
        .map_err(|e| LabError::file(path, e))
}

/// Reads a sample CSV, skipping one header line if `header`.
pub fn read_samples(path: &Path, header: bool) -> LabResult<Tensor> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| LabError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| LabError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let parse_err = |detail: String| LabError::Parse {
            path: path.display().to_string(),
            detail: format!("row {}: {detail}", i + 1),
        };
        if *width.get_or_insert(rec.len()) != rec.len() {
            return Err(parse_err(format!("expected {} columns, found {}", width.unwrap(), rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| parse_err(format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("`{field}` is not finite")));
            }
            data.push(v);
        }
        rows += 1;
    }
    let width = width.filter(|w| *w > 0).ok_or_else(|| LabError::Parse {
        path: path.display().to_string(),
        detail: "no samples".into(),
    })?;
    Ok(Tensor::new(vec![rows, width], data)?)
}

fn tail_split(t: &Tensor, tail: usize) -> LabResult<(Tensor, Tensor)> {
    let n = t.rows();
    if tail == 0 || tail >= n {
        return Err(LabError::usage(format!("cannot hold out {tail} of {n} samples")));
    }
    let d = t.cols();
    let (a, b) = t.data().split_at((n - tail) * d);
    Ok((
        Tensor::new(vec![n - tail, d], a.to_vec())?,
        Tensor::new(vec![tail, d], b.to_vec())?,
    ))
}

/// Training pool and held-out slice described by `d`.
///
/// Synthetic data draws the held-out slice from an independent stream of the
/// same seed; a training file without a held-out file gives up its last
/// `data.heldout` rows.
pub fn load_train_data(d: &DataConfig) -> LabResult<TrainData> {
    let spec = GridDatasetSpec::from_data_config(d);
    match (&d.path, &d.heldout_path) {
        (None, _) => {
            let mix = spec.mixture()?;
            let train = datagen_grid(&spec)?;
            let heldout = match &d.heldout_path {
                Some(p) => read_samples(p, false)?,
                None => mix.sample(d.heldout, &mut stream(d.seed, HELDOUT_STREAM)),
            };
            Ok(TrainData { train, heldout })
        }
        (Some(p), Some(h)) => Ok(TrainData {
            train: read_samples(p, false)?,
            heldout: read_samples(h, false)?,
        }),
        (Some(p), None) => {
            let (train, heldout) = tail_split(&read_samples(p, false)?, d.heldout)?;
            Ok(TrainData { train, heldout })
        }
    }
}
