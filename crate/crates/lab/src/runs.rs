//! Run directories.
//!
//! ```text
//! <run>/config.json                  resolved configuration (replayable)
//! <run>/run.json                     id, best epoch, best SBD, epochs run
//! <run>/log.csv                      epoch,d_loss,g_loss,sbd,wall_s
//! <run>/checkpoint/generator.json
//! <run>/checkpoint/discriminator.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use setgan::checkpoint::Checkpoint;
use setgan::training::{init_models, train, Generator, TrainOutcome};
use sha2::{Digest, Sha256};

use crate::config::{load_map, ExperimentConfig};
use crate::data::load_train_data;
use crate::error::{LabError, LabResult};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "run.json";
pub const LOG_FILE: &str = "log.csv";
pub const GENERATOR_FILE: &str = "checkpoint/generator.json";
pub const DISCRIMINATOR_FILE: &str = "checkpoint/discriminator.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub best_epoch: usize,
    pub best_sbd: Option<f64>,
    pub epochs_run: usize,
}

/// First 12 hex digits of the SHA-256 of the resolved configuration.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_json().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, contents: &str) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::file(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| LabError::file(path, e))
}

/// Trains `cfg` and writes the run directory under `dir`.
pub fn train_run(cfg: &ExperimentConfig, dir: &Path) -> LabResult<(RunSummary, TrainOutcome)> {
    let cfg = cfg.clone().validate()?;
    write(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    let data = load_train_data(&cfg.data)?;
    let out = train(&cfg.run, &data)?;
    let summary = RunSummary {
        id: run_id(&cfg),
        best_epoch: out.best_epoch,
        best_sbd: out.best_sbd,
        epochs_run: out.epochs_run,
    };
    write(&dir.join(LOG_FILE), &out.log.to_csv())?;
    write(&dir.join(GENERATOR_FILE), &Checkpoint::from_module(&out.generator).to_json()?)?;
    write(&dir.join(DISCRIMINATOR_FILE), &Checkpoint::from_module(&out.discriminator).to_json()?)?;
    write(&dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&summary)?)?;
    Ok((summary, out))
}

pub fn load_config(dir: &Path) -> LabResult<ExperimentConfig> {
    ExperimentConfig::from_map(load_map(&dir.join(CONFIG_FILE))?)?.validate()
}

/// The configuration and best generator stored in `dir`.
pub fn load_generator(dir: &Path) -> LabResult<(ExperimentConfig, Generator)> {
    let cfg = load_config(dir)?;
    let path = dir.join(GENERATOR_FILE);
    if !path.is_file() {
        return Err(LabError::usage(format!("{}: no generator checkpoint", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| LabError::file(&path, e))?;
    let ckpt = Checkpoint::from_json(&text).map_err(|e| LabError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let width = ckpt
        .entries
        .iter()
        .find(|e| e.name == "g/out/bias")
        .map(|e| e.values.len())
        .ok_or_else(|| LabError::Parse {
            path: path.display().to_string(),
            detail: "no output layer".into(),
        })?;
    let (mut g, _) = init_models(&cfg.run, width)?;
    ckpt.apply_to(&mut g)?;
    Ok((cfg, g))
}

/// Default run directory: `<root>/<id>`.
pub fn default_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(run_id(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use setgan::discriminator::Architecture;
    use setgan::nn::Module;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.run.arch = Architecture::Gan;
        c.run.epochs = 1;
        c.run.g_hidden = 8;
        c.run.d_hidden = 8;
        c.run.eval_samples = 256;
        c.data.samples = 500;
        c.data.heldout = 256;
        c
    }

    #[test]
    fn id_tracks_configuration() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(run_id(&a), run_id(&a.clone()));
        assert_eq!(run_id(&a).len(), 12);
        b.run.seed = 9;
        assert_ne!(run_id(&a), run_id(&b));
    }

    #[test]
    fn checkpoint_reloads_best_generator() {
        let dir = tempfile::tempdir().unwrap();
        let (summary, out) = train_run(&tiny(), dir.path()).unwrap();
        assert_eq!(summary.epochs_run, 1);
        let (cfg, g) = load_generator(dir.path()).unwrap();
        assert_eq!(cfg, tiny().validate().unwrap());
        let a: Vec<_> = g.parameters().iter().map(|p| p.value.clone()).collect();
        let b: Vec<_> = out.generator.parameters().iter().map(|p| p.value.clone()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_generator(dir.path()).is_err());
        write(&dir.path().join(CONFIG_FILE), &tiny().to_json()).unwrap();
        let err = load_generator(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
