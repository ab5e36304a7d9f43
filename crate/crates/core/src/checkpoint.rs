//! JSON checkpoints: a manifest of named parameters with shapes and flat
//! row-major values.
//!
//! Values are written with the shortest decimal representation that parses
//! back to the identical `f64`, so a save/load cycle is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const FORMAT: &str = "setgan-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: String,
    pub trainable: bool,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_module<M: Module + ?Sized>(module: &M) -> Self {
        let entries = module
            .parameters()
            .into_iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                init: p.init.clone(),
                trainable: p.trainable,
                values: p.value.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: FORMAT.to_string(),
            entries,
        }
    }

    /// Copies values into `module`, matching parameters by name.
    ///
    /// Every parameter of the module must be present with the same shape.
    pub fn apply_to<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::contract(format!("unknown checkpoint format {}", self.format)));
        }
        for p in module.parameters_mut() {
            let e = self
                .entries
                .iter()
                .find(|e| e.name == p.name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter {}", p.name)))?;
            if e.shape != p.value.shape() {
                return Err(Error::dim(
                    "checkpoint",
                    format!("{}: stored {:?}, module {:?}", p.name, e.shape, p.value.shape()),
                ));
            }
            p.value = Tensor::new(e.shape.clone(), e.values.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
