//! Run configuration: one TOML document drives every command.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::TextureMode;
use crate::error::{Error, Result};
use crate::eval::{SynthSpec, ToySpec};
use crate::network::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pixels averaged for the image score.
    pub top_k: usize,
    /// Also write a colour heatmap per test image.
    pub heatmaps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 100,
            heatmaps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub reps: usize,
    /// Pool sizes for the memory-scaling sweep (empty skips it).
    pub memory_sizes: Vec<usize>,
    /// Run single-threaded.
    pub deterministic: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 5,
            reps: 50,
            memory_sizes: vec![1, 30, 70],
            deterministic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root holding one directory per category.
    pub data_root: PathBuf,
    pub category: String,
    pub texture: TextureMode,
    pub out: PathBuf,
    /// Master seed; every random draw derives from it.
    pub seed: u64,
    /// Image/mask pairs written by `simulate`.
    pub simulate_count: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub toyset: ToySpec,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            category: "bottle".into(),
            texture: TextureMode::Procedural,
            out: PathBuf::from("runs/default"),
            seed: 0,
            simulate_count: 16,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            toyset: ToySpec::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Set one field by dotted path, e.g. `train.optimizer.lr=0.01`. The
    /// value is read as a TOML value, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::ConfigParse(format!("expected KEY=VALUE, got {assignment:?}")))?;
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_owned()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::ConfigParse(format!("{key}: {part} is not a table")))?;
            if i + 1 == parts.len() {
                table.insert((*part).to_owned(), value.clone());
                break;
            }
            node = table
                .entry(*part)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = root.try_into().map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.toyset.validate()?;
        if self.eval.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.image_size, 256);
        assert_eq!(c.model.memory_size, 30);
        assert_eq!((c.train.batch_normal, c.train.batch_anomalous), (4, 4));
        assert_eq!(c.train.iterations, 2700);
        assert_eq!(c.train.optimizer.lr, 0.04);
        assert_eq!(c.train.loss.gamma, 4.0);
        assert_eq!((c.train.loss.lambda_l1, c.train.loss.lambda_focal), (0.6, 0.4));
        assert_eq!(c.eval.top_k, 100);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.model.ablation.memory = false;
        c.seed = 9;
        c.texture = TextureMode::Directory { path: "dtd".into() };
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn dotted_assignments() {
        let mut c = RunConfig::default();
        c.set("train.optimizer.lr=0.01").unwrap();
        c.set("category=carpet").unwrap();
        c.set("model.ablation.memory=false").unwrap();
        c.set("bench.memory_sizes=[2, 4]").unwrap();
        assert_eq!(c.train.optimizer.lr, 0.01);
        assert_eq!(c.category, "carpet");
        assert!(!c.model.ablation.memory);
        assert_eq!(c.bench.memory_sizes, vec![2, 4]);
        assert_eq!(c.set("train.nope=1").unwrap_err().kind(), "config_parse");
        assert_eq!(c.set("seed").unwrap_err().kind(), "config_parse");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("sed = 3").unwrap_err();
        assert_eq!(e.kind(), "config_parse");
        let e = RunConfig::from_toml("[train]\niters = 3").unwrap_err();
        assert_eq!(e.kind(), "config_parse");
    }
}
