//! The TOML run configuration consumed by the command-line tool.
//!
//! ```toml
//! [model]
//! n_layer = 6
//! n_head = 6
//! n_embd = 192
//! block_size = 256
//! vocab_size = 256
//! n_skip_layer = 4
//! n_skip_head = 4
//!
//! [train]
//! max_steps = 2000
//!
//! [data]
//! train = "data/train.bin"
//! val = "data/val.bin"
//! out_dir = "runs/desk"
//! ```
//!
//! Unknown keys are rejected at every level. Relative paths resolve against
//! the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{BenchOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    /// Checkpoints and record stream go here.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub steps: usize,
    pub warmup: usize,
    pub micro_batch: usize,
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let d = BenchOptions::default();
        BenchConfig {
            steps: d.steps,
            warmup: d.warmup,
            micro_batch: d.micro_batch,
            parallel: d.parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(d) = cfg.data.as_mut() {
            for p in [&mut d.train, &mut d.val, &mut d.out_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.bench.micro_batch == 0 {
            return Err(Error::Config("bench.micro_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [data] section".into()))
    }

    pub fn bench_options(&self) -> BenchOptions {
        BenchOptions {
            steps: self.bench.steps,
            warmup: self.bench.warmup,
            micro_batch: self.bench.micro_batch,
            seed: self.train.seed,
            parallel: self.bench.parallel,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
