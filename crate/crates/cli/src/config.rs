use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use pbm_core::bnn::{NetworkConfig, TrainConfig};
use pbm_core::calibration::CalibrationOptions;
use pbm_core::photonic::PhotonicConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples: usize,
    pub threshold_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            threshold_grid: 100,
        }
    }
}

#[derive(clap::Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Everything a run depends on. Missing fields take their defaults, and the
/// resolved value is written next to every command's outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub photonic: PhotonicConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub calibration: CalibrationOptions,
    pub eval: EvalConfig,
    /// Command name and the paths and overrides it was given.
    pub command: String,
    pub inputs: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(common: &Common, command: &str) -> Result<Self, CliError> {
        let path = common.config.as_deref();
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.command = command.to_string();
        if let Some(p) = path {
            cfg.note_path("config", p);
        }
        Ok(cfg)
    }

    pub fn note(&mut self, key: &str, value: impl std::fmt::Display) {
        self.inputs.insert(key.to_string(), value.to_string());
    }

    pub fn note_path(&mut self, key: &str, path: &Path) {
        self.note(key, path.display());
    }

    pub fn archive(&self, out: &Path) -> Result<(), CliError> {
        write_json(&out.join("config.json"), self)
    }
}

pub fn output_dir(out: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    Ok(out.to_path_buf())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut f = File::create(path).map_err(io)?;
    serde_json::to_writer_pretty(&mut f, value)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(b"\n").map_err(io)
}
