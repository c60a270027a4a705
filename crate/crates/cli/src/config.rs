//! Resolved run settings and their TOML form.

use std::path::{Path, PathBuf};

use dfca_core::data::{AugmentConfig, ClassCounts, ProtocolSpec, SynthConfig};
use dfca_core::model::ModelConfig;
use dfca_core::train::{TrainConfig, DEFAULT_THRESHOLD};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// File written beside every run's outputs.
pub const CONFIG_FILE: &str = "config.toml";

/// Environment variable naming the default data directory.
pub const DATA_ROOT_VAR: &str = "DFCA_DATA_ROOT";

/// Everything a train, finetune or eval invocation depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub manifest: Option<PathBuf>,
    pub threshold: f64,
    pub train: TrainConfig,
    pub protocol: ProtocolSpec,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            manifest: None,
            threshold: DEFAULT_THRESHOLD,
            train: TrainConfig::default(),
            protocol: ProtocolSpec::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    /// Makes the config self-contained: absolute paths, and augmentation
    /// spelled out because TOML has no way to write `None`.
    pub fn normalize(&mut self) -> Result<(), CliError> {
        if self.train.augment.is_none() {
            self.train.augment = Some(AugmentConfig::identity());
        }
        if let Some(m) = &self.manifest {
            self.manifest = Some(absolute(m)?);
        }
        if let Some(c) = &self.protocol.checkpoint {
            self.protocol.checkpoint = Some(absolute(c)?);
        }
        Ok(())
    }
}

/// Settings of a `synth` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRun {
    /// Images per lens class: normal, soft, textured, print, scan.
    pub counts: ClassCounts,
    pub synth: SynthConfig,
}

impl Default for SynthRun {
    fn default() -> Self {
        SynthRun {
            counts: [200, 200, 200, 200, 0],
            synth: SynthConfig::default(),
        }
    }
}

pub fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write<T: Serialize>(value: &T, dir: &Path) -> Result<PathBuf, CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Usage(format!("cannot encode config: {e}")))?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// The run config stored next to a checkpoint.
pub fn beside(checkpoint: &Path) -> Result<RunConfig, CliError> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let path = dir.join(CONFIG_FILE);
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "{} not found; checkpoints are read together with the config.toml their run wrote",
            path.display()
        )));
    }
    read(&path)
}
