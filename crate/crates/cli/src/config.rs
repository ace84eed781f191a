//! TOML run configuration shared by every subcommand.

use std::path::Path;

use ivio::bias_net::{Architecture, TrainConfig};
use ivio::eval::Alignment;
use ivio::msckf::{CameraModel, FilterConfig};
use ivio::NoiseParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every table is optional and falls back to its defaults; unknown keys are
/// rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds network initialization and segment shuffling.
    pub seed: u64,
    pub noise: NoiseParams,
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub architecture: Architecture,
    /// Overrides the dataset's `camera.toml`.
    pub camera: Option<CameraModel>,
    pub alignment: Alignment,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if table.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(CliError::Config(
                "`train.seed` is not accepted; set the top-level `seed`".into(),
            ));
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let config = |e: ivio::Error| CliError::Config(e.to_string());
        self.noise.validate().map_err(config)?;
        self.filter.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        self.architecture.validate().map_err(config)?;
        if let Some(c) = &self.camera {
            c.validate().map_err(config)?;
        }
        if self.architecture.window != self.train.window {
            return Err(CliError::Config(format!(
                "architecture.window ({}) must equal train.window ({})",
                self.architecture.window, self.train.window
            )));
        }
        Ok(())
    }

    /// The configured camera, else `<dataset>/camera.toml`, else the default.
    pub fn camera_for(&self, dataset: &Path) -> Result<CameraModel, CliError> {
        if let Some(c) = &self.camera {
            return Ok(c.clone());
        }
        let path = dataset.join(CAMERA_FILE);
        if !path.exists() {
            return Ok(CameraModel::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| ivio::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let camera: CameraModel = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        camera
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(camera)
    }
}

pub const CAMERA_FILE: &str = "camera.toml";
