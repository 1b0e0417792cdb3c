//! Configuration documents for the standalone pipelines.

use std::path::{Path, PathBuf};

use hilbench::orchestrator::config::parse_json;
use hilbench::orchestrator::ConfigError;
use hilbench::plant::{Channel, PlantConfig};
use hilbench::registration::MlpHyper;
use serde::{Deserialize, Serialize};

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))
}

/// Step-response identification on the simulated plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    #[serde(default = "one")]
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default = "uncalibrated")]
    pub plant_preset: String,
    #[serde(default)]
    pub plant: Option<PlantConfig>,
    #[serde(default = "both")]
    pub channels: Vec<Channel>,
    pub amplitude: f64,
    /// Logged time after the step, seconds.
    pub duration_s: f64,
    /// Measurement noise as a fraction of the response step `K * amplitude`.
    #[serde(default)]
    pub noise_fraction: f64,
}

fn one() -> u32 {
    1
}
fn uncalibrated() -> String {
    "paper-uncalibrated".into()
}
fn both() -> Vec<Channel> {
    vec![Channel::Steering, Channel::Velocity]
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            seed: 1,
            plant_preset: uncalibrated(),
            plant: None,
            channels: both(),
            amplitude: 0.5,
            duration_s: 3.0,
            noise_fraction: 0.02,
        }
    }
}

impl IdentifyConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = parse_json(&read(path)?)?;
        cfg.plant_config()?;
        Ok(cfg)
    }

    pub fn plant_config(&self) -> Result<PlantConfig, ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::invalid("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        let plant = match &self.plant {
            Some(p) => p.clone(),
            None => PlantConfig::preset(&self.plant_preset).map_err(|e| ConfigError::invalid("plant_preset", e.to_string()))?,
        };
        plant.validate().map_err(|e| ConfigError::invalid("plant", e.to_string()))?;
        if self.channels.is_empty() {
            return Err(ConfigError::invalid("channels", "at least one channel"));
        }
        if !(self.amplitude.is_finite() && self.amplitude != 0.0) {
            return Err(ConfigError::invalid("amplitude", "must be finite and non-zero"));
        }
        if !(self.noise_fraction.is_finite() && self.noise_fraction >= 0.0) {
            return Err(ConfigError::invalid("noise_fraction", "must be >= 0"));
        }
        Ok(plant)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// The synthetic distortion benchmark generated from `seed`.
    Benchmark,
    /// Matched pairs in the dataset CSV format.
    File { file: PathBuf },
}

/// Spatial registration ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    #[serde(default = "one")]
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetSource,
    #[serde(default = "train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub mlp: Option<MlpHyper>,
}

fn train_fraction() -> f64 {
    0.8
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self { schema_version: 1, seed: 2024, dataset: DatasetSource::Benchmark, train_fraction: 0.8, mlp: None }
    }
}

impl CalibrateConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = parse_json(&read(path)?)?;
        if let DatasetSource::File { file } = &mut cfg.dataset {
            if file.is_relative() {
                *file = path.parent().unwrap_or(Path::new(".")).join(&*file);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::invalid("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(ConfigError::invalid("train_fraction", "must be in (0, 1)"));
        }
        if let Some(h) = &self.mlp {
            if h.epochs == 0 || h.batch == 0 || !(h.step > 0.0) || !(h.val_fraction > 0.0 && h.val_fraction < 1.0) {
                return Err(ConfigError::invalid("mlp", "epochs, batch and step must be > 0 and val_fraction in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn hyper(&self) -> MlpHyper {
        self.mlp.unwrap_or(MlpHyper { seed: self.seed, ..MlpHyper::default() })
    }
}
