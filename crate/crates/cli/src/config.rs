//! Declarative run configuration. Every section is optional; missing keys
//! keep their defaults and unknown keys are rejected.

use std::path::Path;

use edgenav::distill::{KdConfig, TrainConfig};
use edgenav::navsim::EnvConfig;
use edgenav::ppo::PpoConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 5500,
            image_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
    pub input_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            runs: 100,
            warmup: 10,
            input_size: 224,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub kd: KdConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataConfig::default(),
            teacher: TrainConfig::default(),
            student: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
            kd: KdConfig::default(),
            env: EnvConfig::default(),
            ppo: PpoConfig {
                total_steps: 200_000,
                ..PpoConfig::default()
            },
            bench: BenchConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}
