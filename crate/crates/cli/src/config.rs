use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spectlv_core::dp_prior::DpParams;
use spectlv_core::net::{StnConfig, VNetConfig};
use spectlv_core::training::{CrossvalConfig, NetConfigs, TrainConfig};
use spectlv_core::volume::Axis;

use crate::error::{CliError, CliResult};

#[cfg(test)]
const SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset manifest (native layout).
    pub dataset: Option<PathBuf>,
    /// Directory written by `prior`.
    pub priors: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    pub long_axis: Axis,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig { long_axis: Axis::H }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { n: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Probability at or above which a voxel is foreground.
    pub threshold: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { threshold: 0.5 }
    }
}

/// Everything a run reads. `seed` overrides `train.seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub seed: u64,
    pub paths: Paths,
    pub prepare: PrepareConfig,
    pub phantom: PhantomConfig,
    pub dp_prior: DpParams,
    pub vnet: VNetConfig,
    pub stn: StnConfig,
    pub train: TrainConfig,
    pub crossval: CrossvalConfig,
    pub metrics: MetricOptions,
}

impl GlobalConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Propagate the master seed and check every block.
    pub fn finalize(mut self) -> CliResult<Self> {
        self.train.seed = self.seed;
        self.train.validate()?;
        self.vnet.validate()?;
        self.stn.validate()?;
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(CliError::Config(format!("metrics.threshold {} outside [0, 1]", self.metrics.threshold)));
        }
        if self.crossval.k < 2 {
            return Err(CliError::Config("crossval.k must be at least 2".into()));
        }
        Ok(self)
    }

    pub fn nets(&self) -> NetConfigs {
        NetConfigs { vnet: self.vnet.clone(), stn: self.stn.clone() }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
