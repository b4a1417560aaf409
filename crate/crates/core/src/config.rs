//! Experiment configuration: one TOML document with `model`, `train`, `scene`,
//! `loss` and `paths` tables. Every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::losses::LossConfig;
use crate::pipeline::{ModelConfig, TrainConfig};
use crate::synth::SceneConfig;
use crate::vsf::{HeightPartition, Z_MAX_M, Z_MIN_M};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of generated samples; scenes are synthesized on the fly when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub loss: LossConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{}: not UTF-8", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks each section and the constraints between them; returns the model's partition.
    pub fn validate(&self) -> Result<HeightPartition> {
        let section = |name: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("[{name}] {m}")),
            other => other,
        };
        self.scene.validate().map_err(|e| section("scene", e))?;
        self.train.validate().map_err(|e| section("train", e))?;
        self.loss.validate().map_err(|e| section("loss", e))?;
        if self.scene.z_range_m != (Z_MIN_M, Z_MAX_M) {
            return Err(Error::Config(format!(
                "[scene] z_range_m {:?} must be ({Z_MIN_M}, {Z_MAX_M}): model partitions are expressed over that range",
                self.scene.z_range_m
            )));
        }
        let z = self.scene.grid[2];
        self.model.validate(z).map_err(|e| section("model", e)).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{m} (scene grid Z = {z})")),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vsf::{PartitionSpec, VsfMode};

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("[model]\nvsf_mode = \"local_only\"\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.model.vsf_mode, VsfMode::LocalOnly);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.scene, SceneConfig::default());
    }

    #[test]
    fn custom_intervals_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.partition = PartitionSpec::Intervals { intervals: vec![(-5.0, -1.0), (-1.0, 3.0)] };
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.validate().unwrap().ranges(), &[(0, 8), (8, 16)]);
    }

    #[test]
    fn gap_in_partition_is_named() {
        let text = "[model.partition]\nkind = \"intervals\"\nintervals = [[-5.0, -2.0], [-1.0, 3.0]]\n";
        let msg = ExperimentConfig::from_toml(text).unwrap_err().to_string();
        assert!(msg.contains("[model]") && msg.contains("[-1, 3]") && msg.contains("gap"), "{msg}");
    }

    #[test]
    fn channel_reduction_mismatch() {
        let msg = ExperimentConfig::from_toml("[model]\nchannels = 6\nreduction = 4\n").unwrap_err().to_string();
        assert!(msg.contains("6") && msg.contains("reduction ratio 4"), "{msg}");
    }

    #[test]
    fn partition_must_fit_grid() {
        let msg =
            ExperimentConfig::from_toml("[model.partition]\nkind = \"uniform\"\nslices = 3\n").unwrap_err().to_string();
        assert!(msg.contains("3 equal slabs") && msg.contains("Z = 16"), "{msg}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[model]\nchanels = 8\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = -1.0\n")
            .unwrap_err()
            .to_string()
            .contains("[train]"));
    }
}
