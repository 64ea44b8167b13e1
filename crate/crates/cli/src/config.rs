use std::fs;
use std::path::{Path, PathBuf};

use r2s_core::datagen::{NoiseConfig, SplitMode, SynthConfig};
use r2s_core::r2snet::{ModelConfig, RefinementPolicy};
use r2s_core::training::TrainConfig;
use r2s_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// Everything a run needs. Loaded from JSON, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub run_id: String,
    /// Directory receiving every artifact of the run.
    pub out_dir: PathBuf,
    /// Dataset document; `<out_dir>/dataset.json` when absent.
    pub dataset: Option<PathBuf>,
    /// Proposal lines; `<out_dir>/proposals.jsonl` when absent.
    pub proposals: Option<PathBuf>,
    pub synth: SynthConfig,
    pub noise: NoiseConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policy: RefinementPolicy,
    pub baseline: BaselineConfig,
    pub iou_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Share of images used for training.
    pub train_fraction: f64,
    pub mode: SplitMode,
    /// Share of the training images held out for best-epoch selection; 0
    /// selects on training loss.
    pub heldout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.75,
            mode: SplitMode::Ordered,
            heldout_fraction: 0.1,
        }
    }
}

/// Plain NMS applied to raw proposals as the reference pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub rho_iou: f64,
    pub rho_c: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { rho_iou: 0.5, rho_c: 0.75 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            run_id: "run".into(),
            out_dir: PathBuf::from("runs"),
            dataset: None,
            proposals: None,
            synth: SynthConfig::default(),
            noise: NoiseConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            policy: RefinementPolicy::default(),
            baseline: BaselineConfig::default(),
            iou_threshold: r2s_core::metrics::DEFAULT_IOU_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(CliError::Usage(format!("run_id {:?} must be a plain non-empty name", self.run_id)));
        }
        let s = &self.split;
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(CliError::Usage(format!(
                "split.train_fraction must lie in (0, 1), got {}",
                s.train_fraction
            )));
        }
        if !(0.0..1.0).contains(&s.heldout_fraction) {
            return Err(CliError::Usage(format!(
                "split.heldout_fraction must lie in [0, 1), got {}",
                s.heldout_fraction
            )));
        }
        for (name, v) in [
            ("baseline.rho_iou", self.baseline.rho_iou),
            ("baseline.rho_c", self.baseline.rho_c),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Usage(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        self.noise.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        self.model.r2s.validate()?;
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.json"))
    }

    pub fn proposals_path(&self) -> PathBuf {
        self.proposals.clone().unwrap_or_else(|| self.out_dir.join("proposals.jsonl"))
    }

    pub fn split_path(&self) -> PathBuf {
        self.out_dir.join("split.json")
    }

    /// `<out_dir>/<run_id><suffix>`
    pub fn artifact(&self, suffix: &str) -> PathBuf {
        self.out_dir.join(format!("{}{suffix}", self.run_id))
    }
}
