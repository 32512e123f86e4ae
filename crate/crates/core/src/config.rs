//! Run configuration: one TOML file covering the model, assignment, loss,
//! postprocessing, linking, evaluation, training, and data knobs.
//!
//! Defaults follow the reference settings where those exist (cost balance 3,
//! loss balance 5, 224 input, IoU 0.5 evaluation, strides {8, 16, 32});
//! everything else is an artifact default. `RunConfig::toy()` is the
//! desk-scale preset the CLI uses when no config file is given.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::AssignParams;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::linking::LinkConfig;
use crate::model::ModelConfig;
use crate::postprocess::PostprocessConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Halve the learning rate at each quarter of the run.
    pub halve_quarterly: bool,
    /// Abort when the total loss exceeds this or turns non-finite.
    pub divergence_threshold: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 2,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_quarterly: true,
            divergence_threshold: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub tube_iou_threshold: f64,
    #[serde(flatten)]
    pub options: EvalOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, tube_iou_threshold: 0.5, options: EvalOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub frame_size: usize,
    pub num_clips: usize,
    pub synth: crate::data::SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { frame_size: 224, num_clips: 8, synth: crate::data::SynthSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub lambda: f64,
    pub model: ModelConfig,
    pub assign: AssignParams,
    pub postprocess: PostprocessConfig,
    pub linking: LinkConfig,
    pub eval: EvalConfig,
    pub train: TrainParams,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 5.0,
            model: ModelConfig::default(),
            assign: AssignParams::default(),
            postprocess: PostprocessConfig::default(),
            linking: LinkConfig::default(),
            eval: EvalConfig::default(),
            train: TrainParams::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: 64-pixel clips, a narrow model, a training step
    /// size that overfits the tiny corpus quickly.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            lambda: 5.0,
            model: ModelConfig::overfit(2),
            train: TrainParams { learning_rate: 2e-3, ..Default::default() },
            data: DataConfig { frame_size: 64, num_clips: 8, synth: crate::data::SynthSpec::default() },
            ..Default::default()
        }
    }

    pub fn load_toml(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
