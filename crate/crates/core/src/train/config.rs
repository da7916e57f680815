use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::schedule::Schedule;
use crate::data::{AugmentConfig, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::ModelConfig;

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Seeds parameter initialization and the per-step sampling streams.
    pub seed: u64,
    pub batch_size: usize,
    /// Side of the square training crop.
    pub crop_size: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Number of synthetic training samples when `data_dir` is unset.
    pub samples: usize,
    /// Real dataset in `shadow/ mask/ gt/` layout.
    pub data_dir: Option<PathBuf>,
    /// Seed of the randomly initialized perceptual extractor.
    pub extractor_seed: u64,
    /// Checkpoint holding `extractor.stage{k}.weight|bias` tensors.
    pub extractor_weights: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            crop_size: 320,
            grad_clip: 1.0,
            checkpoint_every: 500,
            samples: 64,
            data_dir: None,
            extractor_seed: 0,
            extractor_weights: None,
        }
    }
}

/// Everything a run depends on; this is the `--config` file format and the
/// blob stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    /// The full model with 320x320 training crops; synthetic images are
    /// generated at the crop size.
    fn default() -> Self {
        let train = TrainSettings::default();
        Self {
            model: ModelConfig::default(),
            synth: SynthConfig { height: train.crop_size, width: train.crop_size, ..SynthConfig::default() },
            schedule: Schedule::default(),
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            train,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(t.grad_clip >= 0.0) {
            return Err(Error::Config("train: grad_clip must be nonnegative".into()));
        }
        if t.data_dir.is_none() && (self.synth.height < t.crop_size || self.synth.width < t.crop_size) {
            return Err(Error::Config(format!(
                "train: crop_size {} exceeds the {}x{} synthetic images",
                t.crop_size, self.synth.height, self.synth.width
            )));
        }
        self.model.check_input(t.crop_size, t.crop_size)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
