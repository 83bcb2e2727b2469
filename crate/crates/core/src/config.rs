//! Experiment configuration file (TOML). Every section is optional and
//! missing keys take their defaults; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::DataError;
use crate::evaluator::EvalConfig;
use crate::head::HeadConfig;
use crate::scalar::Real;
use crate::synth::{generate_dataset, AnnotatedImage, SceneSpec};
use crate::trainer::TrainConfig;

/// Subdirectory names of a generated dataset.
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";
pub const NEGATIVE_DIR: &str = "negative";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Dataset sizes and the seed that generates them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub eval_images: usize,
    /// Clutter-only images for the ringcell protocol.
    pub negative_images: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 200,
            eval_images: 50,
            negative_images: 20,
            seed: 1,
        }
    }
}

impl DataConfig {
    /// Generation seeds of the train, eval and negative-only splits.
    pub fn split_seeds(&self) -> [u64; 3] {
        [self.seed, self.seed.wrapping_add(1), self.seed.wrapping_add(2)]
    }
}

/// The three generated splits of an experiment.
#[derive(Clone, Debug)]
pub struct Splits<T> {
    pub train: Vec<AnnotatedImage<T>>,
    pub eval: Vec<AnnotatedImage<T>>,
    pub negative: Vec<AnnotatedImage<T>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub scene: SceneSpec,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn generate_splits<T: Real>(&self) -> Result<Splits<T>, DataError> {
        let [tr, ev, neg] = self.data.split_seeds();
        let mut negative = generate_dataset(&self.scene.negative_only(), self.data.negative_images, neg)?;
        for img in &mut negative {
            img.id = img.id.replacen("img", "neg", 1);
        }
        Ok(Splits {
            train: generate_dataset(&self.scene, self.data.train_images, tr)?,
            eval: generate_dataset(&self.scene, self.data.eval_images, ev)?,
            negative,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.scene.validate().map_err(|e| invalid(format!("scene: {e}")))?;
        self.head.validate().map_err(|e| invalid(format!("head: {e}")))?;
        self.train.validate().map_err(|e| invalid(format!("train: {e}")))?;
        if self.head.stride() != self.train.anchors.stride {
            return Err(invalid(format!(
                "train.anchors.stride {} must equal the head stride {}",
                self.train.anchors.stride,
                self.head.stride()
            )));
        }
        if self.head.num_anchor != self.train.anchors.anchors_per_location() {
            return Err(invalid(format!(
                "head.num_anchor {} must equal scales x ratios = {}",
                self.head.num_anchor,
                self.train.anchors.anchors_per_location()
            )));
        }
        if !self.scene.image_size.is_multiple_of(self.head.stride()) {
            return Err(invalid(format!(
                "scene.image_size {} must be divisible by the head stride {}",
                self.scene.image_size,
                self.head.stride()
            )));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.score_threshold) || !(0.0..=1.0).contains(&e.nms_iou) || !(0.0..=1.0).contains(&e.match_iou) {
            return Err(invalid("eval thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
