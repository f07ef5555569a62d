//! Run configuration: one TOML table per component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageAugment, SynthConfig, TextAugment};
use crate::error::{config_err, Result, TsgError};
use crate::losses::LossConfig;
use crate::metrics::EvalConfig;
use crate::model::{Model, ModelConfig};
use crate::sampler::SamplerConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds parameter initialization, batch order and augmentation.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 3e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub image: ImageAugment,
    /// Lexical augmentation applied to every training query, if any.
    pub text: Option<TextAugment>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every knob, including that the architecture accepts clips of
    /// the configured size, before any real work starts.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(config_err("train.lr must be positive"));
        }
        if !(self.train.weight_decay.is_finite() && self.train.weight_decay >= 0.0) {
            return Err(config_err("train.weight_decay must be non-negative"));
        }
        if self.sampler.batch_size == 0 || self.sampler.max_queries_per_video == 0 {
            return Err(config_err("sampler sizes must be positive"));
        }
        if !(self.loss.iou_threshold > 0.0 && self.loss.iou_threshold <= 1.0) {
            return Err(config_err("loss.iou_threshold must lie in (0, 1]"));
        }
        if self.eval.top_k == 0 {
            return Err(config_err("eval.top_k must be positive"));
        }
        if let Some([h, w]) = self.augment.image.crop {
            if h == 0 || w == 0 || h > self.data.height || w > self.data.width {
                return Err(config_err(format!(
                    "augment.image.crop {h}x{w} does not fit the frames"
                )));
            }
        }
        let d = &self.data;
        let model = Model::new(&self.model, d.vocab_size, d.channels, 0)?;
        let clip = Tensor::zeros(&[d.channels, d.frames, d.height, d.width]);
        model.infer(&clip, &[&[0]], 1).map_err(|e| match e {
            TsgError::Dimension(m) | TsgError::Input(m) => config_err(m),
            other => other,
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let text = config.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(RunConfig::from_toml("[train]\nepochz = 3\n").unwrap_err().is_config());
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").unwrap_err().is_config());
        assert!(RunConfig::from_toml("[model.scada]\ngamma = 3\n")
            .unwrap_err()
            .is_config());
        assert!(RunConfig::from_toml("[model.scada]\nbeta = 3\n")
            .unwrap_err()
            .is_config());
        assert!(RunConfig::from_toml("[model.head]\nanchor_scales = [64]\n")
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("[train]\nepochs = 2\n[model]\nadapters = false\n").unwrap();
        assert_eq!(c.train.epochs, 2);
        assert!(!c.model.adapters);
        assert_eq!(c.data, SynthConfig::default());
    }
}
