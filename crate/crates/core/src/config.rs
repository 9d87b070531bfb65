//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FUSION_CONFIDENCE;
use sweepfuse_tensor::Element;

use crate::geometry::DepthRange;
use crate::pipeline::strategy::{Photometric, StrategyRegistry, PHOTOMETRIC_TEMPERATURE, PHOTOMETRIC_WINDOW};
use crate::pyramid::{MultiMetricParams, PyramidConfig};
use crate::synthetic::paper_depth_range;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate factor applied after every epoch.
    pub decay: f64,
    pub epochs: usize,
    /// Samples whose gradients are summed per Adam step.
    pub batch: usize,
    /// Stops after this many Adam steps when set.
    pub max_steps: Option<usize>,
    /// Scenes held out (from the end of the dataset) for validation.
    pub val_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.001, decay: 0.9, epochs: 16, batch: 4, max_steps: None, val_scenes: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("epochs and batch must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Views per training sample, reference included.
    pub views_train: usize,
    /// Views per depth estimate at test time, reference included.
    pub views_test: usize,
    pub depth: DepthRange,
    pub pyramid: PyramidConfig,
    pub multi_metric: MultiMetricParams,
    pub fusion_confidence: f64,
    /// Registered strategy name.
    pub mode: String,
    pub checkpoint: Option<PathBuf>,
    pub photometric_temperature: f64,
    /// Distance above which a predicted point counts as an outlier, mm.
    pub eval_threshold: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            views_train: 5,
            views_test: 7,
            depth: paper_depth_range(),
            pyramid: PyramidConfig::default(),
            multi_metric: MultiMetricParams::default(),
            fusion_confidence: FUSION_CONFIDENCE,
            mode: "voxelwise".into(),
            checkpoint: None,
            photometric_temperature: PHOTOMETRIC_TEMPERATURE,
            eval_threshold: 20.0,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views_train < 2 || self.views_test < 2 {
            return Err(Error::config("view counts must be at least 2"));
        }
        self.depth.validate()?;
        self.pyramid.validate()?;
        self.multi_metric.validate()?;
        if !(0.0..=1.0).contains(&self.fusion_confidence) {
            return Err(Error::config(format!("fusion confidence must lie in [0, 1], got {}", self.fusion_confidence)));
        }
        if !(self.photometric_temperature > 0.0 && self.photometric_temperature.is_finite()) {
            return Err(Error::config("photometric temperature must be positive"));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold.is_finite()) {
            return Err(Error::config("evaluation threshold must be positive"));
        }
        self.train.validate()
    }

    /// Default strategies, with the photometric one at the configured
    /// temperature.
    pub fn registry<T: Element>(&self) -> StrategyRegistry<T> {
        let mut r = StrategyRegistry::with_defaults();
        r.register(Box::new(Photometric { temperature: self.photometric_temperature, window: PHOTOMETRIC_WINDOW }));
        r
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_file(path, self.to_json()?.as_bytes())
    }
}
