use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use solis_nn::AdamConfig;

use crate::classifier::{BackboneSpec, TrainStrategy};
use crate::error::{Error, Result};
use crate::preprocess::TransformConfig;
use crate::segmentation::{
    AdapterConfig, DetectorBackend, FallbackDetector, ModelAdapter, ModelLoader,
    DEFAULT_CROP_PADDING,
};

/// Experiment protocol. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Only `"adam"` is supported.
    pub optimizer: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    /// Absolute improvement in validation CE required to reset patience.
    pub min_delta: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub k_folds: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub strategy: TrainStrategy,
    pub backbone: String,
    pub pretrained: bool,
    pub transform: TransformSettings,
    /// Fraction of the vial box added on each side before cropping.
    pub crop_padding: f64,
    pub detector: DetectorConfig,
    /// Take folds from the manifest's `fold` fields instead of assigning them.
    pub manifest_folds: bool,
    /// Train folds concurrently. Results are identical either way.
    pub parallel_folds: bool,
    /// Highest-loss predictions kept per fold in the report.
    pub worst_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            min_delta: 0.01,
            max_epochs: 100,
            batch_size: 32,
            k_folds: 5,
            seed: 1992,
            val_fraction: 0.2,
            strategy: TrainStrategy::FineTune,
            backbone: "tinycnn".into(),
            pretrained: false,
            transform: TransformSettings::default(),
            crop_padding: DEFAULT_CROP_PADDING,
            detector: DetectorConfig::default(),
            manifest_folds: false,
            parallel_folds: false,
            worst_k: 5,
        }
    }
}

/// Transform options; absent values come from the backbone registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSettings {
    pub input_size: Option<u32>,
    pub flip_probability: f64,
    pub scale_range: [f64; 2],
    pub ratio_range: [f64; 2],
    pub eval_resize_factor: f64,
    pub mean: Option<[f32; 3]>,
    pub std: Option<[f32; 3]>,
}

impl Default for TransformSettings {
    fn default() -> Self {
        let t = TransformConfig::default();
        Self {
            input_size: None,
            flip_probability: t.flip_probability,
            scale_range: t.scale_range,
            ratio_range: t.ratio_range,
            eval_resize_factor: t.eval_resize_factor,
            mean: None,
            std: None,
        }
    }
}

impl TransformSettings {
    pub fn resolve(&self, spec: &BackboneSpec) -> TransformConfig {
        TransformConfig {
            input_size: self.input_size.unwrap_or(spec.input_size),
            flip_probability: self.flip_probability,
            scale_range: self.scale_range,
            ratio_range: self.ratio_range,
            eval_resize_factor: self.eval_resize_factor,
            mean: self.mean.unwrap_or(spec.mean),
            std: self.std.unwrap_or(spec.std),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorConfig {
    Fallback {
        #[serde(default = "default_delta")]
        delta: f32,
    },
    /// Path to a model-adapter JSON file.
    ModelAdapter { config: String },
}

fn default_delta() -> f32 {
    40.0
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::Fallback {
            delta: default_delta(),
        }
    }
}

impl DetectorConfig {
    /// Instantiates the backend. Adapter config paths are resolved against
    /// `base_dir`; adapters need a plugin `loader`.
    pub fn build(
        &self,
        base_dir: &Path,
        loader: Option<&dyn ModelLoader>,
    ) -> Result<Box<dyn DetectorBackend>> {
        match self {
            Self::Fallback { delta } => Ok(Box::new(FallbackDetector::with_delta(*delta))),
            Self::ModelAdapter { config } => {
                let loader = loader.ok_or_else(|| {
                    Error::Backend(
                        "model_adapter detector needs a model loader plugin; none is registered"
                            .into(),
                    )
                })?;
                let adapter = AdapterConfig::load(&base_dir.join(config))?;
                Ok(Box::new(ModelAdapter::load(adapter, loader)?))
            }
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.optimizer != "adam" {
            return bad(format!(
                "unsupported optimizer `{}` (only \"adam\")",
                self.optimizer
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return bad(format!("min_delta must be >= 0, got {}", self.min_delta));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k_folds < 2 {
            return bad(format!("k_folds must be at least 2, got {}", self.k_folds));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if !(self.crop_padding >= 0.0 && self.crop_padding.is_finite()) {
            return bad(format!(
                "crop_padding must be >= 0, got {}",
                self.crop_padding
            ));
        }
        if let DetectorConfig::Fallback { delta } = self.detector {
            if !(delta >= 0.0 && delta.is_finite()) {
                return bad(format!("detector delta must be >= 0, got {delta}"));
            }
        }
        let spec = crate::classifier::lookup_backbone(&self.backbone)?;
        self.transform.resolve(&spec).validate()
    }
}
