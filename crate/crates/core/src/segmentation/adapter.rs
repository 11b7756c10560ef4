use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    sort_results, BoundingBox, Capability, DetectorBackend, Mask, SegmentationResult, VESSEL_CLASS,
};
use crate::error::{Error, Result};
use crate::image::ImageRgb;

fn default_threshold() -> f64 {
    0.5
}

fn default_device() -> String {
    "cpu".into()
}

/// JSON description of an externally trained segmentation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Opaque weights file; relative paths resolve against the config file.
    pub weights_path: PathBuf,
    /// Model class names that denote a vessel.
    pub vessel_class_names: Vec<String>,
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_device")]
    pub device: String,
}

impl AdapterConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        if config.weights_path.is_relative() {
            if let Some(dir) = path.parent() {
                config.weights_path = dir.join(&config.weights_path);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vessel_class_names.is_empty() {
            return Err(Error::Config("vessel_class_names is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "score_threshold {} outside [0, 1]",
                self.score_threshold
            )));
        }
        Ok(())
    }
}

/// One detection as emitted by a plugin model, in floating-point pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDetection {
    pub class_name: String,
    pub score: f64,
    /// `[x_min, y_min, x_max, y_max]`.
    pub bbox: [f64; 4],
    pub mask: Option<Mask>,
}

/// A loaded instance-segmentation model.
pub trait SegmentationModel: Send + Sync {
    fn infer(&self, image: &ImageRgb) -> Result<Vec<RawDetection>>;
}

/// Turns a weights file into a model; implemented by plugins.
pub trait ModelLoader {
    fn load(&self, weights: &Path, device: &str) -> Result<Box<dyn SegmentationModel>>;
}

/// Wraps a plugin model: keeps vessel classes at or above the score
/// threshold, rounds boxes outward to whole pixels, and clips them to the
/// frame.
pub struct ModelAdapter {
    config: AdapterConfig,
    model: Box<dyn SegmentationModel>,
}

impl std::fmt::Debug for ModelAdapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelAdapter")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl ModelAdapter {
    pub fn load(config: AdapterConfig, loader: &dyn ModelLoader) -> Result<Self> {
        config.validate()?;
        if !config.weights_path.is_file() {
            return Err(Error::Backend(format!(
                "weights file not found: {}",
                config.weights_path.display()
            )));
        }
        let model = loader.load(&config.weights_path, &config.device)?;
        Ok(Self { config, model })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    fn convert(&self, image: &ImageRgb, d: RawDetection) -> Result<Option<SegmentationResult>> {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(Error::Backend(format!("model emitted score {}", d.score)));
        }
        if !self.config.vessel_class_names.contains(&d.class_name)
            || d.score < self.config.score_threshold
        {
            return Ok(None);
        }
        if !d.bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::Backend(format!("model emitted box {:?}", d.bbox)));
        }
        let (w, h) = (image.width() as f64, image.height() as f64);
        let x0 = d.bbox[0].floor().clamp(0.0, w) as u32;
        let y0 = d.bbox[1].floor().clamp(0.0, h) as u32;
        let x1 = d.bbox[2].ceil().clamp(0.0, w) as u32;
        let y1 = d.bbox[3].ceil().clamp(0.0, h) as u32;
        let Ok(bbox) = BoundingBox::new(x0, y0, x1, y1) else {
            return Ok(None);
        };
        if let Some(m) = &d.mask {
            if (m.width, m.height) != (image.width(), image.height()) {
                return Err(Error::Backend(format!(
                    "mask is {}x{}, frame is {}x{}",
                    m.width,
                    m.height,
                    image.width(),
                    image.height()
                )));
            }
        }
        let area = d.mask.as_ref().map_or(bbox.area(), |m| m.count() as u64);
        Ok(Some(SegmentationResult {
            bbox,
            score: d.score,
            class_name: VESSEL_CLASS.into(),
            area,
            mask: d.mask,
        }))
    }
}

impl DetectorBackend for ModelAdapter {
    fn name(&self) -> &str {
        "model_adapter"
    }

    fn capability(&self) -> Capability {
        Capability::ModelAdapter
    }

    fn detect(&self, image: &ImageRgb) -> Result<Vec<SegmentationResult>> {
        let mut out = Vec::new();
        for d in self.model.infer(image)? {
            if let Some(r) = self.convert(image, d)? {
                out.push(r);
            }
        }
        sort_results(&mut out);
        Ok(out)
    }
}
