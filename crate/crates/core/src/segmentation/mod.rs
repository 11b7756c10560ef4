//! Vial localization: detector backends, result selection, and RoI crops.

mod adapter;
mod bbox;
mod fallback;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;

pub use adapter::{AdapterConfig, ModelAdapter, ModelLoader, RawDetection, SegmentationModel};
pub use bbox::BoundingBox;
pub use fallback::FallbackDetector;

pub const VESSEL_CLASS: &str = "vessel";
pub const DEFAULT_CROP_PADDING: f64 = 0.05;

/// Binary image with the dimensions of the frame it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_name: String,
    /// Pixel count of the detection; the bbox area when no mask exists.
    pub area: u64,
    #[serde(skip)]
    pub mask: Option<Mask>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    ModelAdapter,
    SyntheticFallback,
}

/// A vial detector. `detect` returns results sorted by descending score.
pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> &str;
    fn capability(&self) -> Capability;
    fn detect(&self, image: &ImageRgb) -> Result<Vec<SegmentationResult>>;
}

/// Score descending, then area descending, then top-left position.
pub(crate) fn sort_results(results: &mut [SegmentationResult]) {
    results.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.area.cmp(&a.area))
            .then((a.bbox.y_min, a.bbox.x_min).cmp(&(b.bbox.y_min, b.bbox.x_min)))
    });
}

/// Picks the vial from a backend's detections, clipped to the frame.
///
/// Model adapters yield the highest-score detection (larger area on equal
/// score). The fallback detector's score is a fill ratio rather than a
/// confidence, so there the component with the largest box wins (then
/// the most pixels): a vial whose liquid matches the background still
/// spans its full box.
pub fn detect_vial(image: &ImageRgb, backend: &dyn DetectorBackend) -> Result<SegmentationResult> {
    let results = backend.detect(image)?;
    let best = match backend.capability() {
        Capability::ModelAdapter => results.into_iter().next(),
        Capability::SyntheticFallback => results
            .into_iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| {
                (a.bbox.area(), a.area)
                    .cmp(&(b.bbox.area(), b.area))
                    .then(j.cmp(i))
            })
            .map(|(_, r)| r),
    };
    let mut best = best.ok_or_else(|| Error::VialNotFound {
        frame: String::new(),
    })?;
    best.bbox = best.bbox.clip(image.width(), image.height())?;
    Ok(best)
}

/// Exact sub-image of `bbox` grown by `padding` per side and clipped.
pub fn crop_roi(image: &ImageRgb, bbox: &BoundingBox, padding: f64) -> Result<ImageRgb> {
    let roi = roi_box(image, bbox, padding)?;
    image.sub_image(roi.x_min, roi.y_min, roi.width(), roi.height())
}

/// The region [`crop_roi`] copies.
pub fn roi_box(image: &ImageRgb, bbox: &BoundingBox, padding: f64) -> Result<BoundingBox> {
    if !bbox.fits(image.width(), image.height()) {
        return Err(Error::InvalidBox(format!(
            "{:?} exceeds {}x{} image",
            <[u32; 4]>::from(*bbox),
            image.width(),
            image.height()
        )));
    }
    bbox.expand(padding, image.width(), image.height())
}

/// Checks the behavioral contract of a backend on sample frames: scores in
/// [0, 1] sorted descending, boxes inside the frame, full-frame masks, and
/// repeatable output.
pub fn check_backend_conformance(backend: &dyn DetectorBackend, frames: &[ImageRgb]) -> Result<()> {
    let fail = |m: String| Err(Error::Backend(format!("{}: {m}", backend.name())));
    for (i, frame) in frames.iter().enumerate() {
        let results = backend.detect(frame)?;
        for r in &results {
            if !(0.0..=1.0).contains(&r.score) {
                return fail(format!("frame {i}: score {} outside [0, 1]", r.score));
            }
            if !r.bbox.fits(frame.width(), frame.height()) {
                return fail(format!("frame {i}: box outside the frame"));
            }
            if let Some(m) = &r.mask {
                if (m.width, m.height) != (frame.width(), frame.height()) {
                    return fail(format!("frame {i}: mask is {}x{}", m.width, m.height));
                }
            }
        }
        if results.windows(2).any(|w| w[0].score < w[1].score) {
            return fail(format!("frame {i}: results not sorted by score"));
        }
        if backend.detect(frame)? != results {
            return fail(format!("frame {i}: repeated detection differs"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_examples() {
        let mut img = ImageRgb::filled(40, 50, [0; 3]);
        for y in 0..50 {
            for x in 0..40 {
                img.set(x, y, [x as u8, y as u8, 7]);
            }
        }
        let full = BoundingBox::full(40, 50).unwrap();
        assert_eq!(crop_roi(&img, &full, 0.0).unwrap(), img);

        let b = BoundingBox::new(10, 10, 20, 30).unwrap();
        let c = crop_roi(&img, &b, 0.0).unwrap();
        assert_eq!((c.width(), c.height()), (10, 20));
        assert_eq!(c.get(3, 4), [13, 14, 7]);

        let edge = BoundingBox::new(20, 5, 40, 45).unwrap();
        let c = crop_roi(&img, &edge, 0.05).unwrap();
        assert_eq!((c.width(), c.height()), (21, 44));
        assert_eq!(c.get(0, 0), [19, 3, 7]);

        let outside = BoundingBox::new(30, 0, 41, 10).unwrap();
        assert!(crop_roi(&img, &outside, 0.0).is_err());
    }
}
