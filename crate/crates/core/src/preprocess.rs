//! RoI crop to normalized classifier input.
//!
//! Resampling is bilinear with the half-pixel (align-corners = false)
//! convention, evaluated in `f32` in a fixed order. For an output pixel at
//! column `ox` of `out_w`, sampled from a source span of `src_w` pixels:
//!
//! ```text
//! sx = max((ox + 0.5) * (src_w / out_w) - 0.5, 0)
//! x0 = floor(sx); x1 = min(x0 + 1, src_w - 1); lx = sx - x0
//! ```
//!
//! and likewise for rows, then
//! `v = (1 - ly) * ((1 - lx) * p00 + lx * p01) + ly * ((1 - lx) * p10 + lx * p11)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::segmentation::BoundingBox;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Smallest crop side accepted by the transforms.
pub const MIN_CROP: u32 = 8;

/// Channel-major 3-channel tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::InputSize {
                expected: width as u32,
                got: format!("{} values for 3x{height}x{width}", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// `(x - mean) / std` per channel.
    pub fn normalize(mut self, mean: [f32; 3], std: [f32; 3]) -> Self {
        let plane = self.height * self.width;
        for (c, ch) in self.data.chunks_exact_mut(plane).enumerate() {
            for v in ch {
                *v = (*v - mean[c]) / std[c];
            }
        }
        self
    }

    pub fn denormalize(mut self, mean: [f32; 3], std: [f32; 3]) -> Self {
        let plane = self.height * self.width;
        for (c, ch) in self.data.chunks_exact_mut(plane).enumerate() {
            for v in ch {
                *v = *v * std[c] + mean[c];
            }
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub input_size: u32,
    pub flip_probability: f64,
    /// Crop area as a fraction of the RoI area.
    pub scale_range: [f64; 2],
    /// Crop width / height.
    pub ratio_range: [f64; 2],
    /// Evaluation resizes the shorter side to `round(input_size * factor)`.
    pub eval_resize_factor: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            flip_probability: 0.5,
            scale_range: [0.5, 1.0],
            ratio_range: [3.0 / 4.0, 4.0 / 3.0],
            eval_resize_factor: 1.143,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl TransformConfig {
    pub fn with_input_size(input_size: u32) -> Self {
        Self {
            input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            ));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return bad(format!(
                "scale_range [{s0}, {s1}] must satisfy 0 < lo <= hi <= 1"
            ));
        }
        let [r0, r1] = self.ratio_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!(
                "ratio_range [{r0}, {r1}] must satisfy 0 < lo <= hi"
            ));
        }
        if !(self.eval_resize_factor >= 1.0 && self.eval_resize_factor.is_finite()) {
            return bad(format!(
                "eval_resize_factor {} must be >= 1",
                self.eval_resize_factor
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return bad(format!(
                "normalization mean {:?} / std {:?} invalid",
                self.mean, self.std
            ));
        }
        Ok(())
    }

    /// Shorter side length before the evaluation center crop.
    pub fn eval_resize(&self) -> u32 {
        (self.input_size as f64 * self.eval_resize_factor).round() as u32
    }
}

fn check_crop(img: &ImageRgb) -> Result<()> {
    if img.width() < MIN_CROP || img.height() < MIN_CROP {
        return Err(Error::DegenerateRoi {
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(())
}

fn source_index(o: usize, scale: f32, len: usize) -> (usize, usize, f32) {
    let s = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f32)
}

/// Bilinear resample of `region` to `out_w x out_h`; channel-major, values
/// on the 0..=255 scale.
pub fn resize_bilinear(
    img: &ImageRgb,
    region: &BoundingBox,
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let (rw, rh) = (region.width() as usize, region.height() as usize);
    let sx = rw as f32 / out_w as f32;
    let sy = rh as f32 / out_h as f32;
    let cols: Vec<_> = (0..out_w).map(|o| source_index(o, sx, rw)).collect();
    let stride = img.width() as usize * 3;
    let data = img.data();
    let px = |x: usize, y: usize, c: usize| {
        data[(region.y_min as usize + y) * stride + (region.x_min as usize + x) * 3 + c] as f32
    };
    let plane = out_w * out_h;
    let mut out = vec![0.0f32; 3 * plane];
    for oy in 0..out_h {
        let (y0, y1, ly) = source_index(oy, sy, rh);
        for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let top = (1.0 - lx) * px(x0, y0, c) + lx * px(x1, y0, c);
                let bottom = (1.0 - lx) * px(x0, y1, c) + lx * px(x1, y1, c);
                out[c * plane + oy * out_w + ox] = (1.0 - ly) * top + ly * bottom;
            }
        }
    }
    out
}

/// Random draws of one training transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainParams {
    pub crop: BoundingBox,
    pub flip: bool,
}

/// Random-resized-crop parameters: up to ten tries at a crop with area
/// fraction in `scale_range` and log-uniform aspect ratio in `ratio_range`;
/// if none fits, the largest centered crop with a clamped aspect ratio.
pub fn sample_train_params<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    config: &TransformConfig,
    rng: &mut R,
) -> TrainParams {
    let (w, h) = (width as f64, height as f64);
    let area = w * h;
    let [r0, r1] = config.ratio_range;
    let (lr0, lr1) = (r0.ln(), r1.ln());
    let mut crop = None;
    for _ in 0..10 {
        let target = area * rng.gen_range(config.scale_range[0]..=config.scale_range[1]);
        let aspect = if lr1 > lr0 {
            rng.gen_range(lr0..lr1).exp()
        } else {
            r0
        };
        let cw = (target * aspect).sqrt().round() as u32;
        let ch = (target / aspect).sqrt().round() as u32;
        if cw > 0 && ch > 0 && cw <= width && ch <= height {
            let y = rng.gen_range(0..=height - ch);
            let x = rng.gen_range(0..=width - cw);
            crop = Some((x, y, cw, ch));
            break;
        }
    }
    let (x, y, cw, ch) = crop.unwrap_or_else(|| {
        let in_ratio = w / h;
        let (cw, ch) = if in_ratio < r0 {
            (width, ((w / r0).round() as u32).max(1))
        } else if in_ratio > r1 {
            (((h * r1).round() as u32).max(1), height)
        } else {
            (width, height)
        };
        ((width - cw) / 2, (height - ch) / 2, cw, ch)
    });
    let flip = rng.gen::<f64>() < config.flip_probability;
    TrainParams {
        crop: BoundingBox::new(x, y, x + cw, y + ch).expect("crop is non-empty"),
        flip,
    }
}

fn to_unit(mut v: Vec<f32>) -> Vec<f32> {
    for x in &mut v {
        *x /= 255.0;
    }
    v
}

/// Augmented training tensor: random resized crop, optional horizontal
/// flip, scale to [0, 1], normalize.
pub fn train_transform<R: Rng + ?Sized>(
    crop: &ImageRgb,
    config: &TransformConfig,
    rng: &mut R,
) -> Result<Tensor3> {
    check_crop(crop)?;
    let params = sample_train_params(crop.width(), crop.height(), config, rng);
    apply_train_params(crop, config, &params)
}

pub fn apply_train_params(
    crop: &ImageRgb,
    config: &TransformConfig,
    params: &TrainParams,
) -> Result<Tensor3> {
    check_crop(crop)?;
    let n = config.input_size as usize;
    let t = Tensor3::new(n, n, to_unit(resize_bilinear(crop, &params.crop, n, n)))?;
    let t = if params.flip { t.flip_horizontal() } else { t };
    Ok(t.normalize(config.mean, config.std))
}

/// Evaluation resize and center crop, in [0, 1] before normalization.
///
/// The shorter side becomes `round(input_size * eval_resize_factor)`, the
/// longer side scales by the same ratio (truncated), and the center
/// `input_size` square is kept with floored offsets.
pub fn eval_resized(crop: &ImageRgb, config: &TransformConfig) -> Result<Tensor3> {
    check_crop(crop)?;
    let short = config.eval_resize() as usize;
    let (w, h) = (crop.width() as usize, crop.height() as usize);
    let (rw, rh) = if w <= h {
        (short, (short as u64 * h as u64 / w as u64) as usize)
    } else {
        ((short as u64 * w as u64 / h as u64) as usize, short)
    };
    let full = BoundingBox::full(crop.width(), crop.height())?;
    let resized = resize_bilinear(crop, &full, rw, rh);
    let n = config.input_size as usize;
    let (top, left) = ((rh - n) / 2, (rw - n) / 2);
    let mut data = Vec::with_capacity(3 * n * n);
    for c in 0..3 {
        for y in 0..n {
            let row = c * rw * rh + (top + y) * rw + left;
            data.extend_from_slice(&resized[row..row + n]);
        }
    }
    Tensor3::new(n, n, to_unit(data))
}

pub fn eval_transform(crop: &ImageRgb, config: &TransformConfig) -> Result<Tensor3> {
    Ok(eval_resized(crop, config)?.normalize(config.mean, config.std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(w: u32, h: u32) -> ImageRgb {
        let mut img = ImageRgb::filled(w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                img.set(
                    x,
                    y,
                    [
                        (x * 3 % 256) as u8,
                        (y * 5 % 256) as u8,
                        ((x + y) % 256) as u8,
                    ],
                );
            }
        }
        img
    }

    #[test]
    fn train_transform_is_seed_deterministic() {
        let img = gradient_image(90, 140);
        let cfg = TransformConfig::default();
        let a = train_transform(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = train_transform(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), [3, 224, 224]);
    }

    #[test]
    fn constant_gray_normalizes_to_scalar() {
        let img = ImageRgb::filled(40, 60, [128; 3]);
        let cfg = TransformConfig {
            input_size: 32,
            mean: [0.5; 3],
            std: [0.25; 3],
            ..TransformConfig::default()
        };
        let expected = (128.0f32 / 255.0 - 0.5) / 0.25;
        assert!((expected - 0.00784).abs() < 1e-5);
        let t = train_transform(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(t.data().iter().all(|v| (v - expected).abs() < 1e-6));
        let t = eval_transform(&img, &cfg).unwrap();
        assert!(t.data().iter().all(|v| (v - expected).abs() < 1e-6));
    }

    #[test]
    fn eval_of_256_square_is_center_crop() {
        let img = gradient_image(256, 256);
        let cfg = TransformConfig::default();
        assert_eq!(cfg.eval_resize(), 256);
        let t = eval_resized(&img, &cfg).unwrap();
        assert_eq!(t.dims(), [3, 224, 224]);
        for (y, x) in [(0, 0), (17, 200), (223, 223)] {
            let p = img.get(x as u32 + 16, y as u32 + 16);
            for (c, &v) in p.iter().enumerate() {
                assert_eq!(t.get(c, y, x), v as f32 / 255.0);
            }
        }
        assert_eq!(
            eval_transform(&img, &cfg).unwrap(),
            eval_transform(&img, &cfg).unwrap()
        );
    }

    #[test]
    fn eval_shape_for_299() {
        let cfg = TransformConfig::with_input_size(299);
        assert_eq!(cfg.eval_resize(), 342);
        let t = eval_transform(&gradient_image(50, 120), &cfg).unwrap();
        assert_eq!(t.dims(), [3, 299, 299]);
    }

    #[test]
    fn degenerate_crops_are_rejected() {
        let cfg = TransformConfig::default();
        let tiny = ImageRgb::filled(7, 30, [1; 3]);
        assert!(matches!(
            eval_transform(&tiny, &cfg),
            Err(Error::DegenerateRoi {
                width: 7,
                height: 30
            })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train_transform(&tiny, &cfg, &mut rng).is_err());
    }

    #[test]
    fn bilinear_matches_hand_computation() {
        // 2x1 -> 4x1: sample points at -0.25 (clamped to 0), 0.25, 0.75, 1.25
        let mut img = ImageRgb::filled(2, 1, [0; 3]);
        img.set(1, 0, [100, 100, 100]);
        let out = resize_bilinear(&img, &BoundingBox::full(2, 1).unwrap(), 4, 1);
        assert_eq!(&out[..4], &[0.0, 25.0, 75.0, 100.0]);
    }

    #[test]
    fn flip_rate_is_one_half() {
        let cfg = TransformConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1992);
        let flips = (0..10_000)
            .filter(|_| sample_train_params(64, 64, &cfg, &mut rng).flip)
            .count();
        assert!((flips as f64 / 10_000.0 - 0.5).abs() <= 0.02, "{flips}");
    }

    #[test]
    fn config_validation() {
        assert!(TransformConfig::default().validate().is_ok());
        let bad = TransformConfig {
            std: [0.2, 0.0, 0.2],
            ..TransformConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TransformConfig {
            scale_range: [0.0, 1.0],
            ..TransformConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn crops_respect_scale_and_bounds(w in 8u32..200, h in 8u32..200, seed in any::<u64>()) {
            let cfg = TransformConfig::default();
            let p = sample_train_params(w, h, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(p.crop.fits(w, h));
        }

        #[test]
        fn flip_is_an_involution(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = Tensor3::new(h, w, data).unwrap();
            prop_assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        }

        #[test]
        fn denormalize_recovers_resized(w in 8u32..80, h in 8u32..80) {
            let cfg = TransformConfig::with_input_size(16);
            let img = gradient_image(w, h);
            let raw = eval_resized(&img, &cfg).unwrap();
            let back = eval_transform(&img, &cfg).unwrap().denormalize(cfg.mean, cfg.std);
            for (a, b) in raw.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
