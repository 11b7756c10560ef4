//! Procedural vial images with known labels and boxes.
//!
//! Each image is a bordered rounded-rectangle vial on a background, with a
//! liquid band at the bottom. Undissolved samples get turbid liquid: the
//! base color is pulled towards white in proportion to turbidity `t` and
//! bright particle speckle appears with per-pixel probability `0.12 t`.
//! Every pixel is a function of integer geometry and per-sample seeds, so
//! moving a vial by whole pixels moves its rendering exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::SolubilityLabel;
use crate::rng::{self, splitmix64};
use crate::segmentation::BoundingBox;

const SOLUTES: [&str; 2] = ["caffeine", "benzimidazole"];
const SOLVENTS: [&str; 3] = ["water", "ethanol", "acetone"];
/// Per-channel offsets on the clear-liquid base color.
const SOLVENT_TINT: [[f32; 3]; 3] = [[0.0, 0.0, 0.0], [3.0, 2.0, -3.0], [-2.0, 0.0, 3.0]];
const TURBID_WHITE: f32 = 230.0;
const SPECKLE: f32 = 245.0;
const GLASS_WHITE: f32 = 240.0;
/// Minimum gap between the vial and the image edge.
const MARGIN: u32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundMode {
    Plain,
    Gradient,
    Textured,
}

impl std::str::FromStr for BackgroundMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Self::Plain),
            "gradient" => Ok(Self::Gradient),
            "textured" => Ok(Self::Textured),
            other => Err(format!(
                "unknown background `{other}` (expected plain, gradient or textured)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: u32,
    pub turbidity_undissolved_range: [f64; 2],
    pub turbidity_dissolved_range: [f64; 2],
    /// Cycled over samples: sample `i` uses `background_modes[i % len]`.
    pub background_modes: Vec<BackgroundMode>,
    /// Global brightness factor is drawn from `1 ± 0.15 * lighting_jitter`.
    pub lighting_jitter: f64,
    /// Maximum vial-center offset, as a fraction of the image size.
    pub vial_position_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 600,
            image_size: 128,
            turbidity_undissolved_range: [0.35, 1.0],
            turbidity_dissolved_range: [0.0, 0.1],
            background_modes: vec![BackgroundMode::Plain],
            lighting_jitter: 0.5,
            vial_position_jitter: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples < 2 {
            return bad(format!(
                "n_samples must be at least 2, got {}",
                self.n_samples
            ));
        }
        if self.image_size < 32 {
            return bad(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            ));
        }
        for (name, [lo, hi]) in [
            (
                "turbidity_undissolved_range",
                self.turbidity_undissolved_range,
            ),
            ("turbidity_dissolved_range", self.turbidity_dissolved_range),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!(
                    "{name} [{lo}, {hi}] is not an interval inside [0, 1]"
                ));
            }
        }
        if self.turbidity_dissolved_range[1] >= self.turbidity_undissolved_range[0] {
            return bad(
                "turbidity ranges overlap: dissolved max must be below undissolved min".into(),
            );
        }
        if self.background_modes.is_empty() {
            return bad("background_modes is empty".into());
        }
        if !(0.0..=1.0).contains(&self.lighting_jitter) {
            return bad(format!(
                "lighting_jitter {} outside [0, 1]",
                self.lighting_jitter
            ));
        }
        if !(0.0..=0.5).contains(&self.vial_position_jitter) {
            return bad(format!(
                "vial_position_jitter {} outside [0, 0.5]",
                self.vial_position_jitter
            ));
        }
        Ok(())
    }
}

/// Unlit background description.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundStyle {
    pub mode: BackgroundMode,
    pub color: [f32; 3],
    /// Gradient direction (unit vector) and half-amplitude in gray levels.
    pub gradient: ([f32; 2], f32),
    pub texture_seed: u64,
}

impl BackgroundStyle {
    pub fn plain(color: [f32; 3]) -> Self {
        Self {
            mode: BackgroundMode::Plain,
            color,
            gradient: ([1.0, 0.0], 0.0),
            texture_seed: 0,
        }
    }

    fn sample<R: Rng>(mode: BackgroundMode, rng: &mut R) -> Self {
        let gray = rng.gen_range(150.0..200.0f32);
        let color = [0; 3].map(|_: i32| gray + rng.gen_range(-8.0..8.0f32));
        let angle = rng.gen_range(0.0..std::f32::consts::TAU);
        let amp = rng.gen_range(5.0..15.0f32);
        Self {
            mode,
            color,
            gradient: ([angle.cos(), angle.sin()], amp),
            texture_seed: rng.gen(),
        }
    }

    fn at(&self, x: u32, y: u32, width: u32, height: u32) -> [f32; 3] {
        let offset = match self.mode {
            BackgroundMode::Plain => 0.0,
            BackgroundMode::Gradient => {
                let ([dx, dy], amp) = self.gradient;
                let u = (x as f32 + 0.5) / width as f32 - 0.5;
                let v = (y as f32 + 0.5) / height as f32 - 0.5;
                // projection lies in [-1/sqrt2, 1/sqrt2]
                amp * std::f32::consts::SQRT_2 * (u * dx + v * dy)
            }
            BackgroundMode::Textured => {
                let cell = hash_unit(self.texture_seed, x / 8, y / 8);
                let fine = hash_unit(self.texture_seed ^ 0x5bd1_e995, x, y);
                6.0 * (2.0 * cell - 1.0) + 4.0 * (2.0 * fine - 1.0)
            }
        };
        self.color.map(|c| c + offset)
    }
}

/// Deterministic value in [0, 1) for a lattice point.
fn hash_unit(seed: u64, x: u32, y: u32) -> f32 {
    let h = splitmix64(seed ^ splitmix64(((x as u64) << 32) | y as u64));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Fills `img` with the lit background.
pub fn render_background(img: &mut ImageRgb, style: &BackgroundStyle, light: f32) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, style.at(x, y, w, h).map(|c| to_u8(c * light)));
        }
    }
}

/// Position-independent appearance of one vial.
#[derive(Clone, Debug, PartialEq)]
pub struct VialStyle {
    pub width: u32,
    pub height: u32,
    pub border: u32,
    pub corner_radius: u32,
    pub border_color: [f32; 3],
    /// Fraction of the interior height filled with liquid.
    pub fill: f32,
    pub liquid_base: [f32; 3],
    pub turbidity: f32,
    pub reflection: bool,
    pub texture_seed: u64,
}

impl VialStyle {
    fn sample<R: Rng>(size: u32, turbidity: f32, solvent: usize, rng: &mut R) -> Self {
        let s = size as f32;
        let width = (rng.gen_range(0.26..0.34f32) * s).round() as u32;
        let height = (rng.gen_range(0.62..0.74f32) * s).round() as u32;
        let dark = rng.gen_range(50.0..70.0f32);
        let base = rng.gen_range(97.0..103.0f32);
        let tint = SOLVENT_TINT[solvent];
        Self {
            width,
            height,
            border: (size / 64).max(2),
            corner_radius: (0.18 * width as f32).round() as u32,
            border_color: [dark; 3],
            fill: rng.gen_range(0.45..0.70f32),
            liquid_base: [base + tint[0], base + tint[1], base + tint[2]],
            turbidity,
            reflection: rng.gen_bool(0.5),
            texture_seed: rng.gen(),
        }
    }

    /// Whether the pixel at local position (u, v) lies inside the rounded
    /// rectangle of extent `w x h` inset by `inset` on every side.
    fn inside(&self, u: u32, v: u32, inset: u32) -> bool {
        let (w, h) = (self.width, self.height);
        if u < inset || v < inset || u >= w - inset || v >= h - inset {
            return false;
        }
        let r = self.corner_radius.saturating_sub(inset) as f32;
        let (lo_x, hi_x) = ((inset as f32) + r, (w - inset) as f32 - r);
        let (lo_y, hi_y) = ((inset as f32) + r, (h - inset) as f32 - r);
        let (px, py) = (u as f32 + 0.5, v as f32 + 0.5);
        let cx = px.clamp(lo_x, hi_x);
        let cy = py.clamp(lo_y, hi_y);
        (px - cx).powi(2) + (py - cy).powi(2) <= r * r
    }

    /// First interior row (local) holding liquid.
    pub fn liquid_top(&self) -> u32 {
        let inner = self.height - 2 * self.border;
        self.height - self.border - (self.fill * inner as f32).round() as u32
    }
}

/// Where a rendered vial ended up.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VialGeometry {
    /// Tight box of every pixel the vial wrote.
    pub bbox: BoundingBox,
    /// Rows and columns of the liquid band, inside the border.
    pub liquid: BoundingBox,
}

/// Draws a vial with its top-left corner at (x0, y0). Glass blends with
/// whatever is already in `img`.
pub fn render_vial(
    img: &mut ImageRgb,
    x0: u32,
    y0: u32,
    style: &VialStyle,
    light: f32,
) -> Result<VialGeometry> {
    if x0 + style.width > img.width() || y0 + style.height > img.height() {
        return Err(Error::InvalidBox(format!(
            "vial {}x{} at ({x0}, {y0}) exceeds {}x{} image",
            style.width,
            style.height,
            img.width(),
            img.height()
        )));
    }
    if style.width <= 2 * (style.border + 1) || style.height <= 2 * (style.border + 1) {
        return Err(Error::InvalidBox(format!(
            "vial {}x{} too small",
            style.width, style.height
        )));
    }
    let liquid_top = style.liquid_top();
    let t = style.turbidity;
    let turbid = style.liquid_base.map(|b| b + t * (TURBID_WHITE - b));
    let highlight_col = style.border + (style.width - 2 * style.border) / 5;
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (u32::MAX, u32::MAX, 0, 0);
    for v in 0..style.height {
        for u in 0..style.width {
            if !style.inside(u, v, 0) {
                continue;
            }
            let (x, y) = (x0 + u, y0 + v);
            let color = if !style.inside(u, v, style.border) {
                style.border_color
            } else if v >= liquid_top {
                let speckle = hash_unit(style.texture_seed, u, v) < 0.12 * t;
                if speckle {
                    [SPECKLE; 3]
                } else {
                    let grain = 3.0 * (2.0 * hash_unit(style.texture_seed ^ 0xa5a5, u, v) - 1.0);
                    turbid.map(|c| c + grain)
                }
            } else if style.reflection && (u == highlight_col || u == highlight_col + 1) {
                [GLASS_WHITE; 3]
            } else {
                let under = img.get(x, y).map(|c| c as f32 / light);
                [0, 1, 2].map(|c| 0.85 * under[c] + 0.15 * GLASS_WHITE)
            };
            img.set(x, y, color.map(|c| to_u8(c * light)));
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
    }
    let b = style.border;
    Ok(VialGeometry {
        bbox: BoundingBox::new(min_x, min_y, max_x + 1, max_y + 1)?,
        liquid: BoundingBox::new(
            x0 + b,
            y0 + liquid_top,
            x0 + style.width - b,
            y0 + style.height - b,
        )?,
    })
}

/// One generated image with its manifest record.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub image: ImageRgb,
    pub geometry: VialGeometry,
    pub turbidity: f64,
}

fn balanced_labels(config: &SynthConfig) -> Vec<SolubilityLabel> {
    use rand::seq::SliceRandom;
    let n_u = config.n_samples / 2;
    let mut labels: Vec<_> = (0..config.n_samples)
        .map(|i| {
            if i < n_u {
                SolubilityLabel::Undissolved
            } else {
                SolubilityLabel::Dissolved
            }
        })
        .collect();
    labels.shuffle(&mut rng::stream(config.seed, "synth_labels", 0));
    labels
}

fn draw_range(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn render_one(config: &SynthConfig, index: usize, label: SolubilityLabel) -> Result<SynthSample> {
    let mut rng = rng::stream(config.seed, "synth_sample", index as u64);
    let size = config.image_size;
    let mode = config.background_modes[index % config.background_modes.len()];
    let background = BackgroundStyle::sample(mode, &mut rng);
    let light = 1.0 + 0.15 * config.lighting_jitter as f32 * rng.gen_range(-1.0..=1.0f32);
    let turbidity = match label {
        SolubilityLabel::Undissolved => draw_range(&mut rng, config.turbidity_undissolved_range),
        SolubilityLabel::Dissolved => draw_range(&mut rng, config.turbidity_dissolved_range),
    };
    let solute = rng.gen_range(0..SOLUTES.len());
    let solvent = rng.gen_range(0..SOLVENTS.len());
    let style = VialStyle::sample(size, turbidity as f32, solvent, &mut rng);

    let jitter = config.vial_position_jitter * size as f64;
    let mut place = |extent: u32| {
        let offset = if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter)
        } else {
            0.0
        };
        let start = (size as f64 - extent as f64) / 2.0 + offset;
        (start.round().max(0.0) as u32).clamp(MARGIN, size - MARGIN - extent)
    };
    let x0 = place(style.width);
    let y0 = place(style.height);

    let mut image = ImageRgb::filled(size, size, [0; 3]);
    render_background(&mut image, &background, light);
    let geometry = render_vial(&mut image, x0, y0, &style, light)?;
    let sample_id = format!("synth_{index:04}");
    let record = SampleRecord {
        image_path: format!("images/{sample_id}.png"),
        sample_id,
        solute: SOLUTES[solute].into(),
        solvent: SOLVENTS[solvent].into(),
        label,
        fold: None,
        timestamp: None,
        gt_bbox: Some(geometry.bbox),
    };
    Ok(SynthSample {
        record,
        image,
        geometry,
        turbidity,
    })
}

/// Renders sample `index` of the dataset described by `config`, exactly as
/// [`generate_synthetic`] would write it.
pub fn render_sample(config: &SynthConfig, index: usize) -> Result<SynthSample> {
    config.validate()?;
    let labels = balanced_labels(config);
    let label = *labels.get(index).ok_or_else(|| {
        Error::Config(format!(
            "sample index {index} out of range for {} samples",
            config.n_samples
        ))
    })?;
    render_one(config, index, label)
}

/// Writes `<out_dir>/images/*.png` and `<out_dir>/manifest.jsonl`; returns
/// the manifest path. Labels are balanced (`n/2` undissolved).
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let labels = balanced_labels(config);
    let mut records = Vec::with_capacity(config.n_samples);
    for (i, &label) in labels.iter().enumerate() {
        let sample = render_one(config, i, label)?;
        sample
            .image
            .save_png(&out_dir.join(&sample.record.image_path))?;
        records.push(sample.record);
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
