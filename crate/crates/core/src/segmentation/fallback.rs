use super::{sort_results, Capability, DetectorBackend, Mask, SegmentationResult, VESSEL_CLASS};
use crate::error::Result;
use crate::image::ImageRgb;

/// Background-difference blob detector.
///
/// The background color is the per-channel median of a frame-edge ring.
/// A pixel is foreground when any channel differs from it by more than
/// `delta`. Foreground is split into 4-connected components, and every
/// component covering at least `min_area_fraction` of the frame is
/// reported with score `component_area / bbox_area`.
#[derive(Clone, Debug, PartialEq)]
pub struct FallbackDetector {
    pub delta: f32,
    pub ring: u32,
    pub min_area_fraction: f64,
}

impl Default for FallbackDetector {
    fn default() -> Self {
        Self {
            delta: 40.0,
            ring: 4,
            min_area_fraction: 0.005,
        }
    }
}

fn median(values: &mut [u8]) -> f32 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f32
    } else {
        (values[n / 2 - 1] as f32 + values[n / 2] as f32) / 2.0
    }
}

impl FallbackDetector {
    pub fn with_delta(delta: f32) -> Self {
        Self {
            delta,
            ..Self::default()
        }
    }

    pub fn background(&self, image: &ImageRgb) -> [f32; 3] {
        let (w, h) = (image.width(), image.height());
        let mut channels: [Vec<u8>; 3] = Default::default();
        for y in 0..h {
            for x in 0..w {
                let on_ring =
                    x < self.ring || y < self.ring || x + self.ring >= w || y + self.ring >= h;
                if on_ring {
                    let p = image.get(x, y);
                    for c in 0..3 {
                        channels[c].push(p[c]);
                    }
                }
            }
        }
        channels.map(|mut v| median(&mut v))
    }

    pub fn foreground(&self, image: &ImageRgb) -> Mask {
        let bg = self.background(image);
        let mut mask = Mask::new(image.width(), image.height());
        for (i, px) in image.data().chunks_exact(3).enumerate() {
            mask.data[i] = (0..3).any(|c| (px[c] as f32 - bg[c]).abs() > self.delta);
        }
        mask
    }
}

impl DetectorBackend for FallbackDetector {
    fn name(&self) -> &str {
        "fallback"
    }

    fn capability(&self) -> Capability {
        Capability::SyntheticFallback
    }

    fn detect(&self, image: &ImageRgb) -> Result<Vec<SegmentationResult>> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let fg = self.foreground(image);
        let min_area = self.min_area_fraction * (w * h) as f64;
        let mut label = vec![0u32; w * h];
        let mut stack = Vec::new();
        let mut results = Vec::new();
        let mut next = 0u32;
        for start in 0..w * h {
            if !fg.data[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            label[start] = next;
            stack.push(start);
            let mut members = Vec::new();
            while let Some(i) = stack.pop() {
                members.push(i);
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if fg.data[j] && label[j] == 0 {
                        label[j] = next;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if (members.len() as f64) < min_area {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            let mut mask = Mask::new(image.width(), image.height());
            for &i in &members {
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                mask.data[i] = true;
            }
            let bbox = super::BoundingBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32)?;
            results.push(SegmentationResult {
                score: members.len() as f64 / bbox.area() as f64,
                area: members.len() as u64,
                bbox,
                class_name: VESSEL_CLASS.into(),
                mask: Some(mask),
            });
        }
        sort_results(&mut results);
        Ok(results)
    }
}
