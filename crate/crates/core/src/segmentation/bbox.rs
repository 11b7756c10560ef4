use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box; `x_max` and `y_max` are exclusive.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = Error;

    fn try_from([x_min, y_min, x_max, y_max]: [u32; 4]) -> Result<Self> {
        Self::new(x_min, y_min, x_max, y_max)
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox(format!(
                "[{x_min}, {y_min}, {x_max}, {y_max}] is empty"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self
            .x_max
            .min(other.x_max)
            .saturating_sub(self.x_min.max(other.x_min));
        let iy = self
            .y_max
            .min(other.y_max)
            .saturating_sub(self.y_min.max(other.y_min));
        let inter = ix as u64 * iy as u64;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Intersection with the image rectangle; error when nothing remains.
    pub fn clip(&self, width: u32, height: u32) -> Result<Self> {
        Self::new(
            self.x_min,
            self.y_min,
            self.x_max.min(width),
            self.y_max.min(height),
        )
    }

    /// Grows each side by `round(padding * extent)` pixels along that axis,
    /// then clips to the image.
    pub fn expand(&self, padding: f64, width: u32, height: u32) -> Result<Self> {
        if !(padding.is_finite() && padding >= 0.0) {
            return Err(Error::InvalidBox(format!(
                "padding {padding} must be finite and >= 0"
            )));
        }
        let px = (padding * self.width() as f64).round().min(u32::MAX as f64) as u32;
        let py = (padding * self.height() as f64)
            .round()
            .min(u32::MAX as f64) as u32;
        Self::new(
            self.x_min.saturating_sub(px),
            self.y_min.saturating_sub(py),
            self.x_max.saturating_add(px),
            self.y_max.saturating_add(py),
        )?
        .clip(width, height)
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Result<Self> {
        let shift = |v: u32, d: i64| {
            u32::try_from(v as i64 + d).map_err(|_| {
                Error::InvalidBox(format!("translation by ({dx}, {dy}) leaves the plane"))
            })
        };
        Self::new(
            shift(self.x_min, dx)?,
            shift(self.y_min, dy)?,
            shift(self.x_max, dx)?,
            shift(self.y_max, dy)?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_geometry() {
        let b = BoundingBox::new(10, 10, 20, 30).unwrap();
        assert_eq!((b.width(), b.height(), b.area()), (10, 20, 200));
        assert_eq!(b.iou(&b), 1.0);
        let c = BoundingBox::new(15, 10, 25, 30).unwrap();
        assert!((b.iou(&c) - 100.0 / 300.0).abs() < 1e-12);
        assert_eq!(b.iou(&BoundingBox::new(50, 50, 60, 60).unwrap()), 0.0);
        assert!(BoundingBox::new(3, 0, 3, 4).is_err());
        assert_eq!(
            b.translate(-10, 5).unwrap(),
            BoundingBox::new(0, 15, 10, 35).unwrap()
        );
        assert!(b.translate(-11, 0).is_err());
    }

    #[test]
    fn expand_clips_at_edges() {
        let b = BoundingBox::new(60, 0, 100, 40).unwrap();
        let e = b.expand(0.05, 100, 50).unwrap();
        assert_eq!(e, BoundingBox::new(58, 0, 100, 42).unwrap());
        assert_eq!(b.expand(0.0, 100, 50).unwrap(), b);
        assert!(b.expand(-0.1, 100, 50).is_err());
        assert!(b.clip(50, 50).is_err());
    }

    #[test]
    fn serde_as_array() {
        let b = BoundingBox::new(1, 2, 3, 4).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert_eq!(serde_json::from_str::<BoundingBox>("[1,2,3,4]").unwrap(), b);
        assert!(serde_json::from_str::<BoundingBox>("[3,2,1,4]").is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in (0u32..50, 0u32..50, 1u32..50, 1u32..50),
                                        b in (0u32..50, 0u32..50, 1u32..50, 1u32..50)) {
            let a = BoundingBox::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
            let b = BoundingBox::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
            prop_assert_eq!(a.iou(&b), b.iou(&a));
            prop_assert!((0.0..=1.0).contains(&a.iou(&b)));
        }
    }
}
