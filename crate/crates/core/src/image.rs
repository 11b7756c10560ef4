//! 8-bit RGB frames and PNG I/O.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB image.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl fmt::Debug for ImageRgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageRgb({}x{})", self.width, self.height)
    }
}

impl ImageRgb {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidBox(format!("image extent {width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::InvalidBox(format!(
                "image data has {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Uniform image. Panics on a zero extent.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w x h` block at `(x, y)`. The block must lie inside.
    pub fn sub_image(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::InvalidBox(format!(
                "region {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let start = self.offset(x, row);
            data.extend_from_slice(&self.data[start..start + w as usize * 3]);
        }
        Self::new(w, h, data)
    }

    /// Decodes any PNG colour type to 8-bit RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = ::image::load(Cursor::new(bytes), ::image::ImageFormat::Png)?;
        let rgb = decoded.into_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        ::image::write_buffer_with_format(
            &mut Cursor::new(&mut out),
            &self.data,
            self.width,
            self.height,
            ::image::ExtendedColorType::Rgb8,
            ::image::ImageFormat::Png,
        )?;
        Ok(out)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Mean of the per-pixel channel average over the half-open box.
    pub fn mean_brightness(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                let p = self.get(x, y);
                acc += (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(ImageRgb::new(2, 2, vec![0; 11]).is_err());
        assert!(ImageRgb::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let mut img = ImageRgb::filled(5, 3, [10, 20, 30]);
        img.set(4, 2, [255, 0, 7]);
        let back = ImageRgb::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn garbage_is_a_codec_error() {
        assert!(matches!(
            ImageRgb::from_png_bytes(b"not a png"),
            Err(Error::Image(_))
        ));
    }

    #[test]
    fn sub_image_copies_block() {
        let mut img = ImageRgb::filled(4, 4, [0, 0, 0]);
        img.set(2, 1, [9, 9, 9]);
        let sub = img.sub_image(1, 1, 2, 2).unwrap();
        assert_eq!(sub.get(1, 0), [9, 9, 9]);
        assert!(img.sub_image(3, 3, 2, 1).is_err());
    }
}
