//! Grayscale image frames with intensities in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame<T: Real> {
    pub width: usize,
    pub height: usize,
    /// Row-major, `pixels[y * width + x]`.
    pub pixels: Vec<T>,
    pub frame_id: usize,
}

impl<T: Real> ImageFrame<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<T>, frame_id: usize) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {}x{} image",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(v) = pixels
            .iter()
            .find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::InvalidParameter {
                name: "pixels",
                reason: format!("intensity {} outside [0, 1]", to_f64(*v)),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            frame_id,
        })
    }

    pub fn filled(width: usize, height: usize, value: T, frame_id: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
            frame_id,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates; `None` outside `[0, w-1] x [0, h-1]`.
    pub fn bilinear(&self, x: T, y: T) -> Option<T> {
        let w1: T = lit((self.width.max(1) - 1) as f64);
        let h1: T = lit((self.height.max(1) - 1) as f64);
        if !(x >= T::zero() && y >= T::zero() && x <= w1 && y <= h1) {
            return None;
        }
        let x0 = to_f64(x.floor()) as usize;
        let y0 = to_f64(y.floor()) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x.floor();
        let fy = y - y.floor();
        let top = self.get(x0, y0) * (T::one() - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (T::one() - fx) + self.get(x1, y1) * fx;
        Some(top * (T::one() - fy) + bot * fy)
    }

    /// Nearest-pixel sample, for comparisons against the bilinear path.
    pub fn nearest(&self, x: T, y: T) -> Option<T> {
        let xr = to_f64(x.round());
        let yr = to_f64(y.round());
        if xr < 0.0 || yr < 0.0 || xr >= self.width as f64 || yr >= self.height as f64 {
            return None;
        }
        Some(self.get(xr as usize, yr as usize))
    }

    /// Loads an 8/16-bit grayscale or color raster; color is converted to luminance.
    pub fn load(path: &Path, frame_id: usize) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img, frame_id))
    }

    pub fn from_dynamic(img: &DynamicImage, frame_id: usize) -> Self {
        let luma = img.to_luma32f();
        let (w, h) = luma.dimensions();
        let pixels = luma
            .into_raw()
            .into_iter()
            .map(|v| lit::<T>(f64::from(v).clamp(0.0, 1.0)))
            .collect();
        Self {
            width: w as usize,
            height: h as usize,
            pixels,
            frame_id,
        }
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let data: Vec<u16> = self
            .pixels
            .iter()
            .map(|v| (to_f64(*v).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(self.width as u32, self.height as u32, data)
            .ok_or_else(|| Error::ShapeMismatch("image buffer size".into()))?;
        buf.save(path)?;
        Ok(())
    }
}

/// Writes an 8-bit RGB PNG from row-major `[r, g, b]` triples in `[0, 1]`.
pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[[f64; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for {}x{}",
            rgb.len(),
            width,
            height
        )));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let c = rgb[y as usize * width + x as usize];
        Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path)?;
    Ok(())
}
