//! Image tensors: real-valued `[0,1]` pixel grids with PNG/JPEG import and export.
//!
//! The whole pipeline works on `f64` values in `[0,1]` with shape
//! `(height, width, 3)`. Files are read and written as 8-bit images with
//! round-to-nearest quantization on export.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// Unconstrained real-valued grid, used for latents and gradients.
pub type Grid = Array3<f64>;

/// An RGB image with every value in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Grid,
}

impl ImageTensor {
    /// Validates the invariants: positive dimensions, 3 channels, all
    /// values finite and in `[0,1]`.
    pub fn new(data: Grid) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage(format!("empty dimensions {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidImage(format!("value {v} outside [0,1]")));
            }
        }
        Ok(Self { data })
    }

    /// Clamps every value into `[0,1]` and wraps without further checks.
    pub fn from_clamped(mut data: Grid) -> Self {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self { data }
    }

    /// Uniform image of the given value.
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Grid {
        &self.data
    }

    pub fn into_data(self) -> Grid {
        self.data
    }

    /// Mean squared error against another image of the same shape.
    pub fn mse(&self, other: &ImageTensor) -> f64 {
        let diff = &self.data - &other.data;
        diff.mapv(|v| v * v).mean().unwrap_or(0.0)
    }

    /// Decodes an 8-bit PNG or JPEG file into `[0,1]` reals.
    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
            }
        }
        Self::new(data)
    }

    /// Writes an 8-bit PNG with round-to-nearest quantization.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_rgb8();
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Quantizes to an 8-bit RGB buffer.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.data.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.data[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Rebuilds from an 8-bit RGB buffer.
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
            }
        }
        Self { data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        let mut data = Array3::zeros((2, 2, 3));
        data[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let data = Array3::zeros((2, 2, 4));
        assert!(ImageTensor::new(data).is_err());
    }

    #[test]
    fn from_clamped_saturates() {
        let mut data = Array3::zeros((1, 1, 3));
        data[[0, 0, 0]] = -0.3;
        data[[0, 0, 1]] = 2.0;
        data[[0, 0, 2]] = 0.5;
        let img = ImageTensor::from_clamped(data);
        assert_eq!(img.data()[[0, 0, 0]], 0.0);
        assert_eq!(img.data()[[0, 0, 1]], 1.0);
        assert_eq!(img.data()[[0, 0, 2]], 0.5);
    }

    #[test]
    fn png_round_trip_preserves_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut data = Array3::zeros((4, 5, 3));
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f64 / 255.0;
        }
        let img = ImageTensor::new(data).unwrap();
        img.write_png(&path).unwrap();
        let back = ImageTensor::read(&path).unwrap();
        assert_eq!(img, back);
    }
}
