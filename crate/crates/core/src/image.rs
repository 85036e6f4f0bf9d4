//! Minimal RGB float image and binary PPM (P6) output.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Row-major `H x W x 3` image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("RgbImage", format!("{}x{} needs {} values, got {}", width, height, width * height * 3, data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        RgbImage { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).unwrap()
    }

    /// Horizontally mirrored copy.
    pub fn flipped(&self) -> RgbImage {
        let mut out = self.clone();
        for row in 0..self.height {
            for col in 0..self.width {
                out.set_pixel(self.width - 1 - col, row, self.pixel(col, row));
            }
        }
        out
    }

    /// Places images left to right on a shared canvas (shorter ones padded black).
    pub fn hstack(images: &[RgbImage]) -> RgbImage {
        let width = images.iter().map(|i| i.width).sum();
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let mut out = RgbImage::filled(width, height, [0.0; 3]);
        let mut x0 = 0;
        for im in images {
            for row in 0..im.height {
                for col in 0..im.width {
                    out.set_pixel(x0 + col, row, im.pixel(col, row));
                }
            }
            x0 += im.width;
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }
}

/// Maps a scalar field to grayscale over `[lo, hi]`; `None` cells render black.
pub fn depth_to_image(width: usize, height: usize, values: &[Option<f64>], lo: f64, hi: f64) -> RgbImage {
    let mut out = RgbImage::filled(width, height, [0.0; 3]);
    for (i, v) in values.iter().enumerate() {
        if let Some(d) = v {
            // near = bright
            let s = 1.0 - ((d - lo) / (hi - lo)).clamp(0.0, 1.0);
            let s = 0.15 + 0.85 * s;
            out.set_pixel(i % width, i / width, [s, s, s]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let mut im = RgbImage::filled(2, 1, [0.0; 3]);
        im.set_pixel(1, 0, [1.0, 0.5, 0.0]);
        let ppm = im.to_ppm();
        assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&ppm[ppm.len() - 6..], &[0, 0, 0, 255, 128, 0]);
    }

    #[test]
    fn double_flip_is_identity() {
        let im = RgbImage::new(3, 2, (0..18).map(|v| v as f64 / 18.0).collect()).unwrap();
        assert_eq!(im.flipped().flipped(), im);
        assert_ne!(im.flipped(), im);
    }
}
