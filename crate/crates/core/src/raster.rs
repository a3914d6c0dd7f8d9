//! Linear floating-point images and their on-disk encodings.
//!
//! Pixel `(col, row)` covers the continuous square `[col, col+1) × [row, row+1)`
//! so its center sits at `(col + 0.5, row + 0.5)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NelfError, Result};
use crate::pfm;

/// Linear RGB image, row-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Single-channel image (depth, alpha, masks as floats).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[inline]
fn bilinear_taps(coord: f64, len: usize) -> Option<(isize, f64)> {
    let c = coord - 0.5;
    if !c.is_finite() {
        return None;
    }
    let i0 = c.floor();
    if i0 < -1.0 || i0 >= len as f64 {
        return None;
    }
    Some((i0 as isize, c - i0))
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut img = Self::new(width, height);
        for row in 0..height {
            for col in 0..width {
                img.set(col, row, f(col, row));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear lookup at continuous pixel coordinates; taps outside the
    /// image read as zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let (Some((c0, fx)), Some((r0, fy))) =
            (bilinear_taps(x, self.width), bilinear_taps(y, self.height))
        else {
            return [0.0; 3];
        };
        let mut out = [0.0; 3];
        for (dr, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dc, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let (r, c) = (r0 + dr, c0 + dc);
                let w = wx * wy;
                if w == 0.0
                    || r < 0
                    || c < 0
                    || r >= self.height as isize
                    || c >= self.width as isize
                {
                    continue;
                }
                let px = self.get(c as usize, r as usize);
                for ch in 0..3 {
                    out[ch] += w * px[ch];
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = crate::round_f32(*v);
        }
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        pfm::save_pfm(path, self.width, self.height, 3, &data)
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let p = pfm::load_pfm(path)?;
        if p.channels != 3 {
            return Err(NelfError::Format(format!(
                "{} is not an RGB PFM",
                path.display()
            )));
        }
        Ok(Self {
            width: p.width,
            height: p.height,
            data: p.data.into_iter().map(f64::from).collect(),
        })
    }

    /// 8-bit PNG with a 2.2 display gamma; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| encode_gamma(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )?;
        Ok(())
    }
}

fn encode_gamma(v: f64) -> u8 {
    let v = if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    };
    (v.powf(1.0 / 2.2) * 255.0).round() as u8
}

impl ScalarImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    /// Bilinear lookup with zero outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (Some((c0, fx)), Some((r0, fy))) =
            (bilinear_taps(x, self.width), bilinear_taps(y, self.height))
        else {
            return 0.0;
        };
        let mut out = 0.0;
        for (dr, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dc, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let (r, c) = (r0 + dr, c0 + dc);
                let w = wx * wy;
                if w == 0.0
                    || r < 0
                    || c < 0
                    || r >= self.height as isize
                    || c >= self.width as isize
                {
                    continue;
                }
                out += w * self.get(c as usize, r as usize);
            }
        }
        out
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = crate::round_f32(*v);
        }
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        pfm::save_pfm(path, self.width, self.height, 1, &data)
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let p = pfm::load_pfm(path)?;
        if p.channels != 1 {
            return Err(NelfError::Format(format!(
                "{} is not a single-channel PFM",
                path.display()
            )));
        }
        Ok(Self {
            width: p.width,
            height: p.height,
            data: p.data.into_iter().map(f64::from).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_pixel_center_is_exact() {
        let img = RgbImage::from_fn(4, 3, |c, r| [c as f64, r as f64, (c * r) as f64]);
        assert_eq!(img.sample_bilinear(2.5, 1.5), [2.0, 1.0, 2.0]);
    }

    #[test]
    fn bilinear_blends_neighbours() {
        let img = RgbImage::from_fn(2, 1, |c, _| [c as f64; 3]);
        let v = img.sample_bilinear(1.0, 0.5);
        assert!((v[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn outside_reads_zero() {
        let img = RgbImage::from_fn(2, 2, |_, _| [1.0; 3]);
        assert_eq!(img.sample_bilinear(-5.0, 0.5), [0.0; 3]);
        assert_eq!(img.sample_bilinear(0.5, 9.0), [0.0; 3]);
    }

    #[test]
    fn gamma_encoding_endpoints() {
        assert_eq!(encode_gamma(0.0), 0);
        assert_eq!(encode_gamma(1.0), 255);
        assert_eq!(encode_gamma(2.0), 255);
        assert_eq!(encode_gamma(f64::NAN), 0);
        assert_eq!(encode_gamma(0.5), 186);
    }
}
