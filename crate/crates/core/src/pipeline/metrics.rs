//! Image quality metrics on `[0, 1]`-clamped radiance.

use crate::error::{NelfError, Result};
use crate::raster::RgbImage;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(NelfError::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error after clamping both images to `[0, 1]`.
pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0);
            d * d
        })
        .sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10 log₁₀(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * m.log10()).min(PSNR_CAP)
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity over all fully covered 11×11 Gaussian windows
/// and the three channels, with data range 1.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(NelfError::Contract(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
        )));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = gaussian_window();
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> = (0..w * h)
            .map(|i| a.data[i * 3 + ch].clamp(0.0, 1.0))
            .collect();
        let y: Vec<f64> = (0..w * h)
            .map(|i| b.data[i * 3 + ch].clamp(0.0, 1.0))
            .collect();
        for r0 in 0..=h - SSIM_WINDOW {
            for c0 in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, ki) in k.iter().enumerate() {
                    for (j, kj) in k.iter().enumerate() {
                        let g = ki * kj;
                        let p = (r0 + i) * w + c0 + j;
                        mx += g * x[p];
                        my += g * y[p];
                        xx += g * x[p] * x[p];
                        yy += g * y[p] * y[p];
                        xy += g * x[p] * y[p];
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64, n: usize) -> RgbImage {
        RgbImage::from_fn(n, n, |_, _| [v; 3])
    }

    #[test]
    fn identical_images_hit_the_caps() {
        let a = RgbImage::from_fn(16, 16, |c, r| [c as f64 / 16.0, r as f64 / 16.0, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_uniform_offset() {
        // MSE 0.01 gives exactly 20 dB.
        assert!((psnr(&constant(0.3, 8), &constant(0.4, 8)).unwrap() - 20.0).abs() < 1e-9);
        let half = 10.0 * (1.0f64 / 0.25).log10();
        assert!((psnr(&constant(0.0, 8), &constant(0.5, 8)).unwrap() - half).abs() < 1e-12);
        assert!((half - 6.0206).abs() < 1e-4);
        // Values above 1 are clamped first.
        assert_eq!(
            psnr(&constant(1.0, 8), &constant(5.0, 8)).unwrap(),
            PSNR_CAP
        );
    }

    #[test]
    fn ssim_of_constant_images_reduces_to_the_luminance_term() {
        let (a, b) = (0.2, 0.6);
        let c1 = 1e-4;
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&constant(a, 12), &constant(b, 12)).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        assert!(psnr(&constant(0.0, 8), &constant(0.0, 9)).is_err());
        assert!(ssim(&constant(0.0, 8), &constant(0.0, 8)).is_err());
    }
}
