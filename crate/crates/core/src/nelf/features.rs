//! Hand-crafted per-view features and positional encoding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::raster::{RgbImage, ScalarImage};
use crate::scene::{project, Camera};
use crate::Vec3;

/// Width of one view's feature vector: clamped rgb, mask, view direction.
pub const FEATURE_DIM: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosEnc {
    pub bands: usize,
    pub include_input: bool,
}

impl Default for PosEnc {
    fn default() -> Self {
        Self {
            bands: 6,
            include_input: true,
        }
    }
}

impl PosEnc {
    pub fn output_dim(&self, dim: usize) -> usize {
        dim * (2 * self.bands + usize::from(self.include_input))
    }

    /// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{B−1}πx), cos(2^{B−1}πx)]`.
    pub fn encode_into(&self, x: &[f64], out: &mut Vec<f64>) {
        if self.include_input {
            out.extend_from_slice(x);
        }
        for b in 0..self.bands {
            let f = PI * (1u64 << b) as f64;
            for &v in x {
                out.push((f * v).sin());
                out.push((f * v).cos());
            }
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        self.encode_into(x, &mut out);
        out
    }
}

/// An observed source view.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceView {
    pub id: usize,
    pub image: RgbImage,
    /// Silhouette in `[0, 1]`.
    pub mask: ScalarImage,
    pub camera: Camera,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerViewFeature {
    pub view: usize,
    /// Bilinear image sample clamped to `[0, 1]`.
    pub rgb: [f64; 3],
    /// Unclamped linear radiance at the projection; used for modulation.
    pub pixel: [f64; 3],
    pub mask: f64,
    /// Unit direction from the point toward the camera.
    pub direction: Vec3,
    /// `direction · ω_t`.
    pub alignment: f64,
}

impl PerViewFeature {
    pub fn vector(&self) -> [f64; FEATURE_DIM] {
        let d = self.direction;
        [
            self.rgb[0],
            self.rgb[1],
            self.rgb[2],
            self.mask,
            d.x,
            d.y,
            d.z,
        ]
    }
}

/// Features of `x` in every view that has it in front of the camera, ordered
/// by view id.
pub fn view_features(x: &Vec3, omega_t: &Vec3, views: &[SourceView]) -> Vec<PerViewFeature> {
    let mut out: Vec<PerViewFeature> = views
        .iter()
        .filter_map(|v| {
            let ([px, py], _) = project(&v.camera, x)?;
            let pixel = v.image.sample_bilinear(px, py);
            let direction = (v.camera.position() - x).normalize();
            Some(PerViewFeature {
                view: v.id,
                rgb: pixel.map(|c| c.clamp(0.0, 1.0)),
                pixel,
                mask: v.mask.sample_bilinear(px, py).clamp(0.0, 1.0),
                direction,
                alignment: direction.dot(omega_t),
            })
        })
        .collect();
    out.sort_by_key(|f| f.view);
    out
}

/// Per-element mean and population variance across views. The flag is set
/// when fewer than two views contribute, in which case the variance is 0.
pub fn feature_stats(
    features: &[PerViewFeature],
) -> ([f64; FEATURE_DIM], [f64; FEATURE_DIM], bool) {
    let n = features.len();
    let mut mean = [0.0; FEATURE_DIM];
    let mut var = [0.0; FEATURE_DIM];
    if n == 0 {
        return (mean, var, true);
    }
    // Fixed summation order regardless of how the caller ordered the views.
    let mut order: Vec<&PerViewFeature> = features.iter().collect();
    order.sort_by_key(|f| f.view);
    for f in &order {
        for (m, v) in mean.iter_mut().zip(f.vector()) {
            *m += v / n as f64;
        }
    }
    if n >= 2 {
        for f in &order {
            for ((s, v), m) in var.iter_mut().zip(f.vector()).zip(mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
    }
    (mean, var, n < 2)
}
