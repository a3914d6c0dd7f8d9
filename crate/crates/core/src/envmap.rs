//! Equirectangular environment maps and the linear-algebra around them.
//!
//! Convention: `+Y` is up. Row `r` of an `H × W` grid spans polar angles
//! `θ ∈ [π r / H, π (r+1) / H]` measured from `+Y`; column `c` spans azimuths
//! `φ ∈ [2π c / W, 2π (c+1) / W]` measured from `+X` toward `+Z`. A direction
//! is `(sin θ cos φ, cos θ, sin θ sin φ)`.
//!
//! Every grid stores its values row-major with the channels interleaved, so a
//! transport vector and an RGB environment of the same dimensions share one
//! flat index space and relighting is a plain dot product per channel.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NelfError, Result};
use crate::{pfm, Mat3, Vec3};

pub const DEFAULT_HEIGHT: usize = 8;
pub const DEFAULT_WIDTH: usize = 16;

/// Fractional offsets closer than this to a texel center snap onto it, so a
/// resample on the identical grid reproduces its input bit-for-bit.
const SNAP: f64 = 1e-9;

/// Unit direction through the center of texel `(row, col)`.
///
/// # Panics
/// If the indices are outside the grid.
pub fn texel_direction(row: usize, col: usize, height: usize, width: usize) -> Vec3 {
    assert!(
        row < height && col < width,
        "texel ({row},{col}) outside {height}x{width}"
    );
    let theta = PI * (row as f64 + 0.5) / height as f64;
    let phi = 2.0 * PI * (col as f64 + 0.5) / width as f64;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, ct, st * sp)
}

/// Solid angle subtended by any texel of row `row`.
///
/// # Panics
/// If `row >= height`.
pub fn texel_solid_angle(row: usize, height: usize, width: usize) -> f64 {
    assert!(row < height, "row {row} outside height {height}");
    let t0 = PI * row as f64 / height as f64;
    let t1 = PI * (row + 1) as f64 / height as f64;
    (2.0 * PI / width as f64) * (t0.cos() - t1.cos())
}

/// All texel directions in row-major order.
pub fn texel_directions(height: usize, width: usize) -> Vec<Vec3> {
    (0..height)
        .flat_map(|r| (0..width).map(move |c| texel_direction(r, c, height, width)))
        .collect()
}

/// Per-row solid angles.
pub fn row_solid_angles(height: usize, width: usize) -> Vec<f64> {
    (0..height)
        .map(|r| texel_solid_angle(r, height, width))
        .collect()
}

/// Continuous texel-center coordinates `(row, col)` of a direction:
/// integer values land exactly on texel centers.
fn direction_to_grid(dir: &Vec3, height: usize, width: usize) -> (f64, f64) {
    let theta = dir.y.clamp(-1.0, 1.0).acos();
    let mut phi = dir.z.atan2(dir.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    let v = theta / PI * height as f64 - 0.5;
    let u = phi / (2.0 * PI) * width as f64 - 0.5;
    (v, u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Nearest,
    Bilinear,
}

fn check_unit(dir: &Vec3) {
    assert!(
        (dir.norm() - 1.0).abs() <= 1e-6,
        "direction {dir:?} is not unit length"
    );
}

/// Grid lookup shared by environment and confidence maps.
fn sample_grid(
    data: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    dir: &Vec3,
    mode: SampleMode,
    out: &mut [f64],
) {
    let (v, u) = direction_to_grid(dir, height, width);
    match mode {
        SampleMode::Nearest => {
            let row = ((v + 0.5).floor() as isize).clamp(0, height as isize - 1) as usize;
            let col = ((u + 0.5).floor() as isize).rem_euclid(width as isize) as usize;
            let i = (row * width + col) * channels;
            out.copy_from_slice(&data[i..i + channels]);
        }
        SampleMode::Bilinear => {
            let (r0, mut fr) = (v.floor(), v - v.floor());
            let (c0, mut fc) = (u.floor(), u - u.floor());
            let (mut r0, mut c0) = (r0 as isize, c0 as isize);
            if fr < SNAP {
                fr = 0.0;
            } else if fr > 1.0 - SNAP {
                fr = 0.0;
                r0 += 1;
            }
            if fc < SNAP {
                fc = 0.0;
            } else if fc > 1.0 - SNAP {
                fc = 0.0;
                c0 += 1;
            }
            out.iter_mut().for_each(|o| *o = 0.0);
            for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
                if wr == 0.0 {
                    continue;
                }
                let row = (r0 + dr).clamp(0, height as isize - 1) as usize;
                for (dc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
                    if wc == 0.0 {
                        continue;
                    }
                    let col = (c0 + dc).rem_euclid(width as isize) as usize;
                    let w = wr * wc;
                    let i = (row * width + col) * channels;
                    for ch in 0..channels {
                        out[ch] += w * data[i + ch];
                    }
                }
            }
        }
    }
}

/// Output texel at `d` receives the input sampled at `matrixᵀ d`.
fn resample(
    data: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    rot: &RotationOp,
) -> Vec<f64> {
    let inv = rot.matrix.transpose();
    let mut out = vec![0.0; data.len()];
    for row in 0..height {
        for col in 0..width {
            let d = inv * texel_direction(row, col, height, width);
            let d = d / d.norm();
            let i = (row * width + col) * channels;
            sample_grid(
                data,
                height,
                width,
                channels,
                &d,
                SampleMode::Bilinear,
                &mut out[i..i + channels],
            );
        }
    }
    out
}

/// RGB radiance on an equirectangular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    height: usize,
    width: usize,
    radiance: Vec<f64>,
}

impl EnvironmentMap {
    /// Builds a map from row-major interleaved RGB values, rejecting negative
    /// or non-finite radiance.
    pub fn new(height: usize, width: usize, radiance: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(NelfError::Contract(
                "environment map needs nonzero dimensions".into(),
            ));
        }
        if radiance.len() != height * width * 3 {
            return Err(NelfError::Contract(format!(
                "expected {} radiance values for {height}x{width}, got {}",
                height * width * 3,
                radiance.len()
            )));
        }
        if let Some(v) = radiance.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(NelfError::Contract(format!(
                "radiance must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            radiance,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            radiance: vec![0.0; height * width * 3],
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_| rgb)
    }

    /// Evaluates `f` at every texel-center direction. Negative outputs are
    /// clamped to zero.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(Vec3) -> [f64; 3]) -> Self {
        let mut radiance = Vec::with_capacity(height * width * 3);
        for d in texel_directions(height, width) {
            let rgb = f(d);
            radiance.extend(rgb.iter().map(|v| v.max(0.0)));
        }
        Self {
            height,
            width,
            radiance,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Flat row-major RGB values.
    pub fn as_slice(&self) -> &[f64] {
        &self.radiance
    }

    pub fn texel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.radiance[i], self.radiance[i + 1], self.radiance[i + 2]]
    }

    pub fn set_texel(&mut self, row: usize, col: usize, rgb: [f64; 3]) -> Result<()> {
        if rgb.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(NelfError::Contract(format!("invalid radiance {rgb:?}")));
        }
        let i = (row * self.width + col) * 3;
        self.radiance[i..i + 3].copy_from_slice(&rgb);
        Ok(())
    }

    pub fn max_value(&self) -> f64 {
        self.radiance.iter().copied().fold(0.0, f64::max)
    }

    /// Solid-angle weighted radiance per channel, `Σ Δω L`.
    pub fn energy(&self) -> [f64; 3] {
        let mut e = [0.0; 3];
        for row in 0..self.height {
            let dw = texel_solid_angle(row, self.height, self.width);
            for col in 0..self.width {
                let t = self.texel(row, col);
                for ch in 0..3 {
                    e[ch] += dw * t[ch];
                }
            }
        }
        e
    }

    pub fn scaled(&self, s: f64) -> Self {
        assert!(s >= 0.0 && s.is_finite());
        Self {
            height: self.height,
            width: self.width,
            radiance: self.radiance.iter().map(|v| v * s).collect(),
        }
    }

    /// `a·self + b·other`, clamped at zero.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        assert_eq!(self.dims(), other.dims());
        let radiance = self
            .radiance
            .iter()
            .zip(&other.radiance)
            .map(|(x, y)| (a * x + b * y).max(0.0))
            .collect();
        Self {
            height: self.height,
            width: self.width,
            radiance,
        }
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.radiance {
            *v = crate::round_f32(*v);
        }
    }

    pub fn to_json(&self) -> EnvMapJson {
        EnvMapJson {
            height: self.height,
            width: self.width,
            rgb: self.radiance.clone(),
        }
    }

    pub fn from_json(json: EnvMapJson) -> Result<Self> {
        Self::new(json.height, json.width, json.rgb)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `W × H` RGB PFM (32-bit floats).
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.radiance.iter().map(|&v| v as f32).collect();
        pfm::save_pfm(path, self.width, self.height, 3, &data)
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let p = pfm::load_pfm(path)?;
        if p.channels != 3 {
            return Err(NelfError::Format("environment PFM must be RGB".into()));
        }
        Self::new(
            p.height,
            p.width,
            p.data.into_iter().map(f64::from).collect(),
        )
    }
}

/// JSON form of an environment map: `{height, width, rgb}` with `rgb` flat,
/// row-major, channel-interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvMapJson {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
}

/// Per-texel nonnegative weight aligned with an environment map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(NelfError::Contract(format!(
                "expected {} confidence values, got {}",
                height * width,
                weights.len()
            )));
        }
        if let Some(v) = weights.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(NelfError::Contract(format!(
                "confidence must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            weights,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
            .expect("uniform confidence must be valid")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }

    pub fn max_value(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }
}

/// Nonnegative light-transport coefficients with the solid angle folded in.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportVector {
    height: usize,
    width: usize,
    coefficients: Vec<f64>,
}

impl TransportVector {
    pub fn new(height: usize, width: usize, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != height * width * 3 {
            return Err(NelfError::Contract(format!(
                "expected {} coefficients, got {}",
                height * width * 3,
                coefficients.len()
            )));
        }
        if let Some(v) = coefficients.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(NelfError::Contract(format!(
                "transport must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            coefficients,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, coefficients: Vec<f64>) -> Self {
        debug_assert_eq!(coefficients.len(), height * width * 3);
        Self {
            height,
            width,
            coefficients,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            coefficients: vec![0.0; height * width * 3],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [
            self.coefficients[i],
            self.coefficients[i + 1],
            self.coefficients[i + 2],
        ]
    }
}

/// Orthonormal rotation taking directions of one frame (typically a camera)
/// into the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationOp {
    pub matrix: Mat3,
}

impl RotationOp {
    pub fn new(matrix: Mat3) -> Result<Self> {
        let ortho = (matrix.transpose() * matrix - Mat3::identity()).abs().max();
        let det = matrix.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(NelfError::Contract(format!(
                "not a rotation: |RᵀR - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Mat3::identity(),
        }
    }

    /// Right-handed rotation by `angle` radians about `+Y`.
    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            matrix: Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        }
    }

    /// Rotation by `angle` radians about an arbitrary unit axis.
    pub fn about_axis(axis: Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self {
            matrix: *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix(),
        }
    }

    /// `other` applied first, then `self`.
    pub fn compose(&self, other: &RotationOp) -> RotationOp {
        RotationOp {
            matrix: self.matrix * other.matrix,
        }
    }

    pub fn inverse(&self) -> RotationOp {
        RotationOp {
            matrix: self.matrix.transpose(),
        }
    }

    pub fn apply(&self, d: &Vec3) -> Vec3 {
        self.matrix * d
    }
}

/// Looks up the map in direction `dir`.
///
/// # Panics
/// If `dir` is not unit length within `1e-6`.
pub fn sample(env: &EnvironmentMap, dir: &Vec3, mode: SampleMode) -> [f64; 3] {
    check_unit(dir);
    let mut out = [0.0; 3];
    sample_grid(&env.radiance, env.height, env.width, 3, dir, mode, &mut out);
    out
}

/// Re-expresses `env` through `rot`: the output at world direction `d` is the
/// input sampled bilinearly at `rotᵀ d`.
pub fn rotate(env: &EnvironmentMap, rot: &RotationOp) -> EnvironmentMap {
    let radiance = resample(&env.radiance, env.height, env.width, 3, rot);
    EnvironmentMap {
        height: env.height,
        width: env.width,
        radiance,
    }
}

pub fn rotate_confidence(conf: &ConfidenceMap, rot: &RotationOp) -> ConfidenceMap {
    let weights = resample(&conf.weights, conf.height, conf.width, 1, rot);
    ConfidenceMap {
        height: conf.height,
        width: conf.width,
        weights,
    }
}

/// One input of [`merge`]: a map in its own frame, its confidence and the
/// rotation into the world frame.
#[derive(Clone, Debug)]
pub struct MergeEntry {
    pub env: EnvironmentMap,
    pub confidence: ConfidenceMap,
    pub rotation: RotationOp,
}

/// Texels whose rotated confidence summed to (almost) nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// `(row, col)` of every mean-filled texel.
    pub degenerate: Vec<(usize, usize)>,
    /// Summed rotated confidence per texel, row-major.
    pub total_confidence: Vec<f64>,
}

impl CoverageReport {
    pub fn is_complete(&self) -> bool {
        self.degenerate.is_empty()
    }
}

/// Denominators below this are treated as no coverage.
pub const MERGE_MIN_WEIGHT: f64 = 1e-8;

/// Confidence-weighted average of rotated maps,
/// `Σ_k R_k(L_k ⊙ W_k) / Σ_k R_k(W_k)`, evaluated texelwise.
///
/// Texels with total rotated weight below [`MERGE_MIN_WEIGHT`] receive the
/// plain mean of the rotated maps and are listed in the coverage report.
pub fn merge(entries: &[MergeEntry]) -> Result<(EnvironmentMap, CoverageReport)> {
    let first = entries
        .first()
        .ok_or_else(|| NelfError::Contract("merge needs at least one entry".into()))?;
    let (h, w) = first.env.dims();
    for e in entries {
        if e.env.dims() != (h, w) || e.confidence.dims() != (h, w) {
            return Err(NelfError::Contract(
                "merge entries must share dimensions".into(),
            ));
        }
    }
    let n = h * w;
    let mut num = vec![0.0; n * 3];
    let mut den = vec![0.0; n];
    let mut plain = vec![0.0; n * 3];
    for e in entries {
        let mut weighted = e.env.radiance.clone();
        for (i, wt) in e.confidence.weights.iter().enumerate() {
            for ch in 0..3 {
                weighted[i * 3 + ch] *= wt;
            }
        }
        let rw = resample(&weighted, h, w, 3, &e.rotation);
        let rc = resample(&e.confidence.weights, h, w, 1, &e.rotation);
        let rl = resample(&e.env.radiance, h, w, 3, &e.rotation);
        for i in 0..n {
            den[i] += rc[i];
            for ch in 0..3 {
                num[i * 3 + ch] += rw[i * 3 + ch];
                plain[i * 3 + ch] += rl[i * 3 + ch];
            }
        }
    }
    let k = entries.len() as f64;
    let mut out = vec![0.0; n * 3];
    let mut report = CoverageReport {
        degenerate: Vec::new(),
        total_confidence: den.clone(),
    };
    for i in 0..n {
        if den[i] < MERGE_MIN_WEIGHT {
            report.degenerate.push((i / w, i % w));
            for ch in 0..3 {
                out[i * 3 + ch] = plain[i * 3 + ch] / k;
            }
        } else {
            for ch in 0..3 {
                out[i * 3 + ch] = (num[i * 3 + ch] / den[i]).max(0.0);
            }
        }
    }
    Ok((
        EnvironmentMap {
            height: h,
            width: w,
            radiance: out,
        },
        report,
    ))
}

/// Outgoing radiance `Σ_texels T ⊙ L` per channel.
///
/// # Panics
/// If the grid dimensions differ.
pub fn relight(t: &TransportVector, env: &EnvironmentMap) -> [f64; 3] {
    assert_eq!(
        t.dims(),
        env.dims(),
        "transport and environment dimensions differ"
    );
    relight_slices(&t.coefficients, &env.radiance)
}

/// Flat-slice form of [`relight`] used on hot paths.
#[inline]
pub fn relight_slices(t: &[f64], env: &[f64]) -> [f64; 3] {
    debug_assert_eq!(t.len(), env.len());
    let mut out = [0.0; 3];
    for (tc, lc) in t.chunks_exact(3).zip(env.chunks_exact(3)) {
        out[0] += tc[0] * lc[0];
        out[1] += tc[1] * lc[1];
        out[2] += tc[2] * lc[2];
    }
    out
}
