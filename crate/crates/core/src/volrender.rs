//! Differentiable alpha compositing along rays with optional visual-hull
//! pruning.
//!
//! Samples sit at `u_i = near + (i + j_i)·Δ` with `Δ = (far − near)/N` and
//! `j_i = 0` unless stratified. Interval lengths are `δ_i = u_{i+1} − u_i`
//! and the last one runs to `far`. The composite is
//! `w_i = T_i (1 − exp(−σ_i δ_i))`, `rgb = Σ w_i c_i`, `depth = Σ w_i u_i`,
//! `alpha = Σ w_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NelfError, Result};
use crate::scene::{project, Camera, Mask, Ray};
use crate::Vec3;

/// Alpha below which a ray counts as transparent.
pub const TRANSPARENT_ALPHA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarchConfig {
    pub n_samples: usize,
    pub stratified: bool,
    pub near: f64,
    pub far: f64,
    pub hull_enabled: bool,
    /// Jitter seed; only read when `stratified`.
    #[serde(default)]
    pub seed: u64,
}

impl Default for MarchConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            stratified: false,
            near: 0.0,
            far: 1.0,
            hull_enabled: false,
            seed: 0,
        }
    }
}

impl MarchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(NelfError::Contract(format!(
                "n_samples must be >= 2, got {}",
                self.n_samples
            )));
        }
        if !(self.near.is_finite() && self.far.is_finite() && self.near < self.far) {
            return Err(NelfError::Contract(format!(
                "bad bounds [{}, {}]",
                self.near, self.far
            )));
        }
        Ok(())
    }

    /// Sample depths and interval lengths.
    pub fn sample_depths(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_samples;
        let step = (self.far - self.near) / n as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let u: Vec<f64> = (0..n)
            .map(|i| {
                let j = if self.stratified {
                    rng.gen::<f64>()
                } else {
                    0.0
                };
                self.near + (i as f64 + j) * step
            })
            .collect();
        let delta = (0..n)
            .map(|i| {
                if i + 1 < n {
                    u[i + 1] - u[i]
                } else {
                    self.far - u[i]
                }
            })
            .collect();
        (u, delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOutput {
    pub rgb: [f64; 3],
    /// `Σ w_i u_i`; 0 when transparent.
    pub depth: f64,
    pub alpha: f64,
    pub transparent: bool,
}

impl RenderOutput {
    /// Termination depth conditioned on hitting something: `depth / alpha`.
    pub fn expected_depth(&self) -> Option<f64> {
        (!self.transparent).then(|| self.depth / self.alpha)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MarchStats {
    pub queries: usize,
    pub pruned: usize,
}

/// Silhouettes and their cameras, aligned by index.
#[derive(Clone, Debug)]
pub struct Hull {
    pub masks: Vec<Mask>,
    pub cameras: Vec<Camera>,
}

pub const DEFAULT_HULL_DILATION: usize = 1;

impl Hull {
    /// Builds a hull from masks dilated by `dilation` pixels.
    pub fn new(masks: &[Mask], cameras: &[Camera], dilation: usize) -> Result<Self> {
        if masks.len() != cameras.len() {
            return Err(NelfError::Contract(
                "hull masks and cameras differ in count".into(),
            ));
        }
        for (m, c) in masks.iter().zip(cameras) {
            if (m.width, m.height) != (c.width, c.height) {
                return Err(NelfError::Contract(
                    "hull mask does not match its camera".into(),
                ));
            }
        }
        let masks = masks
            .iter()
            .map(|m| {
                if dilation > 0 {
                    m.dilate(dilation)
                } else {
                    m.clone()
                }
            })
            .collect();
        Ok(Self {
            masks,
            cameras: cameras.to_vec(),
        })
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        hull_test(x, &self.masks, &self.cameras)
    }
}

/// True iff `x` projects in frame onto a nonzero pixel of every mask.
pub fn hull_test(x: &Vec3, masks: &[Mask], cameras: &[Camera]) -> bool {
    masks.iter().zip(cameras).all(|(m, c)| {
        let Some(([px, py], _)) = project(c, x) else {
            return false;
        };
        if !(px >= 0.0 && py >= 0.0) {
            return false;
        }
        let (col, row) = (px.floor() as usize, py.floor() as usize);
        col < m.width && row < m.height && m.get(col, row) != 0
    })
}

/// Composites per-sample density and radiance.
pub fn composite(sigma: &[f64], color: &[[f64; 3]], u: &[f64], delta: &[f64]) -> RenderOutput {
    let (rgb, depth, alpha) = composite_raw(sigma, color, u, delta);
    let alpha = alpha.clamp(0.0, 1.0);
    let transparent = alpha <= TRANSPARENT_ALPHA;
    RenderOutput {
        rgb,
        depth: if transparent { 0.0 } else { depth },
        alpha,
        transparent,
    }
}

/// Raw composite sums `(rgb, Σ w u, Σ w)` without clamping or the
/// transparency rule; this is the function [`composite_backward`] differentiates.
pub fn composite_raw(
    sigma: &[f64],
    color: &[[f64; 3]],
    u: &[f64],
    delta: &[f64],
) -> ([f64; 3], f64, f64) {
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    let mut alpha = 0.0;
    for i in 0..sigma.len() {
        let a = 1.0 - (-sigma[i] * delta[i]).exp();
        let w = trans * a;
        for ch in 0..3 {
            rgb[ch] += w * color[i][ch];
        }
        depth += w * u[i];
        alpha += w;
        trans *= 1.0 - a;
    }
    (rgb, depth, alpha)
}

/// Reverse pass of [`composite_raw`]. Returns `(∂/∂σ_i, ∂/∂c_i)` given
/// upstream gradients on rgb, depth and alpha.
pub fn composite_backward(
    sigma: &[f64],
    color: &[[f64; 3]],
    u: &[f64],
    delta: &[f64],
    g_rgb: [f64; 3],
    g_depth: f64,
    g_alpha: f64,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = sigma.len();
    let mut alpha = vec![0.0; n];
    let mut trans = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = 1.0;
    for i in 0..n {
        alpha[i] = 1.0 - (-sigma[i] * delta[i]).exp();
        trans[i] = t;
        t *= 1.0 - alpha[i];
        s[i] = g_rgb[0] * color[i][0]
            + g_rgb[1] * color[i][1]
            + g_rgb[2] * color[i][2]
            + g_depth * u[i]
            + g_alpha;
    }
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    // rest = Σ_{j>i} (T_j / T_{i+1}) α_j s_j, built back to front.
    let mut rest = 0.0;
    for i in (0..n).rev() {
        let w = trans[i] * alpha[i];
        d_color[i] = [w * g_rgb[0], w * g_rgb[1], w * g_rgb[2]];
        d_sigma[i] = trans[i] * (s[i] - rest) * delta[i] * (1.0 - alpha[i]);
        rest = alpha[i] * s[i] + (1.0 - alpha[i]) * rest;
    }
    (d_sigma, d_color)
}

/// Per-sample values recorded by a march.
#[derive(Clone, Debug, PartialEq)]
pub struct MarchTrace {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// False where the hull pruned the sample.
    pub queried: Vec<bool>,
}

fn trace<F>(
    ray: &Ray,
    mut field: F,
    cfg: &MarchConfig,
    hull: Option<&Hull>,
) -> Result<(MarchTrace, MarchStats)>
where
    F: FnMut(&Vec3, &Vec3) -> (f64, [f64; 3]),
{
    cfg.validate()?;
    let (u, delta) = cfg.sample_depths();
    let n = u.len();
    let view = -ray.direction;
    let mut out = MarchTrace {
        sigma: vec![0.0; n],
        color: vec![[0.0; 3]; n],
        queried: vec![false; n],
        u,
        delta,
    };
    let mut stats = MarchStats::default();
    let hull = if cfg.hull_enabled { hull } else { None };
    for i in 0..n {
        let x = ray.at(out.u[i]);
        if let Some(h) = hull {
            if !h.contains(&x) {
                stats.pruned += 1;
                continue;
            }
        }
        let (s, c) = field(&x, &view);
        stats.queries += 1;
        if s.is_nan() || c.iter().any(|v| v.is_nan()) {
            return Err(NelfError::Numerical(format!(
                "field returned NaN at sample {i}"
            )));
        }
        if s < 0.0 {
            return Err(NelfError::Contract(format!(
                "field returned negative density {s}"
            )));
        }
        out.sigma[i] = s;
        out.color[i] = c;
        out.queried[i] = true;
    }
    Ok((out, stats))
}

/// Marches `ray` through `field(x, ω_t)`, where `ω_t` points back along the
/// ray. With `cfg.hull_enabled` and a hull supplied, samples outside the
/// hull get zero density without querying the field.
pub fn march<F>(
    ray: &Ray,
    field: F,
    cfg: &MarchConfig,
    hull: Option<&Hull>,
) -> Result<(RenderOutput, MarchStats)>
where
    F: FnMut(&Vec3, &Vec3) -> (f64, [f64; 3]),
{
    let (t, stats) = trace(ray, field, cfg, hull)?;
    Ok((composite(&t.sigma, &t.color, &t.u, &t.delta), stats))
}

/// Gradient of one sample's field output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleGrad {
    pub position: Vec3,
    pub d_sigma: f64,
    pub d_color: [f64; 3],
}

/// Re-runs the forward march and returns the gradient of
/// `g_rgb·rgb + g_depth·depth + g_alpha·alpha` (raw sums) with respect to
/// every queried sample's density and radiance. Pruned samples are omitted.
pub fn march_backward<F>(
    ray: &Ray,
    field: F,
    cfg: &MarchConfig,
    hull: Option<&Hull>,
    g_rgb: [f64; 3],
    g_depth: f64,
    g_alpha: f64,
) -> Result<Vec<SampleGrad>>
where
    F: FnMut(&Vec3, &Vec3) -> (f64, [f64; 3]),
{
    let (t, _) = trace(ray, field, cfg, hull)?;
    let (ds, dc) = composite_backward(&t.sigma, &t.color, &t.u, &t.delta, g_rgb, g_depth, g_alpha);
    Ok((0..t.u.len())
        .filter(|&i| t.queried[i])
        .map(|i| SampleGrad {
            position: ray.at(t.u[i]),
            d_sigma: ds[i],
            d_color: dc[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{density, render_mask, AnalyticScene, Sphere};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(n: usize, near: f64, far: f64) -> MarchConfig {
        MarchConfig {
            n_samples: n,
            near,
            far,
            ..Default::default()
        }
    }

    #[test]
    fn empty_space_is_transparent() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z());
        let (out, stats) = march(&ray, |_, _| (0.0, [1.0; 3]), &cfg(64, 0.0, 1.0), None).unwrap();
        assert_eq!(out.rgb, [0.0; 3]);
        assert_eq!(out.alpha, 0.0);
        assert!(out.transparent);
        assert_eq!(out.depth, 0.0);
        assert_eq!(stats.queries, 64);
    }

    #[test]
    fn slab_matches_closed_form_transmittance() {
        // Slab z in [0.25, 0.75] along a ray on [0, 1]; its faces sit on the sample grid.
        let ray = Ray::new(Vec3::zeros(), Vec3::z());
        for sigma in [1.0, 3.0, 10.0, 50.0, 200.0, 500.0] {
            let field = |x: &Vec3, _: &Vec3| {
                if (0.25..0.75).contains(&x.z) {
                    (sigma, [0.3, 0.6, 0.9])
                } else {
                    (0.0, [0.0; 3])
                }
            };
            let (out, _) = march(&ray, field, &cfg(256, 0.0, 1.0), None).unwrap();
            let expect = 1.0 - (-sigma * 0.5f64).exp();
            assert!((out.alpha - expect).abs() <= 1e-4);
            assert!((out.rgb[1] - 0.6 * expect).abs() <= 1e-4);
        }
    }

    #[test]
    fn sphere_depth_and_opacity() {
        let scene = AnalyticScene::new(vec![Sphere::diffuse([0.0; 3], 0.3, [0.5; 3])]).unwrap();
        let ray = Ray::new(Vec3::new(0.05, -0.02, 2.0), -Vec3::z());
        let c = cfg(64, 1.0, 3.0);
        let (out, _) = march(&ray, |x, _| (density(&scene, x), [1.0; 3]), &c, None).unwrap();
        let hit = crate::scene::intersect(&scene, &ray).unwrap().t;
        let spacing = (c.far - c.near) / c.n_samples as f64;
        assert!(out.alpha >= 0.85);
        assert!((out.expected_depth().unwrap() - hit).abs() <= spacing);
    }

    #[test]
    fn front_sample_hides_later_radiance() {
        let u = [0.0, 0.5];
        let d = [0.5, 0.5];
        let opaque_first = composite(&[100.0, 100.0], &[[1.0; 3], [0.0; 3]], &u, &d);
        let opaque_last = composite(&[100.0, 100.0], &[[0.0; 3], [1.0; 3]], &u, &d);
        assert!(opaque_first.rgb[0] > 0.99);
        assert!(opaque_last.rgb[0] < 0.01);
    }

    #[test]
    fn negative_and_nan_fields_fail() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z());
        let c = cfg(8, 0.0, 1.0);
        assert!(matches!(
            march(&ray, |_, _| (-1.0, [0.0; 3]), &c, None),
            Err(NelfError::Contract(_))
        ));
        assert!(matches!(
            march(&ray, |_, _| (f64::NAN, [0.0; 3]), &c, None),
            Err(NelfError::Numerical(_))
        ));
    }

    #[test]
    fn stratified_is_deterministic_and_stays_in_bounds() {
        let c = MarchConfig {
            stratified: true,
            seed: 11,
            ..cfg(32, 0.5, 2.0)
        };
        let (a, da) = c.sample_depths();
        let (b, _) = c.sample_depths();
        assert_eq!(a, b);
        assert!(a.iter().all(|u| (0.5..2.0).contains(u)));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!((da.iter().sum::<f64>() - (2.0 - a[0])).abs() < 1e-12);
    }

    fn loss(
        sigma: &[f64],
        color: &[[f64; 3]],
        u: &[f64],
        d: &[f64],
        g: ([f64; 3], f64, f64),
    ) -> f64 {
        let (rgb, depth, alpha) = composite_raw(sigma, color, u, d);
        g.0[0] * rgb[0] + g.0[1] * rgb[1] + g.0[2] * rgb[2] + g.1 * depth + g.2 * alpha
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = MarchConfig {
                stratified: true,
                seed: rng.gen(),
                ..cfg(8, 1.0, 2.0)
            };
            let (u, d) = c.sample_depths();
            let mut sigma: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..8.0)).collect();
            let mut color: Vec<[f64; 3]> =
                (0..8).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let g = (
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let (ds, dc) = composite_backward(&sigma, &color, &u, &d, g.0, g.1, g.2);
            let h = 1e-6;
            let mut ad = Vec::new();
            let mut fd = Vec::new();
            for i in 0..8 {
                let s0 = sigma[i];
                sigma[i] = s0 + h;
                let lp = loss(&sigma, &color, &u, &d, g);
                sigma[i] = s0 - h;
                let lm = loss(&sigma, &color, &u, &d, g);
                sigma[i] = s0;
                ad.push(ds[i]);
                fd.push((lp - lm) / (2.0 * h));
                for ch in 0..3 {
                    let c0 = color[i][ch];
                    color[i][ch] = c0 + h;
                    let lp = loss(&sigma, &color, &u, &d, g);
                    color[i][ch] = c0 - h;
                    let lm = loss(&sigma, &color, &u, &d, g);
                    color[i][ch] = c0;
                    ad.push(dc[i][ch]);
                    fd.push((lp - lm) / (2.0 * h));
                }
            }
            let diff: f64 = ad
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = ad
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(diff / scale <= 1e-5, "relative error {}", diff / scale);
        }
    }

    #[test]
    fn zero_upstream_and_occluded_samples() {
        let u = [0.0, 0.25, 0.5, 0.75];
        let d = [0.25; 4];
        let sigma = [0.0, 500.0, 1.0, 2.0];
        let color = [[0.5; 3]; 4];
        let (ds, dc) = composite_backward(&sigma, &color, &u, &d, [0.0; 3], 0.0, 0.0);
        assert!(ds.iter().all(|v| *v == 0.0));
        assert!(dc.iter().all(|v| *v == [0.0; 3]));
        let (ds, dc) = composite_backward(&sigma, &color, &u, &d, [1.0; 3], 1.0, 1.0);
        // Transmittance past sample 1 is exp(-125) < 1e-12.
        assert!(ds[3].abs() < 1e-12 && dc[3][0].abs() < 1e-12);
    }

    #[test]
    fn march_backward_lists_queried_samples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z());
        let grads = march_backward(
            &ray,
            |x, _| (x.z * 4.0, [1.0, 0.0, 0.0]),
            &cfg(8, 0.0, 1.0),
            None,
            [1.0, 0.0, 0.0],
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(grads.len(), 8);
        assert!((grads[3].position.z - 0.375).abs() < 1e-15);
    }

    fn ring_cameras(n: usize) -> Vec<Camera> {
        (0..n)
            .map(|k| {
                let a = (k as f64 - (n as f64 - 1.0) / 2.0) * 0.4;
                let eye = Vec3::new(1.5 * a.sin(), 0.2, 1.5 * a.cos());
                Camera::look_at(eye, Vec3::zeros(), Vec3::y(), 60.0, 60.0, 32, 32)
            })
            .collect()
    }

    #[test]
    fn hull_membership() {
        let scene = AnalyticScene::new(vec![Sphere::diffuse([0.0; 3], 0.2, [0.5; 3])]).unwrap();
        let cams = ring_cameras(5);
        let masks: Vec<Mask> = cams.iter().map(|c| render_mask(&scene, c)).collect();
        assert!(hull_test(&Vec3::zeros(), &masks, &cams));
        assert!(!hull_test(&Vec3::new(3.0, 3.0, 0.0), &masks, &cams));
        // Blank out one view's silhouette: the center is inside 4 of 5.
        let mut partial = masks.clone();
        partial[2] = Mask::new(32, 32);
        assert!(!hull_test(&Vec3::zeros(), &partial, &cams));
        // Behind every camera.
        assert!(!hull_test(&Vec3::new(0.0, 0.0, 10.0), &masks, &cams));
    }

    #[test]
    fn hull_pruning_preserves_oracle_renders() {
        let scene = AnalyticScene::new(vec![
            Sphere::diffuse([0.0, 0.0, 0.0], 0.15, [0.5; 3]),
            Sphere::diffuse([0.1, 0.05, 0.05], 0.07, [0.5; 3]),
        ])
        .unwrap();
        let cams = ring_cameras(5);
        let masks: Vec<Mask> = cams.iter().map(|c| render_mask(&scene, c)).collect();
        let hull = Hull::new(&masks, &cams, DEFAULT_HULL_DILATION).unwrap();
        let target = Camera::look_at(
            Vec3::new(0.3, 0.1, 1.4),
            Vec3::zeros(),
            Vec3::y(),
            60.0,
            60.0,
            24,
            24,
        );
        let on = MarchConfig {
            hull_enabled: true,
            ..cfg(64, 1.0, 1.9)
        };
        let off = MarchConfig {
            hull_enabled: false,
            ..on
        };
        let field = |x: &Vec3, _: &Vec3| (density(&scene, x), [x.x.abs(), 0.5, x.y.abs()]);
        let (mut q_on, mut q_off) = (0, 0);
        for row in 0..24 {
            for col in 0..24 {
                let ray = crate::scene::generate_ray(&target, Camera::pixel_center(col, row));
                let (a, sa) = march(&ray, field, &on, Some(&hull)).unwrap();
                let (b, sb) = march(&ray, field, &off, Some(&hull)).unwrap();
                q_on += sa.queries;
                q_off += sb.queries;
                for ch in 0..3 {
                    assert!((a.rgb[ch] - b.rgb[ch]).abs() <= 1e-6);
                }
                assert!((a.depth - b.depth).abs() <= 1e-6 && (a.alpha - b.alpha).abs() <= 1e-6);
            }
        }
        assert!((q_on as f64) <= 0.7 * q_off as f64);
    }

    proptest! {
        #[test]
        fn alpha_stays_in_unit_interval(sig in proptest::collection::vec(0.0f64..1e4, 2..40)) {
            let n = sig.len();
            let c = cfg(n, 0.0, 1.0);
            let (u, d) = c.sample_depths();
            let color = vec![[1.0; 3]; n];
            let out = composite(&sig, &color, &u, &d);
            prop_assert!((0.0..=1.0).contains(&out.alpha));
            prop_assert!(out.rgb.iter().all(|v| *v >= 0.0));
            if let Some(depth) = out.expected_depth() {
                prop_assert!(depth >= c.near - 1e-9 && depth <= c.far + 1e-9);
            }
        }
    }
}
