//! Ground-truth light transport on analytic scenes.
//!
//! The transport of a surface point toward `ω_o` is discretised on the
//! environment grid as `V(x, d) · f(d, ω_o) · max(n·d, 0) · Δω` per texel
//! direction `d`, where `V` is a shadow-ray visibility test and `f` a
//! normalised Phong BRDF. [`reference_render`] evaluates the same physics
//! straight into radiance without ever materialising a transport vector,
//! which makes it an independent oracle for `relight ∘ bake`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::{
    self, merge, row_solid_angles, texel_directions, ConfidenceMap, CoverageReport, EnvironmentMap,
    MergeEntry, RotationOp, TransportVector,
};
use crate::error::{NelfError, Result};
use crate::raster::RgbImage;
use crate::scene::{generate_ray, intersect, occluded, AnalyticScene, Camera, Ray, Sphere};
use crate::{mix_seed, Vec3};

/// Offset applied along the normal before tracing secondary rays.
const RAY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub ks: f64,
    pub exponent: f64,
}

impl From<&Sphere> for Material {
    fn from(s: &Sphere) -> Self {
        Material {
            albedo: s.albedo,
            ks: s.ks,
            exponent: s.exponent,
        }
    }
}

impl Material {
    /// Normalised Phong: `albedo/π + ks (e+2)/(2π) cosᵉ(mirror(d_in), ω_o)`.
    pub fn eval(&self, n: &Vec3, d_in: &Vec3, w_o: &Vec3) -> [f64; 3] {
        let mut spec = 0.0;
        if self.ks > 0.0 {
            let mirror = 2.0 * n.dot(d_in) * n - d_in;
            let c = mirror.dot(w_o).max(0.0);
            spec = self.ks * (self.exponent + 2.0) / (2.0 * PI) * c.powf(self.exponent);
        }
        [
            self.albedo[0] / PI + spec,
            self.albedo[1] / PI + spec,
            self.albedo[2] / PI + spec,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BakeOptions {
    pub height: usize,
    pub width: usize,
    /// 0: shadowed direct lighting; 1: adds a Monte-Carlo one-bounce term.
    pub bounces: u8,
    /// Hemisphere samples per texel for the one-bounce estimate.
    pub samples_per_texel: usize,
    pub seed: u64,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self {
            height: envmap::DEFAULT_HEIGHT,
            width: envmap::DEFAULT_WIDTH,
            bounces: 0,
            samples_per_texel: 1,
            seed: 0,
        }
    }
}

/// Precomputed grid geometry for one environment frame.
struct Grid {
    height: usize,
    width: usize,
    /// World-space texel directions.
    dirs: Vec<Vec3>,
    solid: Vec<f64>,
}

impl Grid {
    fn new(height: usize, width: usize, frame: &RotationOp) -> Self {
        let dirs = texel_directions(height, width)
            .iter()
            .map(|d| frame.apply(d))
            .collect();
        Grid {
            height,
            width,
            dirs,
            solid: row_solid_angles(height, width),
        }
    }

    #[inline]
    fn solid_angle(&self, texel: usize) -> f64 {
        self.solid[texel / self.width]
    }

    fn len(&self) -> usize {
        self.height * self.width
    }
}

fn visible(scene: &AnalyticScene, x: &Vec3, n: &Vec3, d: &Vec3) -> bool {
    let ray = Ray {
        origin: x + n * RAY_EPS,
        direction: *d,
        near: 0.0,
        far: f64::INFINITY,
    };
    !occluded(scene, &ray)
}

/// Direct transport of `x` toward `w_o`, accumulated into `out` scaled by
/// `weight` (per channel).
fn accumulate_direct(
    scene: &AnalyticScene,
    grid: &Grid,
    x: &Vec3,
    n: &Vec3,
    mat: &Material,
    w_o: &Vec3,
    weight: [f64; 3],
    out: &mut [f64],
) {
    for (i, d) in grid.dirs.iter().enumerate() {
        let cos = n.dot(d);
        if cos <= 0.0 || !visible(scene, x, n, d) {
            continue;
        }
        let f = mat.eval(n, d, w_o);
        let g = cos * grid.solid_angle(i);
        for ch in 0..3 {
            out[i * 3 + ch] += weight[ch] * f[ch] * g;
        }
    }
}

/// Cosine-weighted hemisphere direction around `n`.
fn cosine_sample(n: &Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let local = Vec3::new(r * phi.cos(), r * phi.sin(), (1.0 - u1).max(0.0).sqrt());
    let helper = if n.x.abs() > 0.9 {
        Vec3::y()
    } else {
        Vec3::x()
    };
    let t = n.cross(&helper).normalize();
    let b = n.cross(&t);
    (t * local.x + b * local.y + n * local.z).normalize()
}

/// Secondary surface hits used by the one-bounce estimate, shared between the
/// bake and the reference renderer so both consume the same random stream.
struct Bounce {
    /// Throughput `f_x · π / N` for the path through this hit.
    weight: [f64; 3],
    point: Vec3,
    normal: Vec3,
    material: Material,
    outgoing: Vec3,
}

fn trace_bounces(
    scene: &AnalyticScene,
    x: &Vec3,
    n: &Vec3,
    mat: &Material,
    w_o: &Vec3,
    samples: usize,
    seed: u64,
) -> Vec<Bounce> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..samples {
        let wi = cosine_sample(n, &mut rng);
        let ray = Ray {
            origin: x + n * RAY_EPS,
            direction: wi,
            near: 0.0,
            far: f64::INFINITY,
        };
        let Some(hit) = intersect(scene, &ray) else {
            continue;
        };
        let f = mat.eval(n, &wi, w_o);
        let s = PI / samples as f64;
        out.push(Bounce {
            weight: [f[0] * s, f[1] * s, f[2] * s],
            point: hit.point,
            normal: hit.normal,
            material: Material::from(&scene.primitives[hit.primitive]),
            outgoing: -wi,
        });
    }
    out
}

/// Result of baking one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTransport {
    pub transport: TransportVector,
    /// Set when `n·ω_o ≤ 0`; the transport is then all zeros.
    pub backfacing: bool,
}

/// Transport of surface point `x` toward `w_o` on the world-aligned grid.
pub fn bake_point_transport(
    scene: &AnalyticScene,
    x: &Vec3,
    n: &Vec3,
    mat: &Material,
    w_o: &Vec3,
    opts: &BakeOptions,
) -> PointTransport {
    bake_point_transport_in_frame(scene, x, n, mat, w_o, opts, &RotationOp::identity())
}

/// Like [`bake_point_transport`] but on a grid whose directions are mapped
/// to the world by `frame`: texel direction `d` stands for world direction
/// `frame · d`.
pub fn bake_point_transport_in_frame(
    scene: &AnalyticScene,
    x: &Vec3,
    n: &Vec3,
    mat: &Material,
    w_o: &Vec3,
    opts: &BakeOptions,
    frame: &RotationOp,
) -> PointTransport {
    let grid = Grid::new(opts.height, opts.width, frame);
    bake_with_grid(scene, &grid, x, n, mat, w_o, opts, opts.seed)
}

#[allow(clippy::too_many_arguments)]
fn bake_with_grid(
    scene: &AnalyticScene,
    grid: &Grid,
    x: &Vec3,
    n: &Vec3,
    mat: &Material,
    w_o: &Vec3,
    opts: &BakeOptions,
    seed: u64,
) -> PointTransport {
    let mut coeffs = vec![0.0; grid.len() * 3];
    if n.dot(w_o) <= 0.0 {
        return PointTransport {
            transport: TransportVector::from_raw(grid.height, grid.width, coeffs),
            backfacing: true,
        };
    }
    accumulate_direct(scene, grid, x, n, mat, w_o, [1.0; 3], &mut coeffs);
    if opts.bounces >= 1 {
        let samples = opts.samples_per_texel * grid.len();
        for b in trace_bounces(scene, x, n, mat, w_o, samples, seed) {
            accumulate_direct(
                scene,
                grid,
                &b.point,
                &b.normal,
                &b.material,
                &b.outgoing,
                b.weight,
                &mut coeffs,
            );
        }
    }
    PointTransport {
        transport: TransportVector::from_raw(grid.height, grid.width, coeffs),
        backfacing: false,
    }
}

/// Per-pixel transport vectors of a camera view; `None` where the center ray
/// misses the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceTransportImage {
    pub width: usize,
    pub height: usize,
    pub env_height: usize,
    pub env_width: usize,
    pub pixels: Vec<Option<TransportVector>>,
}

pub const TRANSPORT_MAGIC: &[u8; 7] = b"NELF-T1";

impl SurfaceTransportImage {
    pub fn get(&self, col: usize, row: usize) -> Option<&TransportVector> {
        self.pixels[row * self.width + col].as_ref()
    }

    pub fn present_count(&self) -> usize {
        self.pixels.iter().filter(|p| p.is_some()).count()
    }

    /// Binary container: magic, `width height H W` as little-endian `u32`,
    /// then per pixel a presence byte followed by `H·W·3` little-endian `f32`
    /// (zeros for absent pixels).
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(TRANSPORT_MAGIC)?;
        for v in [self.width, self.height, self.env_height, self.env_width] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let n = self.env_height * self.env_width * 3;
        let mut buf = Vec::with_capacity(1 + n * 4);
        for p in &self.pixels {
            buf.clear();
            buf.push(p.is_some() as u8);
            match p {
                Some(t) => t
                    .as_slice()
                    .iter()
                    .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
                None => buf.resize(1 + n * 4, 0),
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        input.read_exact(&mut magic)?;
        if &magic != TRANSPORT_MAGIC {
            return Err(NelfError::Format("not a NELF-T1 transport image".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [width, height, env_height, env_width] = dims;
        let n = env_height * env_width * 3;
        let mut pixels = Vec::with_capacity(width * height);
        let mut buf = vec![0u8; 1 + n * 4];
        for _ in 0..width * height {
            input.read_exact(&mut buf)?;
            let present = match buf[0] {
                0 => false,
                1 => true,
                b => return Err(NelfError::Format(format!("bad presence byte {b}"))),
            };
            if present {
                let coeffs = buf[1..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                pixels.push(Some(TransportVector::new(env_height, env_width, coeffs)?));
            } else {
                pixels.push(None);
            }
        }
        Ok(Self {
            width,
            height,
            env_height,
            env_width,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Bakes every first hit of `cam` with `ω_o` pointing back at the camera.
pub fn bake_transport_image(
    scene: &AnalyticScene,
    cam: &Camera,
    opts: &BakeOptions,
) -> SurfaceTransportImage {
    bake_transport_image_in_frame(scene, cam, opts, &RotationOp::identity())
}

/// [`bake_transport_image`] on a grid mapped to the world by `frame`.
pub fn bake_transport_image_in_frame(
    scene: &AnalyticScene,
    cam: &Camera,
    opts: &BakeOptions,
    frame: &RotationOp,
) -> SurfaceTransportImage {
    let grid = Grid::new(opts.height, opts.width, frame);
    let pixels = (0..cam.pixel_count())
        .into_par_iter()
        .map(|i| {
            let ray = generate_ray(cam, Camera::pixel_center(i % cam.width, i / cam.width));
            let hit = intersect(scene, &ray)?;
            let mat = Material::from(&scene.primitives[hit.primitive]);
            let seed = mix_seed(opts.seed, i as u64);
            Some(
                bake_with_grid(
                    scene,
                    &grid,
                    &hit.point,
                    &hit.normal,
                    &mat,
                    &(-ray.direction),
                    opts,
                    seed,
                )
                .transport,
            )
        })
        .collect();
    SurfaceTransportImage {
        width: cam.width,
        height: cam.height,
        env_height: opts.height,
        env_width: opts.width,
        pixels,
    }
}

/// Direct radiance leaving `x` toward `w_o`, summed texel by texel.
fn direct_radiance(
    scene: &AnalyticScene,
    grid: &Grid,
    env: &[f64],
    x: &Vec3,
    n: &Vec3,
    mat: &Material,
    w_o: &Vec3,
) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, d) in grid.dirs.iter().enumerate() {
        let cos = n.dot(d);
        if cos <= 0.0 || !visible(scene, x, n, d) {
            continue;
        }
        let f = mat.eval(n, d, w_o);
        let dw = grid.solid_angle(i);
        for ch in 0..3 {
            out[ch] += f[ch] * cos * dw * env[i * 3 + ch];
        }
    }
    out
}

/// Renders `cam` under `env` by integrating the reflection equation over the
/// environment texels directly.
pub fn reference_render(
    scene: &AnalyticScene,
    cam: &Camera,
    env: &EnvironmentMap,
    opts: &BakeOptions,
) -> RgbImage {
    assert_eq!(
        env.dims(),
        (opts.height, opts.width),
        "environment does not match bake grid"
    );
    let grid = Grid::new(opts.height, opts.width, &RotationOp::identity());
    let radiance = env.as_slice();
    let pixels: Vec<[f64; 3]> = (0..cam.pixel_count())
        .into_par_iter()
        .map(|i| {
            let ray = generate_ray(cam, Camera::pixel_center(i % cam.width, i / cam.width));
            let Some(hit) = intersect(scene, &ray) else {
                return [0.0; 3];
            };
            let mat = Material::from(&scene.primitives[hit.primitive]);
            let w_o = -ray.direction;
            if hit.normal.dot(&w_o) <= 0.0 {
                return [0.0; 3];
            }
            let mut lo =
                direct_radiance(scene, &grid, radiance, &hit.point, &hit.normal, &mat, &w_o);
            if opts.bounces >= 1 {
                let samples = opts.samples_per_texel * grid.len();
                let seed = mix_seed(opts.seed, i as u64);
                for b in trace_bounces(scene, &hit.point, &hit.normal, &mat, &w_o, samples, seed) {
                    let li = direct_radiance(
                        scene,
                        &grid,
                        radiance,
                        &b.point,
                        &b.normal,
                        &b.material,
                        &b.outgoing,
                    );
                    for ch in 0..3 {
                        lo[ch] += b.weight[ch] * li[ch];
                    }
                }
            }
            lo
        })
        .collect();
    let mut img = RgbImage::new(cam.width, cam.height);
    for (i, p) in pixels.into_iter().enumerate() {
        img.set(i % cam.width, i / cam.width, p);
    }
    img
}

/// Applies `relight` to every present pixel; absent pixels are black.
pub fn relight_image(transport: &SurfaceTransportImage, env: &EnvironmentMap) -> RgbImage {
    let mut img = RgbImage::new(transport.width, transport.height);
    for (i, p) in transport.pixels.iter().enumerate() {
        if let Some(t) = p {
            img.set(
                i % transport.width,
                i / transport.width,
                envmap::relight(t, env),
            );
        }
    }
    img
}

/// One observation for light estimation. `transport` must be expressed in
/// the camera frame (baked with `frame = camera.camera_to_world()`).
#[derive(Clone, Copy, Debug)]
pub struct LightView<'a> {
    pub image: &'a RgbImage,
    pub transport: &'a SurfaceTransportImage,
    pub camera: &'a Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightEstimate {
    /// Lighting in the camera frame.
    pub env: EnvironmentMap,
    pub confidence: ConfidenceMap,
    /// `Σ_p ‖T_p·L − I_p‖²` at the solution.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightEstimation {
    pub global: EnvironmentMap,
    pub per_view: Vec<LightEstimate>,
    pub coverage: CoverageReport,
}

pub const PGD_ITERATIONS: usize = 500;
const POWER_ITERATIONS: usize = 100;

/// Largest eigenvalue of a symmetric PSD matrix via power iteration
/// (Rayleigh quotient of the final iterate).
fn max_eigenvalue(g: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut gv = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        for i in 0..n {
            gv[i] = (0..n).map(|j| g[i * n + j] * v[j]).sum();
        }
        lambda = v.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>();
        let norm = gv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().zip(&gv).for_each(|(a, b)| *a = b / norm);
    }
    lambda
}

/// Nonnegative least squares `min_{x≥0} ½xᵀGx − bᵀx` by projected gradient
/// descent from zero with step `1/λ_max(G)`.
pub fn projected_gradient_nnls(g: &[f64], b: &[f64], iterations: usize) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let lambda = max_eigenvalue(g, n);
    if lambda <= 0.0 {
        return x;
    }
    let step = 1.0 / lambda;
    let mut grad = vec![0.0; n];
    for _ in 0..iterations {
        for i in 0..n {
            let row = &g[i * n..(i + 1) * n];
            grad[i] = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() - b[i];
        }
        for i in 0..n {
            x[i] = (x[i] - step * grad[i]).max(0.0);
        }
    }
    x
}

fn estimate_view(view: &LightView<'_>, height: usize, width: usize) -> Result<LightEstimate> {
    let t = view.transport;
    if (t.env_height, t.env_width) != (height, width) {
        return Err(NelfError::Contract(
            "transport grid does not match requested dimensions".into(),
        ));
    }
    if (view.image.width, view.image.height) != (t.width, t.height) {
        return Err(NelfError::Contract(
            "image and transport sizes differ".into(),
        ));
    }
    let n = height * width;
    let mut env = vec![0.0; n * 3];
    let mut conf = vec![0.0; n];
    let valid: Vec<(usize, &TransportVector)> = t
        .pixels
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();
    for (_, tp) in &valid {
        for (k, c) in tp.as_slice().chunks_exact(3).enumerate() {
            conf[k] += c[0] + c[1] + c[2];
        }
    }
    for ch in 0..3 {
        let mut g = vec![0.0; n * n];
        let mut b = vec![0.0; n];
        let mut nz: Vec<(usize, f64)> = Vec::with_capacity(n);
        for (pix, tp) in &valid {
            let obs = view.image.data[pix * 3 + ch];
            nz.clear();
            nz.extend(
                tp.as_slice()
                    .iter()
                    .skip(ch)
                    .step_by(3)
                    .copied()
                    .enumerate()
                    .filter(|(_, v)| *v != 0.0),
            );
            for &(i, vi) in &nz {
                b[i] += vi * obs;
                let row = &mut g[i * n..(i + 1) * n];
                for &(j, vj) in &nz {
                    row[j] += vi * vj;
                }
            }
        }
        let x = projected_gradient_nnls(&g, &b, PGD_ITERATIONS);
        for i in 0..n {
            env[i * 3 + ch] = x[i];
        }
    }
    let mut residual = 0.0;
    for (pix, tp) in &valid {
        let pred = envmap::relight_slices(tp.as_slice(), &env);
        for ch in 0..3 {
            let r = pred[ch] - view.image.data[pix * 3 + ch];
            residual += r * r;
        }
    }
    Ok(LightEstimate {
        env: EnvironmentMap::new(height, width, env)?,
        confidence: ConfidenceMap::new(height, width, conf)?,
        residual,
    })
}

/// Recovers lighting from posed images with known camera-frame transport:
/// a nonnegative least-squares fit per view, merged into the world frame with
/// responsivity confidences.
pub fn estimate_light(
    views: &[LightView<'_>],
    height: usize,
    width: usize,
) -> Result<LightEstimation> {
    if views.is_empty() {
        return Err(NelfError::Contract(
            "light estimation needs at least one view".into(),
        ));
    }
    if views.iter().all(|v| v.transport.present_count() == 0) {
        return Err(NelfError::Numerical("no view has any surface pixel".into()));
    }
    let per_view = views
        .par_iter()
        .map(|v| estimate_view(v, height, width))
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<MergeEntry> = per_view
        .iter()
        .zip(views)
        .map(|(est, v)| MergeEntry {
            env: est.env.clone(),
            confidence: est.confidence.clone(),
            rotation: v.camera.camera_to_world(),
        })
        .collect();
    let (global, coverage) = merge(&entries)?;
    Ok(LightEstimation {
        global,
        per_view,
        coverage,
    })
}

/// Bakes each posed image's transport in its camera frame and runs
/// [`estimate_light`].
pub fn estimate_scene_light(
    scene: &AnalyticScene,
    views: &[(&RgbImage, &Camera)],
    opts: &BakeOptions,
) -> Result<LightEstimation> {
    let transports: Vec<SurfaceTransportImage> = views
        .iter()
        .map(|(_, cam)| bake_transport_image_in_frame(scene, cam, opts, &cam.camera_to_world()))
        .collect();
    let lv: Vec<LightView<'_>> = views
        .iter()
        .zip(&transports)
        .map(|((image, camera), transport)| LightView {
            image,
            transport,
            camera,
        })
        .collect();
    estimate_light(&lv, opts.height, opts.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envmap::{relight, texel_solid_angle};
    use crate::scene::Sphere;
    use approx::assert_abs_diff_eq;

    fn opts() -> BakeOptions {
        BakeOptions::default()
    }

    fn diffuse_scene(albedo: [f64; 3]) -> AnalyticScene {
        AnalyticScene::new(vec![Sphere::diffuse([0.0; 3], 0.2, albedo)]).unwrap()
    }

    #[test]
    fn unshadowed_top_point() {
        let albedo = [0.7, 0.4, 0.2];
        let scene = diffuse_scene(albedo);
        let x = Vec3::new(0.0, 0.2, 0.0);
        let n = Vec3::y();
        let mat = Material::from(&scene.primitives[0]);
        let pt = bake_point_transport(&scene, &x, &n, &mat, &Vec3::new(0.0, 0.6, 0.8), &opts());
        assert!(!pt.backfacing);
        let t = pt.transport;
        for r in 4..8 {
            for c in 0..16 {
                assert_eq!(t.get(r, c), [0.0; 3]);
            }
        }
        // White furnace on the 8x16 quadrature, enumerated independently.
        let quad: f64 = texel_directions(8, 16)
            .iter()
            .enumerate()
            .map(|(i, d)| n.dot(d).max(0.0) * texel_solid_angle(i / 16, 8, 16))
            .sum();
        let out = relight(&t, &EnvironmentMap::constant(8, 16, [1.0; 3]));
        for ch in 0..3 {
            assert_abs_diff_eq!(out[ch], albedo[ch] / PI * quad, epsilon = 1e-14);
        }
        assert!((quad - PI).abs() < 0.05 * PI);
    }

    #[test]
    fn backfacing_is_flagged() {
        let scene = diffuse_scene([0.5; 3]);
        let mat = Material::from(&scene.primitives[0]);
        let pt = bake_point_transport(
            &scene,
            &Vec3::new(0.0, 0.2, 0.0),
            &Vec3::y(),
            &mat,
            &-Vec3::y(),
            &opts(),
        );
        assert!(pt.backfacing);
        assert!(pt.transport.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn occluder_zeroes_its_texel() {
        let (r, c) = (1, 3);
        let d = crate::envmap::texel_direction(r, c, 8, 16);
        let x = Vec3::new(0.0, 0.2, 0.0);
        let base = diffuse_scene([0.5; 3]);
        let mut occ = base.clone();
        let center = x + d * 0.5;
        occ.primitives.push(Sphere::diffuse(
            [center.x, center.y, center.z],
            0.05,
            [0.5; 3],
        ));
        let mat = Material::from(&base.primitives[0]);
        let w_o = Vec3::new(0.0, 1.0, 0.3).normalize();
        let open = bake_point_transport(&base, &x, &Vec3::y(), &mat, &w_o, &opts()).transport;
        let shut = bake_point_transport(&occ, &x, &Vec3::y(), &mat, &w_o, &opts()).transport;
        assert!(open.get(r, c)[0] > 0.0);
        assert_eq!(shut.get(r, c), [0.0; 3]);
        for (a, b) in shut.as_slice().iter().zip(open.as_slice()) {
            assert!(a <= b);
        }
    }

    #[test]
    fn albedo_scaling_is_exact_for_diffuse() {
        let a = diffuse_scene([0.4, 0.4, 0.4]);
        let b = diffuse_scene([0.8, 0.8, 0.8]);
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.3, 1.2),
            Vec3::zeros(),
            Vec3::y(),
            60.0,
            60.0,
            12,
            12,
        );
        let ta = bake_transport_image(&a, &cam, &opts());
        let tb = bake_transport_image(&b, &cam, &opts());
        for (pa, pb) in ta.pixels.iter().zip(&tb.pixels) {
            if let (Some(pa), Some(pb)) = (pa, pb) {
                for (x, y) in pa.as_slice().iter().zip(pb.as_slice()) {
                    assert_eq!(2.0 * x, *y);
                }
            }
        }
    }

    #[test]
    fn transport_image_matches_mask_and_point_bakes() {
        let scene = AnalyticScene::new(vec![Sphere {
            center: [0.0; 3],
            radius: 0.2,
            albedo: [0.6, 0.5, 0.4],
            ks: 0.3,
            exponent: 12.0,
        }])
        .unwrap();
        let cam = Camera::look_at(
            Vec3::new(0.2, 0.1, 1.3),
            Vec3::zeros(),
            Vec3::y(),
            40.0,
            40.0,
            16,
            16,
        );
        let img = bake_transport_image(&scene, &cam, &opts());
        let mask = crate::scene::render_mask(&scene, &cam);
        assert_eq!(img.present_count(), mask.area());
        for i in [17usize, 100, 120, 136, 140] {
            let (col, row) = (i % 16, i / 16);
            let ray = generate_ray(&cam, Camera::pixel_center(col, row));
            match intersect(&scene, &ray) {
                Some(hit) => {
                    let direct = bake_point_transport(
                        &scene,
                        &hit.point,
                        &hit.normal,
                        &Material::from(&scene.primitives[0]),
                        &-ray.direction,
                        &opts(),
                    );
                    assert_eq!(img.get(col, row).unwrap(), &direct.transport);
                }
                None => assert!(img.get(col, row).is_none()),
            }
        }
        let empty = bake_transport_image(&AnalyticScene::empty(), &cam, &opts());
        assert_eq!(empty.present_count(), 0);
    }

    #[test]
    fn reference_matches_relight_of_bake() {
        let scene = AnalyticScene::new(vec![
            Sphere {
                center: [0.0; 3],
                radius: 0.15,
                albedo: [0.6, 0.5, 0.4],
                ks: 0.2,
                exponent: 20.0,
            },
            Sphere::diffuse([0.12, 0.1, 0.05], 0.08, [0.3, 0.7, 0.2]),
        ])
        .unwrap();
        let cam = Camera::look_at(
            Vec3::new(0.2, 0.1, 1.3),
            Vec3::zeros(),
            Vec3::y(),
            40.0,
            40.0,
            16,
            16,
        );
        let env = EnvironmentMap::from_fn(8, 16, |d| {
            [1.0 + d.y, 0.5 + 0.5 * d.x.abs(), 0.3 + d.z * d.z]
        });
        for bounces in [0u8, 1] {
            let o = BakeOptions {
                bounces,
                samples_per_texel: 1,
                ..opts()
            };
            let a = reference_render(&scene, &cam, &env, &o);
            let b = relight_image(&bake_transport_image(&scene, &cam, &o), &env);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
        let black = reference_render(&scene, &cam, &EnvironmentMap::zeros(8, 16), &opts());
        assert!(black.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pole_pixel_under_single_texel() {
        let albedo = [0.8, 0.6, 0.4];
        let scene = diffuse_scene(albedo);
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::zeros(),
            Vec3::y(),
            50.0,
            50.0,
            15,
            15,
        );
        let (r, c) = (3, 4);
        let mut env = EnvironmentMap::zeros(8, 16);
        env.set_texel(r, c, [2.0; 3]).unwrap();
        let img = reference_render(&scene, &cam, &env, &opts());
        // Center pixel sees the sphere point (0, 0, 0.2) with normal +Z.
        let d = crate::envmap::texel_direction(r, c, 8, 16);
        let expect: Vec<f64> = albedo
            .iter()
            .map(|a| a / PI * d.z.max(0.0) * texel_solid_angle(r, 8, 16) * 2.0)
            .collect();
        let got = img.get(7, 7);
        for ch in 0..3 {
            assert_abs_diff_eq!(got[ch], expect[ch], epsilon = 1e-12);
        }
    }

    #[test]
    fn transport_binary_round_trip() {
        let scene = diffuse_scene([0.5; 3]);
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::zeros(),
            Vec3::y(),
            20.0,
            20.0,
            6,
            5,
        );
        let mut img = bake_transport_image(&scene, &cam, &opts());
        for t in img.pixels.iter_mut().flatten() {
            let c: Vec<f64> = t.as_slice().iter().map(|v| crate::round_f32(*v)).collect();
            *t = TransportVector::new(8, 16, c).unwrap();
        }
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"NELF-T1");
        assert_eq!(buf.len(), 7 + 16 + 30 * (1 + 384 * 4));
        assert_eq!(SurfaceTransportImage::read_from(&buf[..]).unwrap(), img);
        buf[0] = b'X';
        assert!(SurfaceTransportImage::read_from(&buf[..]).is_err());
    }

    #[test]
    fn nnls_identity_like_system() {
        let n = 6;
        let mut g = vec![0.0; n * n];
        for i in 0..4 {
            g[i * n + i] = 1.0;
        }
        let b = [0.3, 0.0, 2.5, 1.25, 0.0, 0.0];
        let x = projected_gradient_nnls(&g, &b, PGD_ITERATIONS);
        for i in 0..n {
            assert_abs_diff_eq!(x[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn nnls_clamps_at_zero() {
        // Unconstrained optimum (1, -1) is infeasible; constrained optimum is (0.5, 0).
        let g = [2.0, 1.0, 1.0, 2.0];
        let b = [1.0, -1.0];
        let x = projected_gradient_nnls(&g, &b, PGD_ITERATIONS);
        assert_abs_diff_eq!(x[0], 0.5, epsilon = 1e-9);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn estimate_light_failure_and_black_cases() {
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::zeros(),
            Vec3::y(),
            20.0,
            20.0,
            8,
            8,
        );
        let empty = bake_transport_image(&AnalyticScene::empty(), &cam, &opts());
        let img = RgbImage::new(8, 8);
        let views = [LightView {
            image: &img,
            transport: &empty,
            camera: &cam,
        }];
        assert!(estimate_light(&views, 8, 16).is_err());
        assert!(estimate_light(&[], 8, 16).is_err());

        let scene = diffuse_scene([0.5; 3]);
        let t = bake_transport_image_in_frame(&scene, &cam, &opts(), &cam.camera_to_world());
        let views = [LightView {
            image: &img,
            transport: &t,
            camera: &cam,
        }];
        let est = estimate_light(&views, 8, 16).unwrap();
        assert!(est.global.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(est.per_view[0].residual, 0.0);
    }
}
