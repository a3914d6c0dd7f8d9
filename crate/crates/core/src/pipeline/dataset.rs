//! Procedural multi-view relighting datasets.
//!
//! Each scene holds one to three spheres near the origin, five source views
//! (view 0 frontal) lit by one source environment, and training/evaluation
//! triplets. A triplet's target A is a novel view under the source light
//! rotated about +Y; target B is a novel view under a different pool map.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envmap::{rotate, row_solid_angles, texel_directions, EnvironmentMap, RotationOp};
use crate::error::{NelfError, Result};
use crate::nelf::SourceView;
use crate::raster::{RgbImage, ScalarImage};
use crate::scene::{
    generate_ray, intersect, render_mask, AnalyticScene, Camera, CameraJson, Mask, Sphere,
};
use crate::transport::{reference_render, BakeOptions};
use crate::{mix_seed, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub image_size: usize,
    pub env_height: usize,
    pub env_width: usize,
    pub n_sources: usize,
    pub train_triplets: usize,
    pub eval_triplets: usize,
    pub min_spheres: usize,
    pub max_spheres: usize,
    pub bounces: u8,
    pub samples_per_texel: usize,
    pub pool_size: usize,
    /// Half-width of the camera cone in degrees (azimuth and elevation).
    pub cone_deg: f64,
    pub min_distance: f64,
    pub max_distance: f64,
    /// Half-width of the self-rotation angle range in degrees.
    pub rotation_deg: f64,
    pub max_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 1,
            image_size: 64,
            env_height: crate::envmap::DEFAULT_HEIGHT,
            env_width: crate::envmap::DEFAULT_WIDTH,
            n_sources: 5,
            train_triplets: 16,
            eval_triplets: 2,
            min_spheres: 1,
            max_spheres: 3,
            bounces: 0,
            samples_per_texel: 1,
            pool_size: 8,
            cone_deg: 30.0,
            min_distance: 1.0,
            max_distance: 2.0,
            rotation_deg: 45.0,
            max_retries: 16,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NelfError::Config(m.into()));
        if self.n_scenes == 0 {
            return bad("n_scenes must be at least 1");
        }
        if self.n_sources < 2 {
            return bad("n_sources must be at least 2");
        }
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        if self.min_spheres == 0 || self.min_spheres > self.max_spheres {
            return bad("sphere count range is empty");
        }
        if self.pool_size < 8 {
            return bad("the environment pool needs at least 8 maps");
        }
        if !(self.min_distance > 0.5 && self.min_distance <= self.max_distance) {
            return bad("camera distance range is invalid");
        }
        if self.bounces > 1 {
            return bad("bounces must be 0 or 1");
        }
        Ok(())
    }

    pub fn bake_options(&self, seed: u64) -> BakeOptions {
        BakeOptions {
            height: self.env_height,
            width: self.env_width,
            bounces: self.bounces,
            samples_per_texel: self.samples_per_texel,
            seed,
        }
    }
}

/// Kind of procedural environment map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Constant,
    SingleTexel,
    Gradient,
    RandomSmooth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub kind: EnvKind,
    pub env: EnvironmentMap,
}

/// Largest cosine-weighted irradiance over directions, divided by π: the
/// shading of a white Lambertian surface facing the brightest way.
pub fn max_diffuse_shading(env: &EnvironmentMap) -> f64 {
    let (h, w) = env.dims();
    let dirs = texel_directions(h, w);
    let solid = row_solid_angles(h, w);
    let normals = fibonacci_sphere(256);
    let mut best: f64 = 0.0;
    for n in &normals {
        let mut e = [0.0; 3];
        for (i, d) in dirs.iter().enumerate() {
            let c = n.dot(d);
            if c > 0.0 {
                let t = env.texel(i / w, i % w);
                for ch in 0..3 {
                    e[ch] += c * solid[i / w] * t[ch];
                }
            }
        }
        best = best.max(e.iter().cloned().fold(0.0, f64::max) / PI);
    }
    best
}

fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

/// Target brightness of a white diffuse surface under any pool map.
pub const POOL_SHADING: f64 = 0.8;

/// Builds the environment pool: one constant, one single-texel, two
/// gradients and random smooth lobes for the rest, each scaled so its
/// maximum diffuse shading is [`POOL_SHADING`].
pub fn env_pool(cfg: &DatasetConfig, seed: u64) -> Vec<PoolEntry> {
    let (h, w) = (cfg.env_height, cfg.env_width);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE4));
    let mut pool = vec![
        PoolEntry {
            kind: EnvKind::Constant,
            env: EnvironmentMap::constant(h, w, [1.0, 0.95, 0.9]),
        },
        PoolEntry {
            kind: EnvKind::SingleTexel,
            env: {
                let mut e = EnvironmentMap::zeros(h, w);
                // Upper hemisphere, in front of the frontal camera.
                let dirs = texel_directions(h, w);
                let best = (0..h * w)
                    .filter(|&i| (i / w) < h / 2 || h == 1)
                    .max_by(|&a, &b| {
                        (dirs[a].z + 0.5 * dirs[a].y).total_cmp(&(dirs[b].z + 0.5 * dirs[b].y))
                    })
                    .unwrap();
                e.set_texel(best / w, best % w, [1.0, 0.9, 0.8]).unwrap();
                e
            },
        },
        PoolEntry {
            kind: EnvKind::Gradient,
            env: EnvironmentMap::from_fn(h, w, |d| {
                let s = 0.5 * (d.y + 1.0);
                [0.15 + 0.85 * s, 0.2 + 0.75 * s, 0.3 + 0.7 * s]
            }),
        },
        PoolEntry {
            kind: EnvKind::Gradient,
            env: EnvironmentMap::from_fn(h, w, |d| {
                let s = 0.5 * (d.x + 1.0);
                [0.2 + 0.8 * s, 0.4, 1.0 - 0.8 * s]
            }),
        },
    ];
    while pool.len() < cfg.pool_size {
        let lobes: Vec<(Vec3, f64, [f64; 3])> = (0..3)
            .map(|_| {
                let mu = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-0.3..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let mu = if mu.norm() < 1e-3 {
                    Vec3::y()
                } else {
                    mu.normalize()
                };
                (
                    mu,
                    rng.gen_range(2.0..8.0),
                    [
                        rng.gen_range(0.2..1.0),
                        rng.gen_range(0.2..1.0),
                        rng.gen_range(0.2..1.0),
                    ],
                )
            })
            .collect();
        let ambient = rng.gen_range(0.05..0.2);
        let env = EnvironmentMap::from_fn(h, w, |d| {
            let mut c = [ambient; 3];
            for (mu, k, col) in &lobes {
                let f = (k * (d.dot(mu) - 1.0)).exp();
                for ch in 0..3 {
                    c[ch] += col[ch] * f;
                }
            }
            c
        });
        pool.push(PoolEntry {
            kind: EnvKind::RandomSmooth,
            env,
        });
    }
    for p in &mut pool {
        let s = POOL_SHADING / max_diffuse_shading(&p.env);
        p.env = p.env.scaled(s);
        p.env.round_to_f32();
    }
    pool
}

/// One rendered view with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub camera: Camera,
    pub near: f64,
    pub far: f64,
    pub rgb: RgbImage,
    /// 1 where a primary ray hits the scene.
    pub alpha: ScalarImage,
    /// Hit distance along the unit ray; 0 on background.
    pub depth: ScalarImage,
}

impl ViewData {
    pub fn mask(&self) -> Mask {
        Mask {
            width: self.alpha.width,
            height: self.alpha.height,
            values: self.alpha.data.iter().map(|a| u8::from(*a > 0.5)).collect(),
        }
    }
}

/// A supervised target: a view rendered under `env`.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub view: ViewData,
    pub env: EnvironmentMap,
    /// Pool index of the light, if drawn from the pool.
    pub pool_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    /// Novel view, source light rotated by `rotation_deg` about +Y.
    pub target_a: Target,
    pub rotation_deg: f64,
    /// Novel view, novel light.
    pub target_b: Target,
}

impl Triplet {
    pub fn rotation(&self) -> RotationOp {
        RotationOp::about_y(self.rotation_deg.to_radians())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub index: usize,
    pub seed: u64,
    pub scene: AnalyticScene,
    pub sources: Vec<ViewData>,
    pub source_env: EnvironmentMap,
    pub source_pool_index: usize,
    pub train: Vec<Triplet>,
    pub eval: Vec<Triplet>,
}

/// A triplet together with its scene's shared sources.
#[derive(Clone, Copy, Debug)]
pub struct TrainingTriplet<'a> {
    pub sources: &'a [ViewData],
    pub source_env: &'a EnvironmentMap,
    pub triplet: &'a Triplet,
}

impl SceneData {
    /// The first `k` sources as field inputs.
    pub fn source_views(&self, k: usize) -> Vec<SourceView> {
        self.sources
            .iter()
            .take(k)
            .enumerate()
            .map(|(id, v)| SourceView {
                id,
                image: v.rgb.clone(),
                mask: v.alpha.clone(),
                camera: v.camera.clone(),
            })
            .collect()
    }

    pub fn training_triplet(&self, i: usize) -> TrainingTriplet<'_> {
        TrainingTriplet {
            sources: &self.sources,
            source_env: &self.source_env,
            triplet: &self.train[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub pool: Vec<PoolEntry>,
    pub scenes: Vec<SceneData>,
}

impl Dataset {
    /// Scene indices whose seeded hash falls in the evaluation share.
    pub fn split(&self, eval_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for s in &self.scenes {
            let u =
                (mix_seed(self.seed ^ 0x5917, s.index as u64) >> 11) as f64 / (1u64 << 53) as f64;
            if u < eval_fraction {
                eval.push(s.index);
            } else {
                train.push(s.index);
            }
        }
        (train, eval)
    }
}

/// Camera on the sphere of radius `distance` at the given azimuth (about +Y,
/// from +Z) and elevation, looking at the origin with the bounding sphere
/// spanning 64% of the frame.
pub fn orbit_camera(
    az_deg: f64,
    el_deg: f64,
    distance: f64,
    bounding_radius: f64,
    size: usize,
) -> (Camera, f64, f64) {
    let (az, el) = (az_deg.to_radians(), el_deg.to_radians());
    let eye = Vec3::new(
        distance * el.cos() * az.sin(),
        distance * el.sin(),
        distance * el.cos() * az.cos(),
    );
    let half = (bounding_radius / distance).asin();
    let focal = 0.32 * size as f64 / half.tan();
    let cam = Camera::look_at(eye, Vec3::zeros(), Vec3::y(), focal, focal, size, size);
    let margin = bounding_radius + 0.05;
    (cam, distance - margin, distance + margin)
}

/// Renders a view: reference radiance, coverage and hit distance.
pub fn render_view_data(
    scene: &AnalyticScene,
    camera: Camera,
    near: f64,
    far: f64,
    env: &EnvironmentMap,
    opts: &BakeOptions,
) -> ViewData {
    let mut rgb = reference_render(scene, &camera, env, opts);
    rgb.round_to_f32();
    let mut alpha = ScalarImage::new(camera.width, camera.height);
    let mut depth = ScalarImage::new(camera.width, camera.height);
    for row in 0..camera.height {
        for col in 0..camera.width {
            let ray = generate_ray(&camera, Camera::pixel_center(col, row));
            if let Some(hit) = intersect(scene, &ray) {
                alpha.set(col, row, 1.0);
                depth.set(col, row, hit.t);
            }
        }
    }
    depth.round_to_f32();
    ViewData {
        camera,
        near,
        far,
        rgb,
        alpha,
        depth,
    }
}

fn random_scene(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> AnalyticScene {
    let n = rng.gen_range(cfg.min_spheres..=cfg.max_spheres);
    let primitives = (0..n)
        .map(|_| {
            let c = loop {
                let v = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm() <= 1.0 {
                    break v * 0.08;
                }
            };
            Sphere {
                center: [c.x, c.y, c.z].map(crate::round_f32),
                radius: crate::round_f32(rng.gen_range(0.05..0.15)),
                albedo: [
                    rng.gen_range(0.2..0.9),
                    rng.gen_range(0.2..0.9),
                    rng.gen_range(0.2..0.9),
                ]
                .map(crate::round_f32),
                ks: crate::round_f32(rng.gen_range(0.0..0.15)),
                exponent: crate::round_f32(rng.gen_range(5.0..30.0)),
            }
        })
        .collect();
    AnalyticScene::new(primitives).expect("generated spheres are valid")
}

fn random_pose(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    (
        crate::round_f32(rng.gen_range(-cfg.cone_deg..=cfg.cone_deg)),
        crate::round_f32(rng.gen_range(-cfg.cone_deg..=cfg.cone_deg)),
        crate::round_f32(rng.gen_range(cfg.min_distance..=cfg.max_distance)),
    )
}

fn other_pool_index(pool_len: usize, exclude: usize, rng: &mut ChaCha8Rng) -> usize {
    loop {
        let i = rng.gen_range(0..pool_len);
        if i != exclude {
            return i;
        }
    }
}

/// Pool maps that light most directions; single-texel maps leave much of a
/// source view black, which carries no information to modulate.
pub fn broad_pool_indices(pool: &[PoolEntry]) -> Vec<usize> {
    (0..pool.len())
        .filter(|&i| pool[i].kind != EnvKind::SingleTexel)
        .collect()
}

fn generate_scene(
    cfg: &DatasetConfig,
    pool: &[PoolEntry],
    index: usize,
    seed: u64,
) -> Result<SceneData> {
    let broad = broad_pool_indices(pool);
    for attempt in 0..cfg.max_retries {
        let scene_seed = mix_seed(seed, ((index as u64) << 8) | attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let scene = random_scene(cfg, &mut rng);
        let rb = scene.bounding_radius();
        let source_pool_index = broad[rng.gen_range(0..broad.len())];
        let source_env = pool[source_pool_index].env.clone();
        let opts = cfg.bake_options(scene_seed);
        let view = |(az, el, d): (f64, f64, f64), env: &EnvironmentMap| {
            let (cam, near, far) = orbit_camera(az, el, d, rb, cfg.image_size);
            render_view_data(&scene, cam, near, far, env, &opts)
        };
        let mut poses = vec![(0.0, 0.0, random_pose(cfg, &mut rng).2)];
        while poses.len() < cfg.n_sources {
            poses.push(random_pose(cfg, &mut rng));
        }
        let sources: Vec<ViewData> = poses.into_iter().map(|p| view(p, &source_env)).collect();
        if sources
            .iter()
            .any(|v| render_mask(&scene, &v.camera).area() == 0)
        {
            continue;
        }
        let make = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Triplet> {
            (0..count)
                .map(|_| {
                    let rotation_deg =
                        crate::round_f32(rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg));
                    let mut env_a =
                        rotate(&source_env, &RotationOp::about_y(rotation_deg.to_radians()));
                    env_a.round_to_f32();
                    let pose_a = random_pose(cfg, rng);
                    let pose_b = random_pose(cfg, rng);
                    let b_index = other_pool_index(pool.len(), source_pool_index, rng);
                    let env_b = pool[b_index].env.clone();
                    Triplet {
                        target_a: Target {
                            view: view(pose_a, &env_a),
                            env: env_a,
                            pool_index: None,
                        },
                        rotation_deg,
                        target_b: Target {
                            view: view(pose_b, &env_b),
                            env: env_b,
                            pool_index: Some(b_index),
                        },
                    }
                })
                .collect()
        };
        let train = make(cfg.train_triplets, &mut rng);
        let eval = make(cfg.eval_triplets, &mut rng);
        return Ok(SceneData {
            index,
            seed: scene_seed,
            scene,
            sources,
            source_env,
            source_pool_index,
            train,
            eval,
        });
    }
    Err(NelfError::Numerical(format!(
        "scene {index} stayed degenerate after {} attempts",
        cfg.max_retries
    )))
}

/// Generates `cfg.n_scenes` scenes deterministically from `seed`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let pool = env_pool(cfg, seed);
    let scenes = (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| generate_scene(cfg, &pool, i, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        pool,
        scenes,
    })
}

// ---------------------------------------------------------------------------
// On-disk layout

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetIndex {
    config: DatasetConfig,
    seed: u64,
    pool: Vec<EnvKind>,
    scenes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    name: String,
    camera: CameraJson,
    near: f64,
    far: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetEntry {
    view: String,
    env: String,
    pool_index: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripletEntry {
    target_a: TargetEntry,
    rotation_deg: f64,
    target_b: TargetEntry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    index: usize,
    seed: u64,
    sources: Vec<String>,
    source_env: String,
    source_pool_index: usize,
    triplets: Vec<TripletEntry>,
    eval_triplets: Vec<TripletEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn save_view(dir: &Path, name: &str, v: &ViewData) -> Result<()> {
    v.rgb.save_png(&dir.join(format!("{name}.png")))?;
    v.rgb.save_pfm(&dir.join(format!("{name}.pfm")))?;
    v.mask().save_png(&dir.join(format!("{name}_mask.png")))?;
    v.depth.save_pfm(&dir.join(format!("{name}_depth.pfm")))?;
    Ok(())
}

fn load_view(dir: &Path, name: &str, cam: &CameraEntry) -> Result<ViewData> {
    let rgb = RgbImage::load_pfm(&dir.join(format!("{name}.pfm")))?;
    let mask = Mask::load_png(&dir.join(format!("{name}_mask.png")))?;
    let depth = ScalarImage::load_pfm(&dir.join(format!("{name}_depth.pfm")))?;
    let camera = Camera::try_from(cam.camera.clone())?;
    if (rgb.width, rgb.height) != (camera.width, camera.height) {
        return Err(NelfError::Format(format!(
            "{name} does not match its camera"
        )));
    }
    Ok(ViewData {
        camera,
        near: cam.near,
        far: cam.far,
        rgb,
        alpha: mask.to_scalar(),
        depth,
    })
}

fn save_env(dir: &Path, name: &str, env: &EnvironmentMap) -> Result<()> {
    env.save_pfm(&dir.join(format!("{name}.pfm")))?;
    env.save_json(&dir.join(format!("{name}.json")))
}

impl Dataset {
    /// Writes `dir/dataset.json`, `dir/pool/` and one directory per scene.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("pool"))?;
        for (i, p) in self.pool.iter().enumerate() {
            save_env(&dir.join("pool"), &format!("env_{i:02}"), &p.env)?;
        }
        let names: Vec<String> = self
            .scenes
            .iter()
            .map(|s| format!("scene_{:04}", s.index))
            .collect();
        for (s, name) in self.scenes.iter().zip(&names) {
            save_scene(&dir.join(name), s)?;
        }
        write_json(
            &dir.join("dataset.json"),
            &DatasetIndex {
                config: self.config.clone(),
                seed: self.seed,
                pool: self.pool.iter().map(|p| p.kind).collect(),
                scenes: names,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&dir.join("dataset.json"))?;
        index.config.validate()?;
        let pool = index
            .pool
            .iter()
            .enumerate()
            .map(|(i, kind)| {
                Ok(PoolEntry {
                    kind: *kind,
                    env: EnvironmentMap::load_json(
                        &dir.join("pool").join(format!("env_{i:02}.json")),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scenes = index
            .scenes
            .iter()
            .map(|n| load_scene(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: index.config,
            seed: index.seed,
            pool,
            scenes,
        })
    }
}

fn save_scene(dir: &Path, s: &SceneData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    s.scene.save_json(&dir.join("scene.json"))?;
    let mut cameras = Vec::new();
    let mut push_cam = |name: &str, v: &ViewData| {
        cameras.push(CameraEntry {
            name: name.to_owned(),
            camera: v.camera.clone().into(),
            near: v.near,
            far: v.far,
        });
    };
    let mut sources = Vec::new();
    for (k, v) in s.sources.iter().enumerate() {
        let name = format!("source_{k}");
        save_view(dir, &name, v)?;
        push_cam(&name, v);
        sources.push(name);
    }
    save_env(dir, "source_env", &s.source_env)?;
    let entries = |prefix: &str,
                   triplets: &[Triplet],
                   push_cam: &mut dyn FnMut(&str, &ViewData)|
     -> Result<Vec<TripletEntry>> {
        triplets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut target = |tag: &str, tg: &Target| -> Result<TargetEntry> {
                    let view = format!("{prefix}_{i:03}_{tag}");
                    let env = format!("{view}_env");
                    save_view(dir, &view, &tg.view)?;
                    save_env(dir, &env, &tg.env)?;
                    push_cam(&view, &tg.view);
                    Ok(TargetEntry {
                        view,
                        env,
                        pool_index: tg.pool_index,
                    })
                };
                Ok(TripletEntry {
                    target_a: target("a", &t.target_a)?,
                    rotation_deg: t.rotation_deg,
                    target_b: target("b", &t.target_b)?,
                })
            })
            .collect()
    };
    let triplets = entries("train", &s.train, &mut push_cam)?;
    let eval_triplets = entries("eval", &s.eval, &mut push_cam)?;
    write_json(&dir.join("cameras.json"), &cameras)?;
    write_json(
        &dir.join("manifest.json"),
        &SceneManifest {
            index: s.index,
            seed: s.seed,
            sources,
            source_env: "source_env".into(),
            source_pool_index: s.source_pool_index,
            triplets,
            eval_triplets,
        },
    )
}

fn load_scene(dir: &Path) -> Result<SceneData> {
    let manifest: SceneManifest = read_json(&dir.join("manifest.json"))?;
    let cameras: Vec<CameraEntry> = read_json(&dir.join("cameras.json"))?;
    let cam = |name: &str| -> Result<&CameraEntry> {
        cameras
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| NelfError::Format(format!("no camera named {name}")))
    };
    let env = |name: &str| EnvironmentMap::load_json(&dir.join(format!("{name}.json")));
    let target = |t: &TargetEntry| -> Result<Target> {
        Ok(Target {
            view: load_view(dir, &t.view, cam(&t.view)?)?,
            env: env(&t.env)?,
            pool_index: t.pool_index,
        })
    };
    let triplets = |entries: &[TripletEntry]| -> Result<Vec<Triplet>> {
        entries
            .iter()
            .map(|e| {
                Ok(Triplet {
                    target_a: target(&e.target_a)?,
                    rotation_deg: e.rotation_deg,
                    target_b: target(&e.target_b)?,
                })
            })
            .collect()
    };
    Ok(SceneData {
        index: manifest.index,
        seed: manifest.seed,
        scene: AnalyticScene::load_json(&dir.join("scene.json"))?,
        sources: manifest
            .sources
            .iter()
            .map(|n| load_view(dir, n, cam(n)?))
            .collect::<Result<Vec<_>>>()?,
        source_env: env(&manifest.source_env)?,
        source_pool_index: manifest.source_pool_index,
        train: triplets(&manifest.triplets)?,
        eval: triplets(&manifest.eval_triplets)?,
    })
}

/// Directory holding scene `index` inside a saved dataset.
pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            image_size: 12,
            train_triplets: 2,
            eval_triplets: 1,
            ..Default::default()
        }
    }

    #[test]
    fn pool_is_normalised_and_varied() {
        let cfg = DatasetConfig::default();
        let pool = env_pool(&cfg, 3);
        assert!(pool.len() >= 8);
        for kind in [
            EnvKind::Constant,
            EnvKind::SingleTexel,
            EnvKind::Gradient,
            EnvKind::RandomSmooth,
        ] {
            assert!(pool.iter().any(|p| p.kind == kind));
        }
        for p in &pool {
            assert!((max_diffuse_shading(&p.env) - POOL_SHADING).abs() < 1e-5);
        }
    }

    #[test]
    fn generation_is_deterministic_and_within_the_cone() {
        let cfg = tiny();
        let a = generate_dataset(&cfg, 7).unwrap();
        let b = generate_dataset(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let s = &a.scenes[0];
        assert_eq!(s.sources.len(), 5);
        let frontal = s.sources[0].camera.position();
        assert!(frontal.x.abs() < 1e-9 && frontal.y.abs() < 1e-9 && frontal.z > 0.0);
        let views = s.sources.iter().chain(
            s.train
                .iter()
                .flat_map(|t| [&t.target_a.view, &t.target_b.view]),
        );
        for v in views {
            let p = v.camera.position();
            let d = p.norm();
            assert!((1.0 - 1e-6..=2.0 + 1e-6).contains(&d));
            let el = (p.y / d).asin().to_degrees();
            let az = p.x.atan2(p.z).to_degrees();
            assert!(
                el.abs() <= 30.0 + 1e-4 && az.abs() <= 30.0 + 1e-4,
                "az {az} el {el}"
            );
            assert!(v.alpha.data.iter().any(|a| *a > 0.5));
        }
        assert_ne!(generate_dataset(&cfg, 8).unwrap().scenes[0].scene, s.scene);
    }

    #[test]
    fn target_a_light_is_the_rotated_source_light() {
        let a = generate_dataset(&tiny(), 11).unwrap();
        let s = &a.scenes[0];
        for t in &s.train {
            let mut again = rotate(&s.source_env, &t.rotation());
            again.round_to_f32();
            assert_eq!(again, t.target_a.env);
            assert!(t.rotation_deg.abs() <= 45.0);
            assert_ne!(t.target_b.pool_index, Some(s.source_pool_index));
        }
    }

    #[test]
    fn object_fills_most_of_the_frame() {
        let scene = AnalyticScene::new(vec![Sphere::diffuse([0.0; 3], 0.15, [0.5; 3])]).unwrap();
        let (cam, near, far) = orbit_camera(10.0, -5.0, 1.5, scene.bounding_radius(), 64);
        let mask = render_mask(&scene, &cam);
        // Projected diameter 0.64 W: disk area π·(0.32·64)² ≈ 1318 pixels.
        let expect = PI * (0.32 * 64.0f64).powi(2);
        assert!((mask.area() as f64 - expect).abs() < 0.05 * expect);
        assert!((near - 1.3).abs() < 1e-12 && (far - 1.7).abs() < 1e-12);
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let d = generate_dataset(&tiny(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert!(scene_dir(dir.path(), 0).join("manifest.json").exists());
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }
}
