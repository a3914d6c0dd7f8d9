//! The light-transport field: multi-view aggregation, density, per-view
//! transport, view blending and relighting, built on the tape.

use std::rc::Rc;

use rayon::prelude::*;

use super::features::{feature_stats, view_features, PerViewFeature, SourceView, FEATURE_DIM};
use super::params::{Architecture, Mlp, NelfParams, TransportMode};
use super::tape::{Matrix, RayLayout, Tape, Var};
use crate::envmap::{EnvironmentMap, TransportVector};
use crate::error::{NelfError, Result};
use crate::raster::{RgbImage, ScalarImage};
use crate::scene::{generate_ray, Camera, Ray};
use crate::volrender::{Hull, MarchConfig, MarchStats, TRANSPARENT_ALPHA};
use crate::Vec3;

/// Constant inputs for a batch of sample points. Rows are (point, view)
/// pairs; `groups[m]..groups[m+1]` are the rows of point `m`.
#[derive(Clone, Debug)]
pub struct FieldInput {
    pub groups: Rc<[usize]>,
    /// `[PosEnc(x), feature_k, mean, variance, alignment]` per row.
    pub geometry_in: Matrix,
    /// Direction from the point to each view's camera.
    pub direction: Matrix,
    /// `ω_t` repeated per row.
    pub target: Matrix,
    pub feature: Matrix,
    /// Unclamped source radiance for modulation.
    pub pixel: Matrix,
}

impl FieldInput {
    /// Assembles rows for points whose feature lists are all nonempty.
    pub fn from_features(
        arch: &Architecture,
        points: &[(Vec3, Vec3, Vec<PerViewFeature>)],
    ) -> Self {
        let rows: usize = points.iter().map(|p| p.2.len()).sum();
        let gi = arch.geometry_input();
        let mut groups = Vec::with_capacity(points.len() + 1);
        groups.push(0);
        let mut geometry_in = Vec::with_capacity(rows * gi);
        let mut direction = Vec::with_capacity(rows * 3);
        let mut target = Vec::with_capacity(rows * 3);
        let mut feature = Vec::with_capacity(rows * FEATURE_DIM);
        let mut pixel = Vec::with_capacity(rows * 3);
        let mut enc = Vec::with_capacity(arch.posenc.output_dim(3));
        for (x, omega_t, feats) in points {
            assert!(!feats.is_empty(), "point without views");
            let xs = x * arch.position_scale;
            enc.clear();
            arch.posenc.encode_into(&[xs.x, xs.y, xs.z], &mut enc);
            let (mean, var, _) = feature_stats(feats);
            for f in feats {
                let v = f.vector();
                geometry_in.extend_from_slice(&enc);
                geometry_in.extend_from_slice(&v);
                geometry_in.extend_from_slice(&mean);
                geometry_in.extend_from_slice(&var);
                geometry_in.push(f.alignment);
                direction.extend_from_slice(f.direction.as_slice());
                target.extend_from_slice(omega_t.as_slice());
                feature.extend_from_slice(&v);
                pixel.extend_from_slice(&f.pixel);
            }
            groups.push(groups.last().unwrap() + feats.len());
        }
        Self {
            groups: Rc::from(groups),
            geometry_in: Matrix::from_vec(rows, gi, geometry_in),
            direction: Matrix::from_vec(rows, 3, direction),
            target: Matrix::from_vec(rows, 3, target),
            feature: Matrix::from_vec(rows, FEATURE_DIM, feature),
            pixel: Matrix::from_vec(rows, 3, pixel),
        }
    }

    pub fn points(&self) -> usize {
        self.groups.len() - 1
    }
}

/// Tape handles for every intermediate of the field.
#[derive(Clone, Copy, Debug)]
pub struct FieldNodes {
    /// Per-view geometry features, `rows × geometry_dim`.
    pub geometry: Var,
    /// Per-view aggregation weights in `(0, 1)`, `rows × 1`.
    pub geometry_weight: Var,
    /// Density per point, `points × 1`.
    pub sigma: Var,
    /// Per-view transport, `rows × 3HW`.
    pub view_transport: Var,
    /// Blend weights, `rows × 1` or `rows × HW`.
    pub blend_weight: Var,
    /// Blended transport per point, `points × 3HW`.
    pub transport: Var,
    /// Radiance per point, `points × 3`.
    pub radiance: Var,
}

fn run_mlp(tape: &mut Tape<'_>, mlp: &Mlp, mut x: Var) -> Var {
    let n = mlp.layers.len();
    for (i, layer) in mlp.layers.iter().enumerate() {
        x = tape.affine(x, *layer);
        if i + 1 < n {
            x = tape.relu(x);
        }
    }
    x
}

/// Geometry features and their sigmoid weights.
pub fn geometry_graph(tape: &mut Tape<'_>, params: &NelfParams, input: Var) -> (Var, Var) {
    let out = run_mlp(tape, &params.nets.geometry, input);
    let gd = params.arch.geometry_dim;
    let g = tape.slice(out, 0, gd);
    let logit = tape.slice(out, gd, 1);
    (g, tape.sigmoid(logit))
}

/// Density from the normalised-weight mean and variance of the geometry
/// features.
pub fn density_graph(
    tape: &mut Tape<'_>,
    params: &NelfParams,
    g: Var,
    wg: Var,
    groups: &Rc<[usize]>,
) -> Var {
    let wn = tape.group_normalize(wg, groups);
    let mean = tape.group_weighted_sum(g, wn, groups);
    let spread = tape.repeat_rows(mean, groups);
    let centered = tape.sub(g, spread);
    let sq = tape.mul(centered, centered);
    let var = tape.group_weighted_sum(sq, wn, groups);
    let inp = tape.concat(&[mean, var]);
    let out = run_mlp(tape, &params.nets.density, inp);
    let s = tape.softplus(out);
    tape.scale(s, params.arch.density_scale)
}

/// Per-view transport from `[ω_k, G_k, feature_k]`.
pub fn transport_graph(
    tape: &mut Tape<'_>,
    params: &NelfParams,
    direction: Var,
    g: Var,
    feature: Var,
    pixel: Var,
    mode: TransportMode,
) -> Var {
    let inp = tape.concat(&[direction, g, feature]);
    let out = run_mlp(tape, &params.nets.transport, inp);
    let scales = tape.softplus(out);
    match mode {
        TransportMode::Modulated => tape.mul_channels(scales, pixel),
        TransportMode::Direct => scales,
    }
}

/// Softmax-over-views blending of per-view transport; returns
/// `(weights, blended)`.
pub fn blend_graph(
    tape: &mut Tape<'_>,
    params: &NelfParams,
    direction: Var,
    target: Var,
    g: Var,
    view_transport: Var,
    groups: &Rc<[usize]>,
) -> (Var, Var) {
    let inp = tape.concat(&[direction, target, g]);
    let logits = run_mlp(tape, &params.nets.blend, inp);
    let w = tape.group_softmax(logits, groups);
    (w, tape.group_weighted_sum(view_transport, w, groups))
}

/// Records the full field for `input` under `env`.
pub fn field_graph(
    tape: &mut Tape<'_>,
    params: &NelfParams,
    input: &FieldInput,
    env: &Rc<[f64]>,
) -> FieldNodes {
    let x = tape.input(input.geometry_in.clone());
    let direction = tape.input(input.direction.clone());
    let target = tape.input(input.target.clone());
    let feature = tape.input(input.feature.clone());
    let pixel = tape.input(input.pixel.clone());
    let (g, wg) = geometry_graph(tape, params, x);
    let sigma = density_graph(tape, params, g, wg, &input.groups);
    let view_transport =
        transport_graph(tape, params, direction, g, feature, pixel, params.arch.mode);
    let (blend_weight, transport) = blend_graph(
        tape,
        params,
        direction,
        target,
        g,
        view_transport,
        &input.groups,
    );
    let radiance = tape.relight(transport, env);
    FieldNodes {
        geometry: g,
        geometry_weight: wg,
        sigma,
        view_transport,
        blend_weight,
        transport,
        radiance,
    }
}

fn check_env(params: &NelfParams, env: &EnvironmentMap) -> Result<()> {
    if env.dims() != (params.arch.env_height, params.arch.env_width) {
        return Err(NelfError::Contract(format!(
            "environment is {:?}, field expects {:?}",
            env.dims(),
            (params.arch.env_height, params.arch.env_width)
        )));
    }
    Ok(())
}

/// Output of [`aggregate_geometry`].
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub geometry: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Fewer than two views: the variance inputs are zero.
    pub degenerate: bool,
}

/// Runs the shared aggregation network over the views of one point.
pub fn aggregate_geometry(
    x: &Vec3,
    omega_t: &Vec3,
    features: &[PerViewFeature],
    params: &NelfParams,
) -> Aggregation {
    let input = FieldInput::from_features(&params.arch, &[(*x, *omega_t, features.to_vec())]);
    let mut tape = Tape::new(&params.values);
    let xi = tape.input(input.geometry_in.clone());
    let (g, wg) = geometry_graph(&mut tape, params, xi);
    let gm = tape.value(g);
    Aggregation {
        geometry: (0..gm.rows).map(|r| gm.row(r).to_vec()).collect(),
        weights: tape.value(wg).data.clone(),
        degenerate: features.len() < 2,
    }
}

/// Density from per-view geometry features and weights.
pub fn predict_density(geometry: &[Vec<f64>], weights: &[f64], params: &NelfParams) -> f64 {
    let n = geometry.len();
    let gd = params.arch.geometry_dim;
    let mut tape = Tape::new(&params.values);
    let g = tape.input(Matrix::from_vec(n, gd, geometry.concat()));
    let w = tape.input(Matrix::from_vec(n, 1, weights.to_vec()));
    let groups: Rc<[usize]> = Rc::from(vec![0, n]);
    let s = density_graph(&mut tape, params, g, w, &groups);
    tape.value(s).data[0]
}

/// Transport of one view.
pub fn predict_transport_perview(
    geometry: &[f64],
    feature: &PerViewFeature,
    params: &NelfParams,
    mode: TransportMode,
) -> TransportVector {
    let mut tape = Tape::new(&params.values);
    let d = tape.input(Matrix::from_vec(
        1,
        3,
        feature.direction.as_slice().to_vec(),
    ));
    let g = tape.input(Matrix::from_vec(1, geometry.len(), geometry.to_vec()));
    let f = tape.input(Matrix::from_vec(1, FEATURE_DIM, feature.vector().to_vec()));
    let p = tape.input(Matrix::from_vec(1, 3, feature.pixel.to_vec()));
    let t = transport_graph(&mut tape, params, d, g, f, p, mode);
    TransportVector::new(
        params.arch.env_height,
        params.arch.env_width,
        tape.value(t).data.clone(),
    )
    .expect("softplus transport is finite and nonnegative")
}

/// Softmax blend of per-view transports toward `ω_t`.
pub fn blend_transport(
    transports: &[TransportVector],
    directions: &[Vec3],
    omega_t: &Vec3,
    geometry: &[Vec<f64>],
    params: &NelfParams,
) -> TransportVector {
    let n = transports.len();
    let width = 3 * params.arch.texels();
    let mut tape = Tape::new(&params.values);
    let d = tape.input(Matrix::from_vec(
        n,
        3,
        directions
            .iter()
            .flat_map(|v| v.as_slice().to_vec())
            .collect(),
    ));
    let t = tape.input(Matrix::from_vec(
        n,
        3,
        (0..n).flat_map(|_| omega_t.as_slice().to_vec()).collect(),
    ));
    let g = tape.input(Matrix::from_vec(
        n,
        params.arch.geometry_dim,
        geometry.concat(),
    ));
    let tk = tape.input(Matrix::from_vec(
        n,
        width,
        transports
            .iter()
            .flat_map(|t| t.as_slice().to_vec())
            .collect(),
    ));
    let groups: Rc<[usize]> = Rc::from(vec![0, n]);
    let (_, blended) = blend_graph(&mut tape, params, d, t, g, tk, &groups);
    TransportVector::new(
        params.arch.env_height,
        params.arch.env_width,
        tape.value(blended).data.clone(),
    )
    .expect("convex combination of valid transports")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub radiance: [f64; 3],
    /// No source view sees the point; outputs are zero.
    pub excluded: bool,
}

/// Density and radiance at `x` seen along `ω_t` under `env`.
pub fn field_query(
    x: &Vec3,
    omega_t: &Vec3,
    views: &[SourceView],
    env: &EnvironmentMap,
    params: &NelfParams,
) -> Result<FieldSample> {
    check_env(params, env)?;
    let feats = view_features(x, omega_t, views);
    if feats.is_empty() {
        return Ok(FieldSample {
            sigma: 0.0,
            radiance: [0.0; 3],
            excluded: true,
        });
    }
    let input = FieldInput::from_features(&params.arch, &[(*x, *omega_t, feats)]);
    let env: Rc<[f64]> = Rc::from(env.as_slice());
    let mut tape = Tape::new(&params.values);
    let nodes = field_graph(&mut tape, params, &input, &env);
    let r = tape.value(nodes.radiance);
    Ok(FieldSample {
        sigma: tape.value(nodes.sigma).data[0],
        radiance: [r.data[0], r.data[1], r.data[2]],
        excluded: false,
    })
}

/// Ray samples that survived pruning, ready for the field.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub layout: Rc<RayLayout>,
    pub input: FieldInput,
    pub stats: MarchStats,
}

/// Places samples along each ray (`cfgs[i]` configures ray `i`), drops those
/// outside the hull or unseen by every view, and gathers their features.
pub fn prepare_rays(
    arch: &Architecture,
    rays: &[Ray],
    cfgs: &[MarchConfig],
    hull: Option<&Hull>,
    views: &[SourceView],
) -> Result<RayBatch> {
    assert_eq!(rays.len(), cfgs.len(), "one march config per ray");
    let mut offsets = vec![0];
    let mut u_all = Vec::new();
    let mut delta_all = Vec::new();
    let mut points = Vec::new();
    let mut stats = MarchStats::default();
    for (ray, cfg) in rays.iter().zip(cfgs) {
        cfg.validate()?;
        let (u, delta) = cfg.sample_depths();
        let omega_t = -ray.direction;
        for i in 0..u.len() {
            let x = ray.at(u[i]);
            if cfg.hull_enabled && hull.is_some_and(|h| !h.contains(&x)) {
                stats.pruned += 1;
                continue;
            }
            let feats = view_features(&x, &omega_t, views);
            if feats.is_empty() {
                stats.pruned += 1;
                continue;
            }
            stats.queries += 1;
            u_all.push(u[i]);
            delta_all.push(delta[i]);
            points.push((x, omega_t, feats));
        }
        offsets.push(points.len());
    }
    Ok(RayBatch {
        layout: Rc::new(RayLayout {
            rays: offsets,
            u: u_all,
            delta: delta_all,
        }),
        input: FieldInput::from_features(arch, &points),
        stats,
    })
}

/// Records the field and compositor for a batch; the result is
/// `rays × [r, g, b, depth, alpha]`.
pub fn render_graph(
    tape: &mut Tape<'_>,
    params: &NelfParams,
    batch: &RayBatch,
    env: &Rc<[f64]>,
) -> Var {
    if batch.input.points() == 0 {
        let s = tape.input(Matrix::zeros(0, 1));
        let c = tape.input(Matrix::zeros(0, 3));
        return tape.composite(s, c, &batch.layout);
    }
    let nodes = field_graph(tape, params, &batch.input, env);
    tape.composite(nodes.sigma, nodes.radiance, &batch.layout)
}

/// A rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub rgb: RgbImage,
    /// Raw `Σ w u`; 0 where transparent.
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
    pub stats: MarchStats,
}

/// Rays per tape when rendering whole images.
pub const RENDER_CHUNK: usize = 32;

/// Renders every pixel center of `camera`. `base` supplies the sample
/// count, stratification and hull flag; bounds come from `near`/`far`.
pub fn render_view(
    params: &NelfParams,
    views: &[SourceView],
    hull: Option<&Hull>,
    env: &EnvironmentMap,
    camera: &Camera,
    base: &MarchConfig,
) -> Result<Rendering> {
    check_env(params, env)?;
    let n = camera.pixel_count();
    let chunks: Vec<usize> = (0..n).step_by(RENDER_CHUNK).collect();
    let results = chunks
        .par_iter()
        .map(|&start| {
            let end = (start + RENDER_CHUNK).min(n);
            let rays: Vec<Ray> = (start..end)
                .map(|i| {
                    generate_ray(
                        camera,
                        Camera::pixel_center(i % camera.width, i / camera.width),
                    )
                })
                .collect();
            let cfgs: Vec<MarchConfig> = (start..end)
                .map(|i| MarchConfig {
                    seed: crate::mix_seed(base.seed, i as u64),
                    ..*base
                })
                .collect();
            let batch = prepare_rays(&params.arch, &rays, &cfgs, hull, views)?;
            let env: Rc<[f64]> = Rc::from(env.as_slice());
            let mut tape = Tape::new(&params.values);
            let out = render_graph(&mut tape, params, &batch, &env);
            let m = tape.value(out);
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(NelfError::Numerical("non-finite field output".into()));
            }
            Ok((start, m.data.clone(), batch.stats))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rgb = RgbImage::new(camera.width, camera.height);
    let mut depth = ScalarImage::new(camera.width, camera.height);
    let mut alpha = ScalarImage::new(camera.width, camera.height);
    let mut stats = MarchStats::default();
    for (start, data, s) in results {
        stats.queries += s.queries;
        stats.pruned += s.pruned;
        for (j, px) in data.chunks_exact(5).enumerate() {
            let i = start + j;
            let a = px[4].clamp(0.0, 1.0);
            rgb.data[i * 3..i * 3 + 3].copy_from_slice(&px[..3]);
            alpha.data[i] = a;
            depth.data[i] = if a <= TRANSPARENT_ALPHA { 0.0 } else { px[3] };
        }
    }
    Ok(Rendering {
        rgb,
        depth,
        alpha,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nelf::params::BlendMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            hidden: 12,
            geometry_dim: 10,
            env_height: 2,
            env_width: 4,
            ..Default::default()
        }
    }

    fn random_feature(view: usize, rng: &mut ChaCha8Rng) -> PerViewFeature {
        let d = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.5..1.0),
        )
        .normalize();
        let rgb = [rng.gen(), rng.gen(), rng.gen()];
        PerViewFeature {
            view,
            rgb,
            pixel: rgb,
            mask: rng.gen(),
            direction: d,
            alignment: d.z,
        }
    }

    #[test]
    fn identical_views_give_identical_outputs() {
        let p = NelfParams::init(small_arch(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_feature(0, &mut rng);
        let feats: Vec<_> = (0..4).map(|k| PerViewFeature { view: k, ..f }).collect();
        let agg = aggregate_geometry(&Vec3::new(0.1, 0.0, -0.1), &Vec3::z(), &feats, &p);
        for k in 1..4 {
            assert_eq!(agg.geometry[k], agg.geometry[0]);
            assert_eq!(agg.weights[k], agg.weights[0]);
        }
        assert!(agg.weights.iter().all(|w| *w > 0.0 && *w < 1.0));
    }

    #[test]
    fn aggregation_is_permutation_equivariant() {
        let p = NelfParams::init(small_arch(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<_> = (0..3).map(|k| random_feature(k, &mut rng)).collect();
        let x = Vec3::new(0.05, -0.02, 0.1);
        let a = aggregate_geometry(&x, &Vec3::z(), &feats, &p);
        let perm = [2usize, 0, 1];
        let shuffled: Vec<_> = perm.iter().map(|&i| feats[i]).collect();
        let b = aggregate_geometry(&x, &Vec3::z(), &shuffled, &p);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(b.geometry[j], a.geometry[i]);
            assert_eq!(b.weights[j], a.weights[i]);
        }
    }

    #[test]
    fn single_view_is_flagged() {
        let p = NelfParams::init(small_arch(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agg = aggregate_geometry(
            &Vec3::zeros(),
            &Vec3::z(),
            &[random_feature(0, &mut rng)],
            &p,
        );
        assert!(agg.degenerate);
    }

    #[test]
    fn density_is_nonnegative_and_ignores_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let p = NelfParams::init(small_arch(), trial).unwrap();
            let g: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s = predict_density(&g, &w, &p);
            assert!(s >= 0.0 && s.is_finite());
            // Duplicating a view while halving both copies' weights leaves the
            // normalised weights, hence the density, unchanged.
            let mut g2 = g.clone();
            g2.push(g[0].clone());
            let mut w2 = w.clone();
            w2[0] /= 2.0;
            w2.push(w[0] / 2.0);
            let s2 = predict_density(&g2, &w2, &p);
            assert!((s - s2).abs() <= 1e-12 * s.max(1.0));
        }
    }

    #[test]
    fn modulation_is_linear_in_pixel_color() {
        let p = NelfParams::init(small_arch(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_feature(0, &mut rng);
        let g: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let black = PerViewFeature {
            pixel: [0.0; 3],
            ..f
        };
        let t0 = predict_transport_perview(&g, &black, &p, TransportMode::Modulated);
        assert!(t0.as_slice().iter().all(|v| *v == 0.0));
        let double = PerViewFeature {
            pixel: f.pixel.map(|c| 2.0 * c),
            ..f
        };
        let t1 = predict_transport_perview(&g, &f, &p, TransportMode::Modulated);
        let t2 = predict_transport_perview(&g, &double, &p, TransportMode::Modulated);
        for (a, b) in t1.as_slice().iter().zip(t2.as_slice()) {
            assert_eq!(2.0 * a, *b);
        }
        let direct = predict_transport_perview(&g, &f, &p, TransportMode::Direct);
        assert_ne!(direct, t1);
        assert!(direct.as_slice().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn blending_is_convex() {
        for blend in [BlendMode::Scalar, BlendMode::PerTexel] {
            let p = NelfParams::init(
                Architecture {
                    blend,
                    ..small_arch()
                },
                8,
            )
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let n = 3;
            let ts: Vec<TransportVector> = (0..n)
                .map(|_| {
                    TransportVector::new(2, 4, (0..24).map(|_| rng.gen::<f64>()).collect()).unwrap()
                })
                .collect();
            let dirs: Vec<Vec3> = (0..n)
                .map(|_| random_feature(0, &mut rng).direction)
                .collect();
            let g: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let out = blend_transport(&ts, &dirs, &Vec3::z(), &g, &p);
            for i in 0..24 {
                let lo = ts
                    .iter()
                    .map(|t| t.as_slice()[i])
                    .fold(f64::INFINITY, f64::min);
                let hi = ts
                    .iter()
                    .map(|t| t.as_slice()[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(out.as_slice()[i] >= lo - 1e-15 && out.as_slice()[i] <= hi + 1e-15);
            }
            let single = blend_transport(&ts[..1], &dirs[..1], &Vec3::z(), &g[..1], &p);
            assert_eq!(single, ts[0]);
            let same = vec![ts[1].clone(); n];
            let out = blend_transport(&same, &dirs, &Vec3::z(), &g, &p);
            for (a, b) in out.as_slice().iter().zip(ts[1].as_slice()) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
