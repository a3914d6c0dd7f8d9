//! Training loop: ray sampling, chunked gradients, Adam and checkpoints.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, SceneData, ViewData};
use super::losses::{light_loss, ray_losses, LossBreakdown, LossNorm, RayTargets};
use crate::envmap::{rotate, EnvironmentMap};
use crate::error::{NelfError, Result};
use crate::mix_seed;
use crate::nelf::{
    adam_step, prepare_rays, render_graph, AdamConfig, AdamState, Architecture, NelfParams,
    SourceView, Tape,
};
use crate::scene::{generate_ray, Camera, Ray};
use crate::transport::estimate_scene_light;
use crate::volrender::{Hull, MarchConfig, DEFAULT_HULL_DILATION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub rays_per_step: usize,
    /// Rays per tape; chunk gradients are summed in chunk order.
    pub chunk_rays: usize,
    pub n_samples: usize,
    pub stratified: bool,
    /// Probability of supervising with target B under its true light.
    pub novel_light_fraction: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Prune samples outside the source visual hull.
    pub hull: bool,
    pub hull_dilation: usize,
    /// Source views fed to the field.
    pub n_views: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            rays_per_step: 16,
            chunk_rays: 8,
            n_samples: 48,
            stratified: true,
            novel_light_fraction: 0.7,
            adam: AdamConfig::default(),
            seed: 0,
            hull: true,
            hull_dilation: DEFAULT_HULL_DILATION,
            n_views: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NelfError::Config(m.into()));
        if self.rays_per_step == 0 || self.chunk_rays == 0 {
            return bad("rays_per_step and chunk_rays must be positive");
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.novel_light_fraction) {
            return bad("novel_light_fraction must lie in [0, 1]");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.n_views == 0 {
            return bad("n_views must be positive");
        }
        Ok(())
    }
}

/// Which target supervises a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Target B under its ground-truth light.
    NovelLight,
    /// Target A under the estimated source light, rotated.
    SelfRotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub scene: usize,
    pub triplet: usize,
    pub mode: StepMode,
    pub loss: LossBreakdown,
}

/// Fixed per-scene inputs shared by every step.
pub struct SceneContext {
    pub scene: usize,
    pub views: Vec<SourceView>,
    pub hull: Hull,
    /// Source light recovered from the source views.
    pub estimated_light: EnvironmentMap,
    /// `L_t` between the estimated and true source light.
    pub light_loss: f64,
}

impl SceneContext {
    pub fn new(
        data: &SceneData,
        dataset: &Dataset,
        n_views: usize,
        dilation: usize,
    ) -> Result<Self> {
        let k = n_views.min(data.sources.len());
        let views = data.source_views(k);
        let hull = source_hull(&data.sources[..k], dilation)?;
        let opts = dataset.config.bake_options(data.seed);
        let posed: Vec<_> = data.sources.iter().map(|v| (&v.rgb, &v.camera)).collect();
        let mut estimated_light = estimate_scene_light(&data.scene, &posed, &opts)?.global;
        estimated_light.round_to_f32();
        let light_loss = light_loss(&estimated_light, &data.source_env);
        Ok(Self {
            scene: data.index,
            views,
            hull,
            estimated_light,
            light_loss,
        })
    }
}

/// Visual hull of the given views' silhouettes.
pub fn source_hull(views: &[ViewData], dilation: usize) -> Result<Hull> {
    let masks: Vec<_> = views.iter().map(|v| v.mask()).collect();
    let cams: Vec<_> = views.iter().map(|v| v.camera.clone()).collect();
    Hull::new(&masks, &cams, dilation)
}

/// Pixels of `view` whose center ray has a sample inside the hull; every
/// pixel without a hull.
pub fn hull_candidates(view: &ViewData, hull: Option<&Hull>, n_samples: usize) -> Vec<usize> {
    let cfg = MarchConfig {
        n_samples,
        near: view.near,
        far: view.far,
        ..Default::default()
    };
    let (u, _) = cfg.sample_depths();
    (0..view.camera.pixel_count())
        .filter(|&i| {
            let ray = pixel_ray(&view.camera, i);
            hull.is_none_or(|h| u.iter().any(|t| h.contains(&ray.at(*t))))
        })
        .collect()
}

fn pixel_ray(cam: &Camera, i: usize) -> Ray {
    generate_ray(cam, Camera::pixel_center(i % cam.width, i / cam.width))
}

/// Gradient and loss of one batch of rays under `env`.
pub fn batch_gradient(
    params: &NelfParams,
    views: &[SourceView],
    hull: Option<&Hull>,
    env: &EnvironmentMap,
    rays: &[Ray],
    cfgs: &[MarchConfig],
    targets: &RayTargets,
    chunk_rays: usize,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let norm = LossNorm::of(targets);
    let starts: Vec<usize> = (0..rays.len()).step_by(chunk_rays.max(1)).collect();
    let parts = starts
        .par_iter()
        .map(|&a| {
            let b = (a + chunk_rays).min(rays.len());
            let batch = prepare_rays(&params.arch, &rays[a..b], &cfgs[a..b], hull, views)?;
            let env: Rc<[f64]> = Rc::from(env.as_slice());
            let mut tape = Tape::new(&params.values);
            let out = render_graph(&mut tape, params, &batch, &env);
            let nodes = ray_losses(&mut tape, out, &targets.range(a, b), norm);
            let mut grads = vec![0.0; params.len()];
            tape.backward(nodes.total, &mut grads);
            let mut loss = LossBreakdown::default();
            loss.accumulate(&tape, &nodes);
            Ok((grads, loss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = vec![0.0; params.len()];
    let mut loss = LossBreakdown::default();
    for (g, l) in parts {
        grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        loss.color += l.color;
        loss.alpha += l.alpha;
        loss.depth += l.depth;
        loss.total += l.total;
    }
    Ok((grads, loss))
}

pub struct Trainer<'d> {
    pub dataset: &'d Dataset,
    pub config: TrainConfig,
    pub params: NelfParams,
    pub adam: AdamState,
    pub contexts: Vec<SceneContext>,
    pub history: Vec<StepRecord>,
    candidates: HashMap<(usize, usize, StepMode), Vec<usize>>,
}

impl<'d> Trainer<'d> {
    /// Fresh parameters seeded from `config.seed`, training on `scenes`.
    pub fn new(
        dataset: &'d Dataset,
        scenes: &[usize],
        arch: Architecture,
        config: TrainConfig,
    ) -> Result<Self> {
        let params = NelfParams::init(arch, config.seed)?;
        Self::with_params(dataset, scenes, params, None, config)
    }

    pub fn with_params(
        dataset: &'d Dataset,
        scenes: &[usize],
        params: NelfParams,
        adam: Option<AdamState>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        params.arch.validate()?;
        if (params.arch.env_height, params.arch.env_width)
            != (dataset.config.env_height, dataset.config.env_width)
        {
            return Err(NelfError::Config(
                "architecture and dataset lighting grids differ".into(),
            ));
        }
        if scenes.is_empty() {
            return Err(NelfError::Config("no training scenes".into()));
        }
        let contexts = scenes
            .iter()
            .map(|&s| {
                let data = dataset
                    .scenes
                    .get(s)
                    .ok_or_else(|| NelfError::Config(format!("scene {s} is not in the dataset")))?;
                if data.train.is_empty() {
                    return Err(NelfError::Config(format!(
                        "scene {s} has no training triplets"
                    )));
                }
                SceneContext::new(data, dataset, config.n_views, config.hull_dilation)
            })
            .collect::<Result<Vec<_>>>()?;
        let adam = adam.unwrap_or_else(|| AdamState::new(params.len()));
        if adam.m.len() != params.len() {
            return Err(NelfError::Format(
                "optimizer state does not match the parameters".into(),
            ));
        }
        Ok(Self {
            dataset,
            config,
            params,
            adam,
            contexts,
            history: Vec::new(),
            candidates: HashMap::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn resume(
        dataset: &'d Dataset,
        scenes: &[usize],
        path: &Path,
        config: TrainConfig,
    ) -> Result<Self> {
        let (params, adam) = NelfParams::load(path)?;
        Self::with_params(dataset, scenes, params, adam, config)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.params.save(path, Some(&self.adam))
    }

    pub fn step_index(&self) -> u64 {
        self.adam.step
    }

    /// Scene context, triplet and mode for `step`, and the generator that
    /// then samples its rays.
    pub fn draw(&self, step: u64) -> (usize, usize, StepMode, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, step));
        let ci = rng.gen_range(0..self.contexts.len());
        let ti = rng.gen_range(0..self.dataset.scenes[self.contexts[ci].scene].train.len());
        let mode = if rng.gen::<f64>() < self.config.novel_light_fraction {
            StepMode::NovelLight
        } else {
            StepMode::SelfRotation
        };
        (ci, ti, mode, rng)
    }

    /// One optimisation step. On a non-finite loss or gradient the
    /// parameters stay at their last good values and an error is returned.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.adam.step;
        let seed = mix_seed(self.config.seed, step);
        let (ci, ti, mode, mut rng) = self.draw(step);
        let ctx = &self.contexts[ci];
        let data = &self.dataset.scenes[ctx.scene];
        let triplet = &data.train[ti];
        let (view, env) = match mode {
            StepMode::NovelLight => (&triplet.target_b.view, triplet.target_b.env.clone()),
            StepMode::SelfRotation => {
                let mut e = rotate(&ctx.estimated_light, &triplet.rotation());
                e.round_to_f32();
                (&triplet.target_a.view, e)
            }
        };
        let n_samples = self.config.n_samples;
        let hull = self.config.hull.then_some(&ctx.hull);
        let cand = self
            .candidates
            .entry((ctx.scene, ti, mode))
            .or_insert_with(|| hull_candidates(view, hull, n_samples));
        if cand.is_empty() {
            return Err(NelfError::Numerical(format!(
                "target of scene {} triplet {ti} misses the hull",
                ctx.scene
            )));
        }
        let mut rays = Vec::with_capacity(self.config.rays_per_step);
        let mut cfgs = Vec::with_capacity(self.config.rays_per_step);
        let mut targets = RayTargets::default();
        for r in 0..self.config.rays_per_step {
            let p = cand[rng.gen_range(0..cand.len())];
            rays.push(pixel_ray(&view.camera, p));
            cfgs.push(MarchConfig {
                n_samples,
                stratified: self.config.stratified,
                near: view.near,
                far: view.far,
                hull_enabled: self.config.hull,
                seed: mix_seed(seed, r as u64),
            });
            targets.push(
                [
                    view.rgb.data[p * 3],
                    view.rgb.data[p * 3 + 1],
                    view.rgb.data[p * 3 + 2],
                ],
                view.alpha.data[p],
                view.depth.data[p],
            );
        }
        let (grads, loss) = batch_gradient(
            &self.params,
            &ctx.views,
            hull,
            &env,
            &rays,
            &cfgs,
            &targets,
            self.config.chunk_rays,
        )?;
        let loss = loss.with_light(ctx.light_loss);
        if !loss.is_finite() {
            return Err(NelfError::Numerical(format!(
                "non-finite loss at step {step}"
            )));
        }
        let last_good = (self.params.values.clone(), self.adam.clone());
        if !adam_step(
            &mut self.params.values,
            &grads,
            &mut self.adam,
            &self.config.adam,
        ) {
            return Err(NelfError::Numerical(format!(
                "non-finite gradient at step {step}"
            )));
        }
        self.params.round_to_f32();
        self.adam.round_to_f32();
        if !self.params.is_finite() || self.adam.v.iter().any(|v| !v.is_finite()) {
            (self.params.values, self.adam) = last_good;
            return Err(NelfError::Numerical(format!(
                "parameters overflowed at step {step}"
            )));
        }
        let record = StepRecord {
            step,
            scene: ctx.scene,
            triplet: ti,
            mode,
            loss,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Runs until `config.steps` updates have been applied.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        while (self.adam.step as usize) < self.config.steps {
            let r = self.step()?;
            on_step(&r);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::{generate_dataset, DatasetConfig};

    fn tiny_data() -> Dataset {
        generate_dataset(
            &DatasetConfig {
                image_size: 16,
                train_triplets: 2,
                eval_triplets: 1,
                env_height: 2,
                env_width: 4,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            hidden: 8,
            geometry_dim: 6,
            env_height: 2,
            env_width: 4,
            ..Default::default()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 4,
            rays_per_step: 6,
            chunk_rays: 4,
            n_samples: 8,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn divergence_keeps_the_last_good_parameters() {
        let d = tiny_data();
        let cfg = TrainConfig {
            steps: 50,
            adam: AdamConfig {
                lr: 1e300,
                ..Default::default()
            },
            ..tiny_cfg()
        };
        let mut t = Trainer::new(&d, &[0], tiny_arch(), cfg).unwrap();
        let mut before = t.params.values.clone();
        let err = loop {
            match t.step() {
                Ok(_) => before = t.params.values.clone(),
                Err(e) => break e,
            }
        };
        assert!(matches!(err, NelfError::Numerical(_)));
        assert!(t.params.is_finite());
        assert_eq!(t.params.values, before);
    }

    #[test]
    fn candidates_cover_every_foreground_pixel() {
        let d = tiny_data();
        let s = &d.scenes[0];
        let hull = source_hull(&s.sources, 1).unwrap();
        let view = &s.train[0].target_b.view;
        let cand = hull_candidates(view, Some(&hull), 32);
        for (i, a) in view.alpha.data.iter().enumerate() {
            if *a > 0.5 {
                assert!(cand.contains(&i), "foreground pixel {i} is not a candidate");
            }
        }
        assert!(cand.len() < view.camera.pixel_count());
    }

    #[test]
    fn training_is_deterministic_and_rounds_to_f32() {
        let d = tiny_data();
        let run = || {
            let mut t = Trainer::new(&d, &[0], tiny_arch(), tiny_cfg()).unwrap();
            t.run(|_| {}).unwrap();
            (
                t.params.content_hash(),
                t.history.clone(),
                t.params.values.clone(),
            )
        };
        let (h1, hist1, values) = run();
        let (h2, hist2, _) = run();
        assert_eq!(h1, h2);
        assert_eq!(hist1, hist2);
        assert_eq!(hist1.len(), 4);
        assert!(values.iter().all(|v| *v == crate::round_f32(*v)));
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let d = tiny_data();
        let mut full = Trainer::new(&d, &[0], tiny_arch(), tiny_cfg()).unwrap();
        full.run(|_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        let mut half = Trainer::new(
            &d,
            &[0],
            tiny_arch(),
            TrainConfig {
                steps: 2,
                ..tiny_cfg()
            },
        )
        .unwrap();
        half.run(|_| {}).unwrap();
        half.save_checkpoint(&path).unwrap();
        let mut rest = Trainer::resume(&d, &[0], &path, tiny_cfg()).unwrap();
        assert_eq!(rest.step_index(), 2);
        rest.run(|_| {}).unwrap();
        assert_eq!(rest.params.content_hash(), full.params.content_hash());
    }

    #[test]
    fn chunking_does_not_change_the_gradient() {
        let d = tiny_data();
        let t = Trainer::new(&d, &[0], tiny_arch(), tiny_cfg()).unwrap();
        let ctx = &t.contexts[0];
        let view = &d.scenes[0].train[0].target_b.view;
        let env = &d.scenes[0].train[0].target_b.env;
        let cand = hull_candidates(view, Some(&ctx.hull), 8);
        let mut rays = Vec::new();
        let mut cfgs = Vec::new();
        let mut targets = RayTargets::default();
        for &p in cand.iter().step_by(cand.len() / 5 + 1) {
            rays.push(pixel_ray(&view.camera, p));
            cfgs.push(MarchConfig {
                n_samples: 8,
                near: view.near,
                far: view.far,
                hull_enabled: true,
                ..Default::default()
            });
            targets.push([0.3, 0.2, 0.1], view.alpha.data[p], view.depth.data[p]);
        }
        let (g1, l1) = batch_gradient(
            &t.params,
            &ctx.views,
            Some(&ctx.hull),
            env,
            &rays,
            &cfgs,
            &targets,
            100,
        )
        .unwrap();
        let (g2, l2) = batch_gradient(
            &t.params,
            &ctx.views,
            Some(&ctx.hull),
            env,
            &rays,
            &cfgs,
            &targets,
            2,
        )
        .unwrap();
        assert!((l1.total - l2.total).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let d = tiny_data();
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..tiny_cfg()
        };
        let mut t = Trainer::new(&d, &[0], tiny_arch(), cfg).unwrap();
        let ctx = &t.contexts[0];
        let view = d.scenes[0].train[0].target_b.view.clone();
        let env = d.scenes[0].train[0].target_b.env.clone();
        let cand = hull_candidates(&view, Some(&ctx.hull), 8);
        let (views, hull) = (
            ctx.views.clone(),
            source_hull(&d.scenes[0].sources, 1).unwrap(),
        );
        let mut rays = Vec::new();
        let mut cfgs = Vec::new();
        let mut targets = RayTargets::default();
        for &p in &cand {
            rays.push(pixel_ray(&view.camera, p));
            cfgs.push(MarchConfig {
                n_samples: 8,
                near: view.near,
                far: view.far,
                hull_enabled: true,
                ..Default::default()
            });
            targets.push(
                [
                    view.rgb.data[p * 3],
                    view.rgb.data[p * 3 + 1],
                    view.rgb.data[p * 3 + 2],
                ],
                view.alpha.data[p],
                view.depth.data[p],
            );
        }
        let mut losses = Vec::new();
        for _ in 0..30 {
            let (g, l) = batch_gradient(
                &t.params,
                &views,
                Some(&hull),
                &env,
                &rays,
                &cfgs,
                &targets,
                64,
            )
            .unwrap();
            losses.push(l.total);
            assert!(adam_step(
                &mut t.params.values,
                &g,
                &mut t.adam,
                &t.config.adam
            ));
        }
        assert!(losses[29] < 0.7 * losses[0], "{losses:?}");
    }

    #[test]
    fn novel_light_share_matches_the_split() {
        let d = tiny_data();
        let t = Trainer::new(&d, &[0], tiny_arch(), tiny_cfg()).unwrap();
        let novel = (0..10_000u64)
            .filter(|s| t.draw(*s).2 == StepMode::NovelLight)
            .count();
        assert!((novel as f64 / 1e4 - 0.7).abs() <= 0.02, "{novel}");
    }

    #[test]
    fn checkpoint_resume_gives_the_same_next_loss() {
        let d = tiny_data();
        let mut a = Trainer::new(&d, &[0], tiny_arch(), tiny_cfg()).unwrap();
        a.step().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        a.save_checkpoint(&path).unwrap();
        let next = a.step().unwrap();
        let mut b = Trainer::resume(&d, &[0], &path, tiny_cfg()).unwrap();
        assert_eq!(b.step().unwrap(), next);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let d = tiny_data();
        let bad = TrainConfig {
            novel_light_fraction: 1.5,
            ..tiny_cfg()
        };
        assert!(matches!(
            Trainer::new(&d, &[0], tiny_arch(), bad),
            Err(NelfError::Config(_))
        ));
        assert!(matches!(
            Trainer::new(&d, &[7], tiny_arch(), tiny_cfg()),
            Err(NelfError::Config(_))
        ));
        let wrong_grid = Architecture {
            env_height: 8,
            env_width: 16,
            ..tiny_arch()
        };
        assert!(matches!(
            Trainer::new(&d, &[0], wrong_grid, tiny_cfg()),
            Err(NelfError::Config(_))
        ));
    }
}
