//! Subcommand bodies. Each one writes its artifacts and a manifest into
//! the output directory.

use std::path::{Path, PathBuf};

use nelf::envmap::EnvironmentMap;
use nelf::nelf::{render_view, NelfParams, Rendering};
use nelf::pipeline::dataset::{generate_dataset, Dataset, SceneData};
use nelf::pipeline::evaluate::{self as eval, AblationReport, ViewCountResult};
use nelf::pipeline::losses::light_loss;
use nelf::pipeline::train::{source_hull, SceneContext, StepRecord, Trainer};
use nelf::scene::{AnalyticScene, Camera, CameraJson};
use nelf::transport::{bake_transport_image, estimate_scene_light, reference_render};
use nelf::MarchConfig;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::CliError;

pub const CHECKPOINT_NAME: &str = "checkpoint.nelfp";
/// Steps between progress lines on stderr.
const LOG_EVERY: usize = 500;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = RunConfig::require(&cfg.out, "out")?.clone();
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_value<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("report types serialize")
}

/// Reads an environment map from `.json`, anything else as PFM.
pub fn load_env(path: &Path) -> Result<EnvironmentMap, CliError> {
    let env = if path.extension().is_some_and(|e| e == "json") {
        EnvironmentMap::load_json(path)?
    } else {
        EnvironmentMap::load_pfm(path)?
    };
    Ok(env)
}

pub fn load_camera(path: &Path) -> Result<Camera, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let json: CameraJson = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Camera::try_from(json)?)
}

fn load_dataset(cfg: &RunConfig, manifest: &mut Manifest) -> Result<Dataset, CliError> {
    let dir = RunConfig::require(&cfg.data, "data")?;
    manifest.input("data", dir)?;
    Ok(Dataset::load(dir)?)
}

/// `scenes` from the config, or every scene in the dataset.
fn scene_list(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<usize>, CliError> {
    let scenes = cfg
        .scenes
        .clone()
        .unwrap_or_else(|| (0..dataset.scenes.len()).collect());
    if let Some(s) = scenes.iter().find(|&&s| s >= dataset.scenes.len()) {
        return Err(CliError::Config(format!(
            "scene {s} is not in the dataset ({} scenes)",
            dataset.scenes.len()
        )));
    }
    if scenes.is_empty() {
        return Err(CliError::Config("empty scene list".into()));
    }
    Ok(scenes)
}

fn single_scene<'a>(cfg: &RunConfig, dataset: &'a Dataset) -> Result<&'a SceneData, CliError> {
    match scene_list(cfg, dataset)?.as_slice() {
        [s] => Ok(&dataset.scenes[*s]),
        [s, ..] if cfg.scenes.is_none() => Ok(&dataset.scenes[*s]),
        _ => Err(CliError::Config(
            "this command takes exactly one scene".into(),
        )),
    }
}

fn load_checkpoint(cfg: &RunConfig, manifest: &mut Manifest) -> Result<NelfParams, CliError> {
    let path = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    manifest.input("checkpoint", path)?;
    Ok(NelfParams::load(path)?.0)
}

fn n_views(cfg: &RunConfig, data: &SceneData) -> Result<usize, CliError> {
    let k = cfg.views.unwrap_or(data.sources.len());
    if k == 0 || k > data.sources.len() {
        return Err(CliError::Config(format!(
            "views must be in 1..={}",
            data.sources.len()
        )));
    }
    Ok(k)
}

fn save_rendering(out: &Path, name: &str, r: &Rendering) -> Result<(), CliError> {
    r.rgb.save_png(&out.join(format!("{name}.png")))?;
    r.rgb.save_pfm(&out.join(format!("{name}.pfm")))?;
    r.alpha.save_pfm(&out.join(format!("{name}_alpha.pfm")))?;
    r.depth.save_pfm(&out.join(format!("{name}_depth.pfm")))?;
    Ok(())
}

fn progress(r: &StepRecord) {
    if (r.step as usize + 1).is_multiple_of(LOG_EVERY) {
        eprintln!(
            "step {:>6}  total {:.5}  color {:.5}  alpha {:.5}  depth {:.5}",
            r.step + 1,
            r.loss.total,
            r.loss.color,
            r.loss.alpha,
            r.loss.depth
        );
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let dcfg = cfg.dataset_config();
    let seed = cfg.seed_or_default();
    let dataset = generate_dataset(&dcfg, seed)?;
    dataset.save(&out)?;
    let mut m = Manifest::new("gen-data", cfg);
    m.seeds.insert("dataset".into(), seed);
    m.summary = serde_json::json!({ "scenes": dataset.scenes.len(), "config": dcfg });
    m.write(&out)
}

pub fn bake(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("bake", cfg);
    let scene_path = RunConfig::require(&cfg.scene, "scene")?;
    let cam_path = RunConfig::require(&cfg.camera, "camera")?;
    m.input("scene", scene_path)?;
    m.input("camera", cam_path)?;
    let scene = AnalyticScene::load_json(scene_path)?;
    let camera = load_camera(cam_path)?;
    let seed = cfg.seed_or_default();
    let opts = cfg.dataset_config().bake_options(seed);
    let t = bake_transport_image(&scene, &camera, &opts);
    t.save(&out.join("transport.nelft"))?;
    m.seeds.insert("bake".into(), seed);
    m.summary = serde_json::json!({ "covered_pixels": t.present_count(), "options": opts });
    m.write(&out)
}

pub fn render_ref(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("render-ref", cfg);
    let scene_path = RunConfig::require(&cfg.scene, "scene")?;
    let cam_path = RunConfig::require(&cfg.camera, "camera")?;
    let env_path = RunConfig::require(&cfg.env, "env")?;
    m.input("scene", scene_path)?;
    m.input("camera", cam_path)?;
    m.input("env", env_path)?;
    let scene = AnalyticScene::load_json(scene_path)?;
    let camera = load_camera(cam_path)?;
    let env = load_env(env_path)?;
    let seed = cfg.seed_or_default();
    let mut opts = cfg.dataset_config().bake_options(seed);
    (opts.height, opts.width) = env.dims();
    let img = reference_render(&scene, &camera, &env, &opts);
    img.save_png(&out.join("reference.png"))?;
    img.save_pfm(&out.join("reference.pfm"))?;
    m.seeds.insert("bake".into(), seed);
    m.write(&out)
}

#[derive(Serialize)]
struct LightReport {
    scene: usize,
    light_loss: f64,
    residuals: Vec<f64>,
    degenerate_texels: usize,
}

pub fn estimate_light(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("estimate-light", cfg);
    let dataset = load_dataset(cfg, &mut m)?;
    let mut reports = Vec::new();
    for s in scene_list(cfg, &dataset)? {
        let data = &dataset.scenes[s];
        let opts = dataset.config.bake_options(data.seed);
        let posed: Vec<_> = data.sources.iter().map(|v| (&v.rgb, &v.camera)).collect();
        let est = estimate_scene_light(&data.scene, &posed, &opts)?;
        let mut env = est.global;
        env.round_to_f32();
        env.save_pfm(&out.join(format!("scene_{s:04}_light.pfm")))?;
        env.save_json(&out.join(format!("scene_{s:04}_light.json")))?;
        reports.push(LightReport {
            scene: s,
            light_loss: light_loss(&env, &data.source_env),
            residuals: est.per_view.iter().map(|v| v.residual).collect(),
            degenerate_texels: est.coverage.degenerate.len(),
        });
    }
    write_json(&out.join("light_report.json"), &reports)?;
    m.summary = to_value(&reports);
    m.write(&out)
}

#[derive(Serialize)]
struct FitSummary {
    steps: u64,
    scenes: Vec<usize>,
    final_loss: Option<nelf::pipeline::losses::LossBreakdown>,
    light_loss: Vec<f64>,
    params_hash: String,
}

pub fn fit(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("fit", cfg);
    let dataset = load_dataset(cfg, &mut m)?;
    let scenes = scene_list(cfg, &dataset)?;
    let tcfg = cfg.train_config();
    let mut trainer = match &cfg.resume {
        Some(path) => {
            m.input("resume", path)?;
            Trainer::resume(&dataset, &scenes, path, tcfg.clone())?
        }
        None => {
            let mut arch = cfg.arch();
            (arch.env_height, arch.env_width) =
                (dataset.config.env_height, dataset.config.env_width);
            Trainer::new(&dataset, &scenes, arch, tcfg.clone())?
        }
    };
    let result = trainer.run(progress);
    // Parameters are at their last good values even after a failure.
    trainer.save_checkpoint(&out.join(CHECKPOINT_NAME))?;
    write_json(&out.join("losses.json"), &trainer.history)?;
    result?;
    m.seeds.insert("train".into(), tcfg.seed);
    let summary = FitSummary {
        steps: trainer.step_index(),
        scenes,
        final_loss: trainer.history.last().map(|r| r.loss),
        light_loss: trainer.contexts.iter().map(|c| c.light_loss).collect(),
        params_hash: trainer.params.content_hash(),
    };
    m.summary = to_value(&summary);
    m.write(&out)
}

pub fn relight(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("relight", cfg);
    let dataset = load_dataset(cfg, &mut m)?;
    let params = load_checkpoint(cfg, &mut m)?;
    let data = single_scene(cfg, &dataset)?;
    let env = match &cfg.env {
        Some(p) => {
            m.input("env", p)?;
            load_env(p)?
        }
        None => data.source_env.clone(),
    };
    let k = n_views(cfg, data)?;
    let ecfg = cfg.eval_config();
    let views = data.source_views(k);
    let hull = source_hull(&data.sources[..k], ecfg.hull_dilation)?;
    for (i, v) in data.sources[..k].iter().enumerate() {
        let march = MarchConfig {
            n_samples: ecfg.n_samples,
            stratified: false,
            near: v.near,
            far: v.far,
            hull_enabled: ecfg.hull,
            seed: 0,
        };
        let r = render_view(
            &params,
            &views,
            ecfg.hull.then_some(&hull),
            &env,
            &v.camera,
            &march,
        )?;
        save_rendering(&out, &format!("relit_{i}"), &r)?;
    }
    m.summary = serde_json::json!({ "scene": data.index, "views": k });
    m.write(&out)
}

pub fn view_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("view-synth", cfg);
    let dataset = load_dataset(cfg, &mut m)?;
    let params = load_checkpoint(cfg, &mut m)?;
    let data = single_scene(cfg, &dataset)?;
    let cam_path = RunConfig::require(&cfg.camera, "camera")?;
    m.input("camera", cam_path)?;
    let camera = load_camera(cam_path)?;
    let env = match &cfg.env {
        Some(p) => {
            m.input("env", p)?;
            load_env(p)?
        }
        None => {
            // The recovered source light, as in training.
            let ctx = SceneContext::new(data, &dataset, data.sources.len(), 1)?;
            ctx.estimated_light
        }
    };
    let k = n_views(cfg, data)?;
    let ecfg = cfg.eval_config();
    let views = data.source_views(k);
    let hull = source_hull(&data.sources[..k], ecfg.hull_dilation)?;
    // Bounds that enclose the scene's bounding sphere around the origin.
    let d = camera.position().norm();
    let margin = data.scene.bounding_radius() + 0.05;
    if d <= margin {
        return Err(CliError::Config("camera is inside the scene bounds".into()));
    }
    let march = MarchConfig {
        n_samples: ecfg.n_samples,
        stratified: false,
        near: d - margin,
        far: d + margin,
        hull_enabled: ecfg.hull,
        seed: 0,
    };
    let r = render_view(
        &params,
        &views,
        ecfg.hull.then_some(&hull),
        &env,
        &camera,
        &march,
    )?;
    save_rendering(&out, "synth", &r)?;
    m.summary = serde_json::json!({ "scene": data.index, "views": k });
    m.write(&out)
}

fn eval_text(results: &[ViewCountResult]) -> String {
    let mut s = String::from("views   psnr_db   ssim\n");
    for r in results {
        s.push_str(&format!("{:>5} {:>9.2} {:>7.4}\n", r.views, r.psnr, r.ssim));
    }
    s
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("evaluate", cfg);
    let dataset = load_dataset(cfg, &mut m)?;
    let params = load_checkpoint(cfg, &mut m)?;
    let scenes = scene_list(cfg, &dataset)?;
    let counts = match (&cfg.view_counts, cfg.views) {
        (Some(c), _) => c.clone(),
        (None, Some(v)) => vec![v],
        (None, None) => vec![5, 4, 3, 2],
    };
    let results = eval::evaluate(&params, &dataset, &scenes, &counts, &cfg.eval_config())?;
    write_json(&out.join("report.json"), &results)?;
    std::fs::write(out.join("report.txt"), eval_text(&results)).map_err(|e| io_err(&out, e))?;
    m.summary = to_value(
        &results
            .iter()
            .map(|r| (r.views, r.psnr, r.ssim))
            .collect::<Vec<_>>(),
    );
    m.write(&out)
}

pub fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    let mut m = Manifest::new("ablate", cfg);
    let dataset = load_dataset(cfg, &mut m)?;
    let scenes = scene_list(cfg, &dataset)?;
    let tcfg = cfg.train_config();
    let mut arch = cfg.arch();
    (arch.env_height, arch.env_width) = (dataset.config.env_height, dataset.config.env_width);
    let report: AblationReport = eval::ablate(
        &dataset,
        &scenes,
        arch,
        &tcfg,
        &cfg.eval_config(),
        |_, r| progress(r),
    )?;
    write_json(&out.join("ablation.json"), &report)?;
    std::fs::write(out.join("ablation.txt"), report.to_text()).map_err(|e| io_err(&out, e))?;
    m.seeds.insert("train".into(), tcfg.seed);
    m.summary = to_value(&report.entries);
    m.write(&out)
}
