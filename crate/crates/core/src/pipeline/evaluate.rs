//! Held-out evaluation, view-count sweeps and the transport-mode ablation.

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, SceneData, Target};
use super::metrics::{psnr, ssim};
use super::train::{source_hull, TrainConfig, Trainer};
use crate::error::{NelfError, Result};
use crate::nelf::{render_view, Architecture, NelfParams, Rendering, TransportMode};
use crate::volrender::{MarchConfig, DEFAULT_HULL_DILATION};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub hull: bool,
    pub hull_dilation: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            hull: true,
            hull_dilation: DEFAULT_HULL_DILATION,
        }
    }
}

/// Renders `target`'s camera under its light from the first `k` sources.
pub fn render_target(
    params: &NelfParams,
    data: &SceneData,
    target: &Target,
    k: usize,
    cfg: &EvalConfig,
) -> Result<Rendering> {
    if k == 0 || k > data.sources.len() {
        return Err(NelfError::Config(format!(
            "view count {k} outside 1..={}",
            data.sources.len()
        )));
    }
    let views = data.source_views(k);
    let hull = source_hull(&data.sources[..k], cfg.hull_dilation)?;
    let v = &target.view;
    let march = MarchConfig {
        n_samples: cfg.n_samples,
        stratified: false,
        near: v.near,
        far: v.far,
        hull_enabled: cfg.hull,
        seed: 0,
    };
    render_view(
        params,
        &views,
        cfg.hull.then_some(&hull),
        &target.env,
        &v.camera,
        &march,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub scene: usize,
    pub triplet: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCountResult {
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub images: Vec<ImageScore>,
}

/// Scores novel-light renders of every held-out target B in `scenes`.
pub fn score_scenes(
    params: &NelfParams,
    dataset: &Dataset,
    scenes: &[usize],
    k: usize,
    cfg: &EvalConfig,
) -> Result<ViewCountResult> {
    let mut images = Vec::new();
    for &s in scenes {
        let data = dataset
            .scenes
            .get(s)
            .ok_or_else(|| NelfError::Config(format!("scene {s} is not in the dataset")))?;
        for (i, t) in data.eval.iter().enumerate() {
            let r = render_target(params, data, &t.target_b, k, cfg)?;
            images.push(ImageScore {
                scene: s,
                triplet: i,
                psnr: psnr(&r.rgb, &t.target_b.view.rgb)?,
                ssim: ssim(&r.rgb, &t.target_b.view.rgb)?,
            });
        }
    }
    if images.is_empty() {
        return Err(NelfError::Config("no evaluation targets".into()));
    }
    let n = images.len() as f64;
    Ok(ViewCountResult {
        views: k,
        psnr: images.iter().map(|i| i.psnr).sum::<f64>() / n,
        ssim: images.iter().map(|i| i.ssim).sum::<f64>() / n,
        images,
    })
}

/// [`score_scenes`] for each view count.
pub fn evaluate(
    params: &NelfParams,
    dataset: &Dataset,
    scenes: &[usize],
    view_counts: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<ViewCountResult>> {
    view_counts
        .iter()
        .map(|&k| score_scenes(params, dataset, scenes, k, cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub mode: TransportMode,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean training loss over the last tenth of the run.
    pub final_loss: f64,
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: usize,
    /// Shared initialisation and sampling seed.
    pub seed: u64,
    pub scenes: Vec<usize>,
    pub views: usize,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "transport-mode ablation: {} steps, seed {}, scenes {:?}, {} views\n",
            self.steps, self.seed, self.scenes, self.views
        );
        s.push_str("mode        psnr_db   ssim    final_loss\n");
        for e in &self.entries {
            let mode = match e.mode {
                TransportMode::Modulated => "modulated",
                TransportMode::Direct => "direct",
            };
            s.push_str(&format!(
                "{mode:<10} {:>8.2} {:>7.4} {:>12.5}\n",
                e.psnr, e.ssim, e.final_loss
            ));
        }
        s
    }
}

/// Trains one field per transport mode with identical data, budget and seed,
/// then scores each on the held-out novel-light targets.
pub fn ablate(
    dataset: &Dataset,
    scenes: &[usize],
    arch: Architecture,
    train: &TrainConfig,
    eval: &EvalConfig,
    mut on_step: impl FnMut(TransportMode, &super::train::StepRecord),
) -> Result<AblationReport> {
    let mut entries = Vec::new();
    for mode in [TransportMode::Modulated, TransportMode::Direct] {
        let mut t = Trainer::new(
            dataset,
            scenes,
            Architecture { mode, ..arch },
            train.clone(),
        )?;
        t.run(|r| on_step(mode, r))?;
        let tail = (t.history.len() / 10).max(1);
        let final_loss = t
            .history
            .iter()
            .rev()
            .take(tail)
            .map(|r| r.loss.total)
            .sum::<f64>()
            / tail as f64;
        let score = score_scenes(&t.params, dataset, scenes, train.n_views, eval)?;
        entries.push(AblationEntry {
            mode,
            psnr: score.psnr,
            ssim: score.ssim,
            final_loss,
            params_hash: t.params.content_hash(),
        });
    }
    Ok(AblationReport {
        steps: train.steps,
        seed: train.seed,
        scenes: scenes.to_vec(),
        views: train.n_views,
        entries,
    })
}
