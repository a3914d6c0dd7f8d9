//! Run configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use nelf::nelf::{Architecture, TransportMode};
use nelf::pipeline::dataset::DatasetConfig;
use nelf::pipeline::evaluate::EvalConfig;
use nelf::pipeline::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every key a run may set. Unknown keys are rejected; the resolved value is
/// echoed into the run manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<TransportMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hull: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounces: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Dataset directory written by `gen-data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Scene JSON for `bake` and `render-ref`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    /// Camera JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<PathBuf>,
    /// Environment map, PFM or JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<PathBuf>,
    /// Training steps; replaces `train.steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Scene count for `gen-data`; replaces `dataset.n_scenes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_scenes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Keys set in `flags` replace those in `self`.
    pub fn overridden_by(self, flags: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: flags.$f.or(self.$f)),* } };
        }
        pick!(
            seed,
            out,
            views,
            mode,
            hull,
            bounces,
            threads,
            data,
            scenes,
            checkpoint,
            resume,
            scene,
            camera,
            env,
            steps,
            n_scenes,
            view_counts,
            dataset,
            train,
            arch,
            eval
        )
    }

    pub fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Dataset settings with `seed`/`bounces` flags applied.
    pub fn dataset_config(&self) -> DatasetConfig {
        let mut c = self.dataset.clone().unwrap_or_default();
        if let Some(b) = self.bounces {
            c.bounces = b;
        }
        if let Some(n) = self.n_scenes {
            c.n_scenes = n;
        }
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = self.train.clone().unwrap_or_default();
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(v) = self.views {
            c.n_views = v;
        }
        if let Some(h) = self.hull {
            c.hull = h;
        }
        if let Some(n) = self.steps {
            c.steps = n;
        }
        c
    }

    pub fn arch(&self) -> Architecture {
        let mut a = self.arch.clone().unwrap_or_default();
        if let Some(m) = self.mode {
            a.mode = m;
        }
        a
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut c = self.eval.unwrap_or_default();
        if let Some(h) = self.hull {
            c.hull = h;
        }
        c
    }
}
