//! The `nelf` command-line driver.
//!
//! Every subcommand reads an optional JSON [`RunConfig`], applies flag
//! overrides, writes its artifacts into `--out` and finishes with a
//! `manifest.json` describing the run. Exit codes: 0 success, 2
//! configuration error, 3 numerical failure, 4 I/O error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nelf::nelf::TransportMode;
use nelf::NelfError;

pub mod commands;
pub mod config;
pub mod manifest;
pub mod selftest;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<NelfError> for CliError {
    fn from(e: NelfError) -> Self {
        match e {
            NelfError::Config(_) | NelfError::Contract(_) => CliError::Config(e.to_string()),
            NelfError::Numerical(_) => CliError::Numerical(e.to_string()),
            NelfError::Format(_) | NelfError::Io(_) | NelfError::Json(_) | NelfError::Image(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nelf",
    version,
    about = "Fit, relight and evaluate light-transport fields"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of source views.
    #[arg(long, global = true)]
    pub views: Option<usize>,
    #[arg(long, global = true)]
    pub mode: Option<TransportMode>,
    #[arg(long, global = true, value_parser = parse_on_off)]
    pub hull: Option<bool>,
    #[arg(long, global = true)]
    pub bounces: Option<u8>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scene indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scenes: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural multi-view dataset.
    GenData {
        #[arg(long)]
        n_scenes: Option<usize>,
    },
    /// Bake the transport image of a scene seen from a camera.
    Bake {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
    },
    /// Render a reference image of a scene under an environment map.
    RenderRef {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Recover a scene's source light from its source views.
    EstimateLight {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fit a field to dataset scenes.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a scene's source cameras under a new light.
    Relight {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Render a new camera, under the source light unless --env is given.
    ViewSynth {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Score held-out novel-light targets for several view counts.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        view_counts: Option<Vec<usize>>,
    },
    /// Train and score both transport modes with one budget.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the invariant suite.
    Selftest,
}

impl Cli {
    /// Flag values as a config layer.
    fn flags(&self) -> RunConfig {
        let g = &self.global;
        let mut c = RunConfig {
            seed: g.seed,
            out: g.out.clone(),
            views: g.views,
            mode: g.mode,
            hull: g.hull,
            bounces: g.bounces,
            threads: g.threads,
            ..Default::default()
        };
        let data = |c: &mut RunConfig, d: &DataArgs| {
            c.data = d.data.clone();
            c.scenes = d.scenes.clone();
        };
        match &self.command {
            Command::GenData { n_scenes } => c.n_scenes = *n_scenes,
            Command::Bake { scene, camera } => {
                c.scene = scene.clone();
                c.camera = camera.clone();
            }
            Command::RenderRef { scene, camera, env } => {
                c.scene = scene.clone();
                c.camera = camera.clone();
                c.env = env.clone();
            }
            Command::EstimateLight { data: d } => data(&mut c, d),
            Command::Fit {
                data: d,
                steps,
                resume,
            } => {
                data(&mut c, d);
                c.steps = *steps;
                c.resume = resume.clone();
            }
            Command::Relight {
                data: d,
                checkpoint,
                env,
            } => {
                data(&mut c, d);
                c.checkpoint = checkpoint.clone();
                c.env = env.clone();
            }
            Command::ViewSynth {
                data: d,
                checkpoint,
                camera,
                env,
            } => {
                data(&mut c, d);
                c.checkpoint = checkpoint.clone();
                c.camera = camera.clone();
                c.env = env.clone();
            }
            Command::Evaluate {
                data: d,
                checkpoint,
                view_counts,
            } => {
                data(&mut c, d);
                c.checkpoint = checkpoint.clone();
                c.view_counts = view_counts.clone();
            }
            Command::Ablate { data: d, steps } => {
                data(&mut c, d);
                c.steps = *steps;
            }
            Command::Selftest => {}
        }
        c
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = file.overridden_by(cli.flags());
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Bake { .. } => commands::bake(&cfg),
        Command::RenderRef { .. } => commands::render_ref(&cfg),
        Command::EstimateLight { .. } => commands::estimate_light(&cfg),
        Command::Fit { .. } => commands::fit(&cfg),
        Command::Relight { .. } => commands::relight(&cfg),
        Command::ViewSynth { .. } => commands::view_synth(&cfg),
        Command::Evaluate { .. } => commands::evaluate(&cfg),
        Command::Ablate { .. } => commands::ablate(&cfg),
        Command::Selftest => selftest::run(&cfg),
    }
}
