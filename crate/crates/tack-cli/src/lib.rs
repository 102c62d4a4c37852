//! Command-line frontend over the keypoint-tracking core.
//!
//! Five subcommands cover the pipeline end to end: `gen` renders a dataset
//! to disk, `train` fits a model (fresh or resumed from a checkpoint),
//! `track` runs few-shot detection and triangulation from annotation files,
//! `eval` reports error metrics, and `viz` dumps images showing what a
//! trained model attends to.
//!
//! Every failure maps onto one of three exit codes so scripts can tell what
//! *kind* of problem occurred without parsing stderr: 2 for bad
//! configuration or usage, 3 for missing or corrupt files, 4 for numeric
//! failures (divergent training, degenerate geometry).

use std::path::Path;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use tack_core::autodiff::AutodiffError;
use tack_core::evaluation::EvalError;
use tack_core::geometry::GeometryError;
use tack_core::heatmap::HeatmapError;
use tack_core::model::{ModelConfig, ModelError};
use tack_core::scene::{SceneConfig, SceneError};
use tack_core::training::{TrainConfig, TrainingError};

pub mod eval;
pub mod gen;
pub mod track;
pub mod train;
pub mod viz;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Top-level failure, bucketed by what the caller should do about it:
/// fix the invocation ([`CliError::Config`]), fix the files on disk
/// ([`CliError::Io`]), or treat the run as numerically failed
/// ([`CliError::Numeric`]).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

enum Kind {
    Config,
    Io,
    Numeric,
}

impl Kind {
    fn wrap(self, msg: String) -> CliError {
        match self {
            Kind::Config => CliError::Config(msg),
            Kind::Io => CliError::Io(msg),
            Kind::Numeric => CliError::Numeric(msg),
        }
    }
}

fn kind_of_geometry(e: &GeometryError) -> Kind {
    match e {
        GeometryError::Io(_) | GeometryError::CorruptRig(_) => Kind::Io,
        GeometryError::NonPositiveDepth
        | GeometryError::SingularIntrinsics
        | GeometryError::DegenerateGeometry { .. }
        | GeometryError::NoValidSubset => Kind::Numeric,
        _ => Kind::Config,
    }
}

fn kind_of_heatmap(e: &HeatmapError) -> Kind {
    match e {
        HeatmapError::Io(_) => Kind::Io,
        _ => Kind::Config,
    }
}

fn kind_of_autodiff(e: &AutodiffError) -> Kind {
    match e {
        AutodiffError::Io(_) | AutodiffError::CorruptCheckpoint(_) => Kind::Io,
        AutodiffError::Numeric { .. } | AutodiffError::NonScalarLoss => Kind::Numeric,
        _ => Kind::Config,
    }
}

// Budget exhaustion is classed as a config problem: the sampler gave up
// because the scene parameters make in-view poses (or clear background
// spots) too improbable, and the fix is to loosen those parameters.
fn kind_of_scene(e: &SceneError) -> Kind {
    match e {
        SceneError::Io(_) | SceneError::CorruptManifest(_) => Kind::Io,
        SceneError::Geometry(g) => kind_of_geometry(g),
        SceneError::Heatmap(h) => kind_of_heatmap(h),
        _ => Kind::Config,
    }
}

fn kind_of_model(e: &ModelError) -> Kind {
    match e {
        ModelError::Autodiff(a) => kind_of_autodiff(a),
        _ => Kind::Config,
    }
}

fn kind_of_eval(e: &EvalError) -> Kind {
    match e {
        EvalError::Model(m) => kind_of_model(m),
        EvalError::Heatmap(h) => kind_of_heatmap(h),
        EvalError::Geometry(g) => kind_of_geometry(g),
        EvalError::Scene(s) => kind_of_scene(s),
        EvalError::Autodiff(a) => kind_of_autodiff(a),
        _ => Kind::Config,
    }
}

// A checkpoint missing required state is a broken file, not a bad flag.
fn kind_of_training(e: &TrainingError) -> Kind {
    match e {
        TrainingError::NonFiniteLoss { .. } => Kind::Numeric,
        TrainingError::MissingState(_) => Kind::Io,
        TrainingError::Io(_) => Kind::Io,
        TrainingError::Model(m) => kind_of_model(m),
        TrainingError::Autodiff(a) => kind_of_autodiff(a),
        TrainingError::Scene(s) => kind_of_scene(s),
        TrainingError::Heatmap(h) => kind_of_heatmap(h),
        TrainingError::Eval(v) => kind_of_eval(v),
        TrainingError::InvalidConfig(_) => Kind::Config,
    }
}

macro_rules! cli_error_from {
    ($ty:ty, $kind:path) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                $kind(&e).wrap(e.to_string())
            }
        }
    };
}

cli_error_from!(GeometryError, kind_of_geometry);
cli_error_from!(HeatmapError, kind_of_heatmap);
cli_error_from!(AutodiffError, kind_of_autodiff);
cli_error_from!(SceneError, kind_of_scene);
cli_error_from!(ModelError, kind_of_model);
cli_error_from!(EvalError, kind_of_eval);
cli_error_from!(TrainingError, kind_of_training);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

/// One run description: scene/renderer parameters, model shape and the
/// optimiser schedule. The files under `presets/` have this shape; unknown
/// keys are rejected so a typo fails loudly instead of silently falling
/// back to a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parse and validate a run config. Missing file reads as an I/O problem;
/// unparsable or invalid contents as a config problem.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.scene.validate()?;
    cfg.model.validate(cfg.scene.width, cfg.scene.height)?;
    cfg.train.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(
    name = "tack",
    version,
    about = "Few-shot keypoint tracking: dataset generation, training, tracking, evaluation"
)]
pub struct Cli {
    /// Cap the worker pool at this many threads (0 keeps the default).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a dataset of annotated multi-view batches to a directory.
    Gen(gen::GenArgs),
    /// Train a model, fresh or resumed from a checkpoint.
    Train(train::TrainArgs),
    /// Detect an annotated keypoint in new views, optionally in 3D.
    Track(track::TrackArgs),
    /// Report detection error metrics for a trained model.
    Eval(eval::EvalArgs),
    /// Write images showing what a trained model attends to.
    Viz(viz::VizArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        tack_core::parallel::configure_threads(cli.threads);
    }
    match &cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Track(a) => track::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Viz(a) => viz::run(a),
    }
}
