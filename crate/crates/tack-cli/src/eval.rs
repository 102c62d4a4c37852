//! `tack eval` — error metrics for a trained model.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use tack_core::autodiff::load_params;
use tack_core::evaluation::{annotation_sweep, eval_rmse, offsurface_eval, Regime};
use tack_core::model::Model;
use tack_core::scene::{generate_dataset, read_dataset};

use crate::{load_config, CliError};

/// Default held-out stream: the training seed pushed to a different orbit,
/// so `eval` never scores the very batches the model trained on.
const HELD_OUT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run-config JSON the model was trained under.
    #[arg(long)]
    pub config: PathBuf,
    /// Trained weights (params.bin or a rolling checkpoint).
    #[arg(long)]
    pub params: PathBuf,
    /// Batches to score.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Seed of the scored stream; defaults to one disjoint from training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Score a dataset written by `gen` instead of a fresh stream.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also sweep detection error over these annotation counts.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub sweep: Option<Vec<usize>>,
    /// Held-out views scored per task in the sweep.
    #[arg(long, default_value_t = 4)]
    pub sweep_test_views: usize,
    /// Also score 3D tracking of this many points sampled off the surface.
    #[arg(long)]
    pub offsurface: Option<usize>,
    /// Scatter of off-surface points around the object (metres).
    #[arg(long, default_value_t = 0.05)]
    pub offsurface_sigma: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RegimeReport {
    rms: f64,
    views_scored: usize,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    annotations: usize,
    rms: f64,
}

#[derive(Debug, Serialize)]
struct OffsurfaceSummary {
    /// Mean distance from triangulated detection to the true 3D point.
    model_mean: f64,
    /// Mean distance from the point to the nearest object surface — the
    /// floor any surface-bound detector is stuck at.
    oracle_mean: f64,
    tasks: usize,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    /// Held-out-view detection error (the deployment regime).
    adaptation: RegimeReport,
    /// Conditioning-view reconstruction error.
    autoencoder: RegimeReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<Vec<SweepRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    offsurface: Option<OffsurfaceSummary>,
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let params = load_params(&args.params)?;
    let model = Model::with_params(cfg.scene.width, cfg.scene.height, cfg.model.clone(), params)?;
    let seed = args.seed.unwrap_or(cfg.train.seed ^ HELD_OUT);

    let batches = match &args.data {
        Some(dir) => {
            let (scene, _, batches) = read_dataset(dir)?;
            if scene.width != cfg.scene.width
                || scene.height != cfg.scene.height
                || scene.l_views != cfg.scene.l_views
            {
                return Err(CliError::Config(format!(
                    "dataset at {} does not match the model's scene shape",
                    dir.display()
                )));
            }
            batches
        }
        None => {
            if args.count == 0 {
                return Err(CliError::Config("--count must be at least 1".into()));
            }
            generate_dataset(&cfg.scene, seed, args.count)?
        }
    };

    let adapt = eval_rmse(&model, &batches, Regime::Adaptation)?;
    let auto = eval_rmse(&model, &batches, Regime::Autoencoder)?;

    let sweep = match &args.sweep {
        None => None,
        Some(counts) => {
            let max = *counts.iter().max().ok_or_else(|| {
                CliError::Config("--sweep needs at least one count".into())
            })?;
            // A sweep task needs max-count conditioning views plus the
            // held-out queries in a single batch.
            let mut scene = cfg.scene.clone();
            scene.l_views = max + args.sweep_test_views - 1;
            let tasks = generate_dataset(&scene, seed, batches.len())?;
            let points = annotation_sweep(&model, &tasks, counts, args.sweep_test_views)?;
            Some(
                points
                    .into_iter()
                    .map(|p| SweepRow { annotations: p.annotations, rms: p.rms })
                    .collect(),
            )
        }
    };

    let offsurface = match args.offsurface {
        None => None,
        Some(tasks) => {
            let mut scene = cfg.scene.clone();
            scene.offsurface_sigma = args.offsurface_sigma;
            let report = offsurface_eval(&model, &scene, seed, tasks)?;
            Some(OffsurfaceSummary {
                model_mean: report.mean_model(),
                oracle_mean: report.mean_oracle(),
                tasks,
            })
        }
    };

    let output = EvalOutput {
        adaptation: RegimeReport { rms: adapt.rms, views_scored: adapt.views_scored },
        autoencoder: RegimeReport { rms: auto.rms, views_scored: auto.views_scored },
        sweep,
        offsurface,
    };
    let text = serde_json::to_string_pretty(&output).expect("report serialises");
    match &args.out {
        Some(path) => {
            std::fs::write(path, text)?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}
