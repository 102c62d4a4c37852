//! `tack train` — fit a model, fresh or resumed from a checkpoint.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use tack_core::autodiff::{load_params, save_params, ParamStore};
use tack_core::scene::{read_dataset, MetaBatch};
use tack_core::training::{train_loop, DataSource, TrainRun};

use crate::{load_config, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum LossChoice {
    /// Validation-view and conditioning-view detection losses together.
    Both,
    /// Validation-view loss only (drops the reconstruction term).
    Adapt,
    /// Conditioning-view reconstruction only (drops the held-out term).
    Auto,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run-config JSON (see presets/).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for metrics.csv, rolling checkpoints and params.bin.
    #[arg(long)]
    pub out: PathBuf,
    /// Train on a dataset written by `gen` instead of fresh procedural
    /// batches; the dataset must have been rendered under the same scene
    /// config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Resume from a rolling checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Which detection losses to keep (ablation switch; overrides the
    /// config's loss weights by zeroing the dropped term).
    #[arg(long, value_enum, default_value_t = LossChoice::Both)]
    pub loss: LossChoice,
    /// Stop after this many total steps while keeping the full learning-rate
    /// schedule, e.g. to checkpoint and resume later.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Suppress the per-evaluation metric lines.
    #[arg(long)]
    pub quiet: bool,
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    match args.loss {
        LossChoice::Both => {}
        LossChoice::Adapt => cfg.train.w_auto = 0.0,
        LossChoice::Auto => cfg.train.w_adapt = 0.0,
    }

    let fixed: Option<Vec<MetaBatch>> = match &args.data {
        None => None,
        Some(dir) => {
            let (scene, seed, batches) = read_dataset(dir)?;
            if scene != cfg.scene {
                return Err(CliError::Config(format!(
                    "dataset at {} was rendered under a different scene config than {}",
                    dir.display(),
                    args.config.display()
                )));
            }
            println!("loaded {} batches (stream seed {seed}) from {}", batches.len(), dir.display());
            Some(batches)
        }
    };
    let resume: Option<ParamStore<f32>> = match &args.resume {
        None => None,
        Some(path) => Some(load_params(path)?),
    };

    std::fs::create_dir_all(&args.out)?;
    let run = TrainRun {
        scene: &cfg.scene,
        model: &cfg.model,
        train: &cfg.train,
        data: match &fixed {
            Some(b) => DataSource::Fixed(b),
            None => DataSource::Online,
        },
        out_dir: Some(&args.out),
        resume: resume.as_ref(),
        stop_after: args.stop_after,
    };

    let t0 = Instant::now();
    let quiet = args.quiet;
    let outcome = train_loop(run, |row| {
        if !quiet {
            println!(
                "step {:>7}  adapt {:.4}  auto {:.4}  seg {:.4}  rmse[adapt] {:.3}px  rmse[auto] {:.3}px",
                row.step, row.adapt_loss, row.auto_loss, row.seg_loss, row.rmse_adapt, row.rmse_auto
            );
        }
    })?;

    // Final weights without optimiser state: the file `track`/`eval`/`viz`
    // take via --params. Resumable state lives in the rolling checkpoints.
    let params_path = args.out.join("params.bin");
    save_params(&outcome.model.params, &params_path)?;
    let f = &outcome.final_losses;
    println!(
        "done in {:.1}s: adapt {:.4}  auto {:.4}  seg {:.4}; wrote {}",
        t0.elapsed().as_secs_f64(),
        f.adapt,
        f.auto,
        f.seg,
        params_path.display()
    );
    Ok(())
}
