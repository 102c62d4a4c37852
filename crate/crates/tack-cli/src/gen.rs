//! `tack gen` — render a dataset of annotated multi-view batches.

use std::path::PathBuf;

use clap::Args;
use tack_core::geometry::save_rig;
use tack_core::scene::{generate_dataset, write_dataset};

use crate::{load_config, CliError};

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Run-config JSON (see presets/).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of batches to render.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Stream seed; defaults to the config's training seed, so `train`
    /// without `--data` sees exactly these batches first.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &GenArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    if args.count == 0 {
        return Err(CliError::Config("--count must be at least 1".into()));
    }
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let batches = generate_dataset(&cfg.scene, seed, args.count)?;
    std::fs::create_dir_all(&args.out)?;
    write_dataset(&args.out, &batches, &cfg.scene, seed)?;
    // The rig file is what `track` needs to lift detections to 3D.
    save_rig(&args.out.join("rig.json"), &cfg.scene.rig_cameras())?;
    println!(
        "wrote {} batches ({} views each) and rig.json to {}",
        batches.len(),
        cfg.scene.l_views + 1,
        args.out.display()
    );
    Ok(())
}
