//! `tack viz` — images showing what a trained model attends to.
//!
//! Renders one task, writes the raw views, and then pairs each with the
//! model's own view of it: decoded detection/segmentation maps, input
//! saliency for both halves of the network, the per-pixel embedding map,
//! and detections along a straight line between two view embeddings.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use tack_core::autodiff::load_params;
use tack_core::evaluation::{
    conditioning_embedding, decoder_saliency, embedding_image, encoder_saliency,
    interpolate_detections,
};
use tack_core::heatmap::softmax_covariance_trace;
use tack_core::model::Model;
use tack_core::scene::{generate_dataset, write_ppm};

use crate::{load_config, CliError};

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Run-config JSON the model was trained under.
    #[arg(long)]
    pub config: PathBuf,
    /// Trained weights (params.bin or a rolling checkpoint).
    #[arg(long)]
    pub params: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed selecting the visualised task.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Also write each view's decoded keypoint/segmentation maps as PGM.
    #[arg(long)]
    pub dump_heatmaps: bool,
    /// Also write the per-pixel embedding false-colour map. Slow: one
    /// encoder pass per pixel of the query view.
    #[arg(long)]
    pub embedding_map: bool,
    /// Also detect along a straight line between the first two view
    /// embeddings, with this many steps.
    #[arg(long)]
    pub interpolate: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ViewRow {
    file: String,
    /// Ground-truth projection of the task point.
    truth: (f64, f64),
    /// Model detection under the aggregated embedding.
    detected: (f64, f64),
    /// Covariance trace of the detection distribution (px^2).
    spread: f64,
}

pub fn run(args: &VizArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let params = load_params(&args.params)?;
    let model = Model::with_params(cfg.scene.width, cfg.scene.height, cfg.model.clone(), params)?;
    std::fs::create_dir_all(&args.out)?;

    let mb = generate_dataset(&cfg.scene, args.seed, 1)?.remove(0);
    let c = conditioning_embedding(&model, &mb)?;

    // Per view: raw image, detection row, optional decoded maps. The last
    // view is the held-out query, named apart from the conditioning views.
    let mut rows = Vec::with_capacity(mb.views.len());
    for (i, view) in mb.views.iter().enumerate() {
        let stem = if i == mb.l() { "query".to_string() } else { format!("cond_{i}") };
        let img_path = args.out.join(format!("{stem}.ppm"));
        write_ppm(&img_path, &view.image)?;

        let (kp, seg) = model.decode(&view.image.to_tensor(), &c)?;
        rows.push(ViewRow {
            file: format!("{stem}.ppm"),
            truth: view.pixel,
            detected: tack_core::heatmap::soft_argmax(&kp),
            spread: softmax_covariance_trace(&kp),
        });
        if args.dump_heatmaps {
            kp.write_pgm(&args.out.join(format!("{stem}_kp.pgm")))?;
            seg.write_pgm(&args.out.join(format!("{stem}_seg.pgm")))?;
            view.target.write_pgm(&args.out.join(format!("{stem}_target.pgm")))?;
        }
    }
    std::fs::write(
        args.out.join("detections.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialise"),
    )?;

    // What the encoder looked at (per embedding channel) and where the
    // decoder's detection is sensitive to the input.
    let query = mb.validation();
    write_ppm(&args.out.join("saliency_enc.ppm"), &encoder_saliency(&model, &mb.views[0])?)?;
    write_ppm(&args.out.join("saliency_dec.ppm"), &decoder_saliency(&model, &query.image, &c)?)?;

    if args.embedding_map {
        let emb = embedding_image(&model, &query.image, cfg.scene.sigma)?;
        write_ppm(&args.out.join("embedding.ppm"), &emb)?;
    }

    if let Some(steps) = args.interpolate {
        let a = model.encode(&mb.views[0].image.to_tensor(), &mb.views[0].target)?;
        let b = model.encode(&mb.views[1].image.to_tensor(), &mb.views[1].target)?;
        let line = interpolate_detections(&model, &query.image, &a, &b, steps)?;
        std::fs::write(
            args.out.join("interpolation.json"),
            serde_json::to_string_pretty(&line).expect("line serialises"),
        )?;
    }

    println!("wrote task {} visualisations to {}", args.seed, args.out.display());
    Ok(())
}
