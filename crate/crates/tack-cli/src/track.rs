//! `tack track` — few-shot detection from annotation files.
//!
//! The input is the few-shot interface of the whole system: a handful of
//! annotated images (pixel clicks) defines the point, and the model then
//! finds that point in views it has never seen. With a camera rig the
//! per-view detections are lifted to one 3D point.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use tack_core::autodiff::load_params;
use tack_core::geometry::{best_subset_triangulate, load_rig, Camera};
use tack_core::heatmap::{make_target, soft_argmax, softmax_covariance_trace, Heatmap};
use tack_core::model::{aggregate, Model};
use tack_core::scene::read_ppm;

use crate::{load_config, CliError};

/// Most annotations a single track invocation accepts. Conditioning is an
/// average over encodings, so more is valid in principle, but the few-shot
/// regime this model is built for saturates well below this.
pub const MAX_ANNOTATIONS: usize = 16;

/// One conditioning annotation: an image and the pixel to track in it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image: PathBuf,
    /// (u, v) pixel coordinates of the keypoint.
    pub pixel: (f64, f64),
}

/// One query: an image to detect the point in. `camera` indexes into the
/// rig file and is only needed for 3D output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub image: PathBuf,
    #[serde(default)]
    pub camera: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct Detection {
    pub image: String,
    /// Soft-argmax of the detection distribution, in pixels.
    pub pixel: (f64, f64),
    /// Spatial covariance trace of that distribution (px^2); smaller is a
    /// sharper, more confident detection.
    pub spread: f64,
}

#[derive(Debug, Serialize)]
pub struct TrackOutput {
    /// Aggregated task embedding the detections were conditioned on.
    pub embedding: Vec<f32>,
    pub detections: Vec<Detection>,
    /// Triangulated point in the world frame; null unless at least two
    /// queries carry camera indices and --rig was given.
    pub point3d: Option<[f64; 3]>,
    /// Indices of the queries whose rays the triangulation kept.
    pub subset: Option<Vec<usize>>,
    /// Reprojection score of `point3d` across all camera-tagged queries.
    pub score: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Run-config JSON the model was trained under.
    #[arg(long)]
    pub config: PathBuf,
    /// Trained weights (params.bin or a rolling checkpoint).
    #[arg(long)]
    pub params: PathBuf,
    /// JSON list of {"image", "pixel"} annotations (1 to 16).
    #[arg(long)]
    pub annotations: PathBuf,
    /// JSON list of {"image", "camera"?} queries to detect in.
    #[arg(long)]
    pub query: PathBuf,
    /// Camera rig JSON (written by `gen`); enables 3D output.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{what} {}: {e}", path.display())))
}

/// Load an image and check it matches the model's input size.
fn load_image(path: &Path, model: &Model) -> Result<tack_core::scene::Image, CliError> {
    let img = read_ppm(path)?;
    if img.width != model.width || img.height != model.height {
        return Err(CliError::Config(format!(
            "{}: image is {}x{} but the model takes {}x{}",
            path.display(),
            img.width,
            img.height,
            model.width,
            model.height
        )));
    }
    Ok(img)
}

pub fn run(args: &TrackArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let params = load_params(&args.params)?;
    let model = Model::with_params(cfg.scene.width, cfg.scene.height, cfg.model.clone(), params)?;

    let annotations: Vec<Annotation> = read_json(&args.annotations, "annotations")?;
    if annotations.is_empty() || annotations.len() > MAX_ANNOTATIONS {
        return Err(CliError::Config(format!(
            "need between 1 and {MAX_ANNOTATIONS} annotations, got {}",
            annotations.len()
        )));
    }
    let queries: Vec<Query> = read_json(&args.query, "queries")?;
    if queries.is_empty() {
        return Err(CliError::Config("need at least one query".into()));
    }

    // Condition: encode each annotated view against a target peaked at its
    // pixel, then average.
    let mut embeddings = Vec::with_capacity(annotations.len());
    for ann in &annotations {
        let img = load_image(&ann.image, &model)?;
        let target = make_target(model.width, model.height, ann.pixel, cfg.scene.sigma)?;
        embeddings.push(model.encode(&img.to_tensor(), &target)?);
    }
    let c = aggregate(&embeddings)?;

    // Detect in every query view.
    let mut detections = Vec::with_capacity(queries.len());
    let mut kp_maps: Vec<Heatmap> = Vec::with_capacity(queries.len());
    for q in &queries {
        let img = load_image(&q.image, &model)?;
        let (kp, _) = model.decode(&img.to_tensor(), &c)?;
        detections.push(Detection {
            image: q.image.display().to_string(),
            pixel: soft_argmax(&kp),
            spread: softmax_covariance_trace(&kp),
        });
        kp_maps.push(kp);
    }

    // Lift to 3D when the geometry is available. One tagged query is not
    // enough to intersect rays, so it keeps the 3D fields null.
    let tagged: Vec<usize> =
        (0..queries.len()).filter(|&i| queries[i].camera.is_some()).collect();
    let (mut point3d, mut subset, mut score) = (None, None, None);
    if tagged.len() >= 2 {
        let rig_path = args.rig.as_ref().ok_or_else(|| {
            CliError::Config("queries carry camera indices but no --rig was given".into())
        })?;
        let rig = load_rig(rig_path)?;
        let mut cams: Vec<Camera> = Vec::with_capacity(tagged.len());
        let mut maps: Vec<Heatmap> = Vec::with_capacity(tagged.len());
        for &i in &tagged {
            let ci = queries[i].camera.expect("tagged query has a camera");
            let cam = rig.get(ci).ok_or_else(|| {
                CliError::Config(format!(
                    "query {i} names camera {ci} but the rig has {}",
                    rig.len()
                ))
            })?;
            cams.push(cam.clone());
            maps.push(kp_maps[i].clone());
        }
        let tri = best_subset_triangulate(&cams, &maps)?;
        point3d = Some([tri.point.x, tri.point.y, tri.point.z]);
        // Subset indices refer to the tagged list; report query positions.
        subset = Some(tri.subset.iter().map(|&s| tagged[s]).collect());
        score = Some(tri.score);
    }

    let output = TrackOutput { embedding: c, detections, point3d, subset, score };
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
