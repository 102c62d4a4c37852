//! Read-only analyses of a trained detector: RMS scoring in both evaluation
//! regimes, annotation-count sweeps, the closest-point oracle, off-surface
//! error tables, embedding interpolation/visualisation, saliency maps, and
//! the weighted least-squares triangulation comparison.

use thiserror::Error;

use crate::autodiff::{backward, AutodiffError, Tensor};
use crate::geometry::{best_subset_triangulate, GeometryError};
use crate::heatmap::{make_target, rms_pixel_error, Heatmap, HeatmapError};
use crate::model::{aggregate, decoder_graph, encoder_graph, Model, ModelError};
use crate::parallel;
use crate::rng::Rng;
use crate::scene::{
    build_meta_batch, object_library, sample_task, tracking_instant, Image, MetaBatch,
    SceneConfig, SceneError, View,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("task has {have} views but the sweep needs {need}")]
    TooFewViews { have: usize, need: usize },
    #[error("embedding has {0} dims, need at least 3 for an RGB view")]
    KTooSmall(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which views of a meta-batch get scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// The held-out validation view — the few-shot test proper.
    Adaptation,
    /// The conditioning views themselves — reconstruction quality.
    Autoencoder,
}

/// RMS pixel error over every scored view of a dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub regime: Regime,
    pub rms: f64,
    pub views_scored: usize,
}

/// Mean embedding over a meta-batch's conditioning pairs — the `c` every
/// decode of that batch is conditioned on.
pub fn conditioning_embedding(model: &Model, mb: &MetaBatch) -> Result<Vec<f32>, ModelError> {
    let mut embs = Vec::with_capacity(mb.l());
    for v in mb.conditioning() {
        embs.push(model.encode(&v.image.to_tensor(), &v.target)?);
    }
    aggregate(&embs)
}

/// Soft-argmax RMS error of `model` over `batches` in the given regime.
/// Batches are scored independently (and in parallel), so the report is
/// invariant to dataset order.
pub fn eval_rmse(
    model: &Model,
    batches: &[MetaBatch],
    regime: Regime,
) -> Result<EvalReport, EvalError> {
    if batches.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    type Scored = Result<Vec<((f64, f64), (f64, f64))>, EvalError>;
    let per_batch = parallel::map_indexed(batches.len(), |i| -> Scored {
        let mb = &batches[i];
        let c = conditioning_embedding(model, mb)?;
        let views: &[View] = match regime {
            Regime::Adaptation => std::slice::from_ref(mb.validation()),
            Regime::Autoencoder => mb.conditioning(),
        };
        views
            .iter()
            .map(|v| Ok((model.detect(&v.image.to_tensor(), &c)?, v.pixel)))
            .collect()
    });
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for scored in per_batch {
        for (p, t) in scored? {
            predicted.push(p);
            truth.push(t);
        }
    }
    let rms = rms_pixel_error(&predicted, &truth)?;
    Ok(EvalReport { regime, rms, views_scored: predicted.len() })
}

/// RMS error at one annotation count of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub annotations: usize,
    pub rms: f64,
}

/// How detection error moves as conditioning annotations accumulate. Each
/// task's last `test_views` views are held out for scoring; for every count
/// `n` in `counts` the model is conditioned on the first `n` of the remaining
/// views and scored on the held-out ones (soft-argmax RMS over all tasks).
pub fn annotation_sweep(
    model: &Model,
    tasks: &[MetaBatch],
    counts: &[usize],
    test_views: usize,
) -> Result<Vec<SweepPoint>, EvalError> {
    if tasks.is_empty() || counts.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if test_views == 0 || counts.contains(&0) {
        return Err(EvalError::Invalid("counts and test_views must be >= 1".into()));
    }
    let max_n = *counts.iter().max().expect("counts nonempty");
    let need = max_n + test_views;
    for t in tasks {
        if t.views.len() < need {
            return Err(EvalError::TooFewViews { have: t.views.len(), need });
        }
    }
    type PerTask = Result<Vec<Vec<((f64, f64), (f64, f64))>>, EvalError>;
    let per_task = parallel::map_indexed(tasks.len(), |ti| -> PerTask {
        let views = &tasks[ti].views;
        let test = &views[views.len() - test_views..];
        // Encode the deepest prefix once; every count reuses the encodings.
        let embs: Vec<Vec<f32>> = views[..max_n]
            .iter()
            .map(|v| model.encode(&v.image.to_tensor(), &v.target))
            .collect::<Result<_, _>>()?;
        counts
            .iter()
            .map(|&n| {
                let c = aggregate(&embs[..n])?;
                test.iter()
                    .map(|v| Ok((model.detect(&v.image.to_tensor(), &c)?, v.pixel)))
                    .collect()
            })
            .collect()
    });
    let scored = per_task.into_iter().collect::<Result<Vec<_>, EvalError>>()?;
    counts
        .iter()
        .enumerate()
        .map(|(ci, &n)| {
            let mut predicted = Vec::new();
            let mut truth = Vec::new();
            for task in &scored {
                for &(p, t) in &task[ci] {
                    predicted.push(p);
                    truth.push(t);
                }
            }
            Ok(SweepPoint { annotations: n, rms: rms_pixel_error(&predicted, &truth)? })
        })
        .collect()
}

/// Stream-domain tag for evaluation-owned tracking instants, far away from
/// batch indices so the streams can never collide.
const INSTANT_DOMAIN: u64 = 0xE000_0000_0000_0000;

/// Per-task 3D results on off-surface tasks: the pipeline's triangulated
/// error next to the best any surface-bound predictor could do on the same
/// task (the task-point-to-surface distance, which rigid motion preserves).
#[derive(Debug, Clone)]
pub struct OffsurfaceReport {
    /// |triangulated - true world point| in meters, one entry per task.
    pub model_err: Vec<f64>,
    /// Distance (m) from the task point to the object surface.
    pub oracle_err: Vec<f64>,
}

impl OffsurfaceReport {
    pub fn mean_model(&self) -> f64 {
        self.model_err.iter().sum::<f64>() / self.model_err.len() as f64
    }

    pub fn mean_oracle(&self) -> f64 {
        self.oracle_err.iter().sum::<f64>() / self.oracle_err.len() as f64
    }
}

/// Score `tasks` off-surface tracking problems end to end: condition on a
/// regular meta-batch of each task, then read the 3D point out of a frozen
/// [`tracking_instant`] through the full rig and robust triangulation.
pub fn offsurface_eval(
    model: &Model,
    scene: &SceneConfig,
    seed: u64,
    tasks: usize,
) -> Result<OffsurfaceReport, EvalError> {
    if tasks == 0 {
        return Err(EvalError::EmptyDataset);
    }
    if scene.offsurface_sigma <= 0.0 {
        return Err(EvalError::Invalid(
            "off-surface evaluation needs offsurface_sigma > 0".into(),
        ));
    }
    let meshes = object_library(scene, seed)?;
    let cams = scene.rig_cameras();
    let per = parallel::map_indexed(tasks, |i| -> Result<(f64, f64), EvalError> {
        let mut rng = Rng::new(seed).derive(INSTANT_DOMAIN | i as u64);
        let task = sample_task(&mut rng, &meshes, scene);
        let mb = build_meta_batch(&mut rng, &task, &meshes, &cams, scene)?;
        let c = conditioning_embedding(model, &mb)?;
        let inst = tracking_instant(&mut rng, &task, &meshes, &cams, scene)?;
        let heatmaps: Vec<Heatmap> = inst
            .views
            .iter()
            .map(|v| model.decode(&v.image.to_tensor(), &c).map(|(kp, _)| kp))
            .collect::<Result<_, _>>()?;
        let out = best_subset_triangulate(&cams, &heatmaps)?;
        let oracle = meshes[task.object].closest_surface_point(&task.point).1;
        Ok(((out.point - inst.world).norm(), oracle))
    });
    let mut model_err = Vec::with_capacity(tasks);
    let mut oracle_err = Vec::with_capacity(tasks);
    for r in per {
        let (m, o) = r?;
        model_err.push(m);
        oracle_err.push(o);
    }
    Ok(OffsurfaceReport { model_err, oracle_err })
}

/// Soft-argmax detections along the straight embedding-space line from `a`
/// to `b`, decoded on one fixed image. `steps >= 2`; both endpoints are
/// included, with step `i` at fraction `i / (steps - 1)`.
pub fn interpolate_detections(
    model: &Model,
    image: &Image,
    a: &[f32],
    b: &[f32],
    steps: usize,
) -> Result<Vec<(f64, f64)>, EvalError> {
    if steps < 2 {
        return Err(EvalError::Invalid("need at least the two endpoints".into()));
    }
    if a.len() != b.len() {
        return Err(EvalError::Invalid(format!("embedding dims {} vs {}", a.len(), b.len())));
    }
    let img = image.to_tensor();
    parallel::map_indexed(steps, |i| {
        let t = i as f32 / (steps - 1) as f32;
        let c: Vec<f32> = a.iter().zip(b).map(|(&x, &y)| (1.0 - t) * x + t * y).collect();
        model.detect(&img, &c)
    })
    .into_iter()
    .collect::<Result<_, _>>()
    .map_err(EvalError::Model)
}

/// Affinely map a slice onto [0, 1]; a constant (or non-finite-range) slice
/// reads 0.5 everywhere.
fn minmax_normalize(xs: &mut [f32]) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &x in xs.iter() {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        xs.iter_mut().for_each(|x| *x = 0.5);
        return;
    }
    xs.iter_mut().for_each(|x| *x = (*x - lo) / range);
}

/// False-colour map of the embedding field: re-encode `image` with the
/// target peaked at every pixel in turn and spread the first three embedding
/// dims over RGB, each min-max normalised across the image (a constant
/// channel reads 0.5). Needs K >= 3.
pub fn embedding_image(model: &Model, image: &Image, sigma: f64) -> Result<Image, EvalError> {
    if model.cfg.embedding < 3 {
        return Err(EvalError::KTooSmall(model.cfg.embedding));
    }
    let (w, h) = (image.width, image.height);
    let img = image.to_tensor();
    let per = parallel::map_indexed(w * h, |i| -> Result<[f32; 3], EvalError> {
        let target = make_target(w, h, ((i % w) as f64, (i / w) as f64), sigma)?;
        let e = model.encode(&img, &target)?;
        Ok([e[0], e[1], e[2]])
    });
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, r) in per.into_iter().enumerate() {
        let e = r?;
        for (k, &x) in e.iter().enumerate() {
            data[k * w * h + i] = x;
        }
    }
    for k in 0..3 {
        minmax_normalize(&mut data[k * w * h..(k + 1) * w * h]);
    }
    Ok(Image::new(w, h, data)?)
}

/// Mean |g| over the leading (channel) axis of a channels-first gradient.
fn channel_mean_abs(g: &Tensor<f64>, w: usize, h: usize) -> Vec<f32> {
    let d = g.data();
    let hw = w * h;
    let channels = d.len() / hw;
    (0..hw)
        .map(|i| {
            let s: f64 = (0..channels).map(|c| d[c * hw + i].abs()).sum();
            (s / channels as f64) as f32
        })
        .collect()
}

/// Raw d(embedding[k]) / d(image) of the encoder on `view`, in f64: the
/// encoder graph plus a one-hot selection of component `k`, differentiated
/// back to the image input.
fn embedding_component_grad(model: &Model, view: &View, k: usize) -> Result<Tensor<f64>, EvalError> {
    let mut eg = encoder_graph(&model.cfg, model.width, model.height);
    let select = eg.graph.input("select", &[model.cfg.embedding]);
    let picked = eg.graph.mul(eg.embedding, select)?;
    let loss = eg.graph.sum(picked);
    let params = model.params.cast::<f64>().bind(&eg.graph)?;
    let mut onehot = vec![0.0f64; model.cfg.embedding];
    onehot[k] = 1.0;
    let inputs = [
        view.image.to_tensor().cast::<f64>(),
        Tensor::new(&[1, model.height, model.width], view.target.data.clone())?,
        Tensor::new(&[model.cfg.embedding], onehot)?,
    ];
    let eval = eg.graph.forward(&inputs, &params)?;
    let grads = backward(&eg.graph, &eval, loss)?;
    Ok(grads.inputs[0].clone())
}

/// Where the embedding looks: per-pixel gradient magnitude of embedding dims
/// 0..3 w.r.t. the image (mean |grad| across the RGB input channels), one
/// output channel per dim, each min-max normalised. Needs K >= 3.
pub fn encoder_saliency(model: &Model, view: &View) -> Result<Image, EvalError> {
    if model.cfg.embedding < 3 {
        return Err(EvalError::KTooSmall(model.cfg.embedding));
    }
    let (w, h) = (model.width, model.height);
    let mut data = vec![0.0f32; 3 * w * h];
    for k in 0..3 {
        let g = embedding_component_grad(model, view, k)?;
        let mut chan = channel_mean_abs(&g, w, h);
        minmax_normalize(&mut chan);
        data[k * w * h..(k + 1) * w * h].copy_from_slice(&chan);
    }
    Ok(Image::new(w, h, data)?)
}

/// Raw (d E[u] / d image, d E[v] / d image) of the decoder's soft-argmax on
/// `image` conditioned on `c`, in f64: the decoder graph extended with
/// coordinate maps so each expectation is a scalar node.
fn softargmax_grads(
    model: &Model,
    image: &Image,
    c: &[f32],
) -> Result<(Tensor<f64>, Tensor<f64>), EvalError> {
    let (w, h) = (model.width, model.height);
    let mut dg = decoder_graph(&model.cfg, w, h);
    let umap = dg.graph.input("ucoord", &[1, h, w]);
    let vmap = dg.graph.input("vcoord", &[1, h, w]);
    let p = dg.graph.pixel_softmax(dg.kp)?;
    let pu = dg.graph.mul(p, umap)?;
    let eu = dg.graph.sum(pu);
    let pv = dg.graph.mul(p, vmap)?;
    let ev = dg.graph.sum(pv);
    let params = model.params.cast::<f64>().bind(&dg.graph)?;
    let emb: Vec<f64> = c.iter().map(|&x| x as f64).collect();
    let inputs = [
        image.to_tensor().cast::<f64>(),
        Tensor::new(&[model.cfg.embedding], emb)?,
        Tensor::new(&[1, h, w], (0..w * h).map(|i| (i % w) as f64).collect())?,
        Tensor::new(&[1, h, w], (0..w * h).map(|i| (i / w) as f64).collect())?,
    ];
    let eval = dg.graph.forward(&inputs, &params)?;
    let gu = backward(&dg.graph, &eval, eu)?;
    let gv = backward(&dg.graph, &eval, ev)?;
    Ok((gu.inputs[0].clone(), gv.inputs[0].clone()))
}

/// Where the readout looks: gradient magnitude of the soft-argmax coordinates
/// w.r.t. the image — d E[u] in red, d E[v] in green, blue left at zero. Each
/// used channel is min-max normalised.
pub fn decoder_saliency(model: &Model, image: &Image, c: &[f32]) -> Result<Image, EvalError> {
    let (w, h) = (model.width, model.height);
    let (gu, gv) = softargmax_grads(model, image, c)?;
    let mut data = vec![0.0f32; 3 * w * h];
    for (k, g) in [(0usize, &gu), (1, &gv)] {
        let mut chan = channel_mean_abs(g, w, h);
        minmax_normalize(&mut chan);
        data[k * w * h..(k + 1) * w * h].copy_from_slice(&chan);
    }
    Ok(Image::new(w, h, data)?)
}
