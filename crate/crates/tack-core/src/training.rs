//! Loss assembly, the Adam optimiser, and the training loop.
//!
//! A detector trains on meta-batches: the conditioning views are encoded and
//! averaged into an embedding `c`, the held-out view scores the *adaptation*
//! loss (can the embedding steer the decoder on an unseen view?), and the
//! conditioning views themselves score the *reconstruction* loss (does the
//! embedding still describe the views it came from?). Every view also trains
//! a segmentation head as an auxiliary task. The three terms combine as
//! `w_adapt·adapt + w_auto·auto + w_seg·seg`, each weight independently
//! zeroable for the ablation runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{backward, AutodiffError, Graph, ParamStore, Tensor, Var};
use crate::evaluation::{conditioning_embedding, eval_rmse, EvalError, Regime};
use crate::heatmap::{kl_loss, Heatmap, HeatmapError};
use crate::model::{
    apply_decoder, apply_encoder, declare_decoder, declare_encoder, init_params_for, Model,
    ModelConfig, ModelError,
};
use crate::rng::Rng;
use crate::scene::{
    augment_view, generate_batch, object_library, MetaBatch, SceneConfig, SceneError,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training config: {0}")]
    InvalidConfig(String),
    #[error(
        "non-finite loss at step {step} (adapt {adapt}, auto {auto}, seg {seg}); aborting"
    )]
    NonFiniteLoss { step: usize, adapt: f64, auto: f64, seg: f64 },
    #[error("checkpoint is missing '{0}'")]
    MissingState(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Learning rate interpolates linearly from `lr_start` (step 0) to
    /// `lr_end` (final step).
    pub lr_start: f64,
    pub lr_end: f64,
    pub w_adapt: f64,
    pub w_auto: f64,
    pub w_seg: f64,
    /// Seeds parameter init, the task stream, and augmentation draws.
    pub seed: u64,
    /// Random pad-and-crop on every view (shift range from the scene's pad).
    pub augment: bool,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            steps: 5000,
            lr_start: 1e-4,
            lr_end: 1e-5,
            w_adapt: 1.0,
            w_auto: 1.0,
            w_seg: 0.1,
            seed: 0,
            augment: true,
            eval_every: 250,
            eval_batches: 16,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |msg: String| Err(TrainingError::InvalidConfig(msg));
        if self.batch_size == 0 || self.steps == 0 {
            return bad(format!(
                "batch_size {} and steps {} must be positive",
                self.batch_size, self.steps
            ));
        }
        for (name, w) in [("w_adapt", self.w_adapt), ("w_auto", self.w_auto), ("w_seg", self.w_seg)]
        {
            if !(w >= 0.0) || !w.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        if !(self.lr_start > 0.0) || !(self.lr_end > 0.0) {
            return bad(format!(
                "learning rates must be positive, got {} -> {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.eval_every == 0 || self.eval_batches == 0 || self.checkpoint_every == 0 {
            return bad("eval_every, eval_batches, checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

/// Per-step losses, reported before the parameter update. `total` is
/// recomputed from the components in double precision, so it always equals
/// the weighted sum to well under 1e-9.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub adapt: f64,
    pub auto: f64,
    pub seg: f64,
    pub total: f64,
}

/// Linear interpolation from `lr_start` at step 0 to `lr_end` at the final
/// step (exact at both endpoints).
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.steps <= 1 {
        return cfg.lr_start;
    }
    let f = step as f64 / (cfg.steps - 1) as f64;
    (1.0 - f) * cfg.lr_start + f * cfg.lr_end
}

// ---------------------------------------------------------------------------
// Reference losses (forward-only, double-precision KL/BCE on top of `Model`)
// ---------------------------------------------------------------------------

/// KL between the held-out view's target and the decode conditioned on the
/// averaged conditioning embedding.
pub fn adaptation_loss(model: &Model, mb: &MetaBatch) -> Result<f64, TrainingError> {
    let c = conditioning_embedding(model, mb)?;
    let val = mb.validation();
    let (kp, _) = model.decode(&val.image.to_tensor(), &c)?;
    Ok(kl_loss(&val.target, &kp)?)
}

/// Sum of per-conditioning-view KLs, every decode conditioned on the same
/// averaged embedding.
pub fn autoencoder_loss(model: &Model, mb: &MetaBatch) -> Result<f64, TrainingError> {
    let c = conditioning_embedding(model, mb)?;
    let mut sum = 0.0;
    for v in mb.conditioning() {
        let (kp, _) = model.decode(&v.image.to_tensor(), &c)?;
        sum += kl_loss(&v.target, &kp)?;
    }
    Ok(sum)
}

/// Mean per-pixel binary cross-entropy of the segmentation head against the
/// rendered mask, in the stable max-form, averaged over all L+1 views.
pub fn segmentation_loss(model: &Model, mb: &MetaBatch) -> Result<f64, TrainingError> {
    let c = conditioning_embedding(model, mb)?;
    let mut sum = 0.0;
    for v in &mb.views {
        let (_, seg) = model.decode(&v.image.to_tensor(), &c)?;
        sum += bce_mean(&v.mask, &seg)?;
    }
    Ok(sum / mb.views.len() as f64)
}

fn bce_mean(mask: &Heatmap, logits: &Heatmap) -> Result<f64, TrainingError> {
    if mask.width != logits.width || mask.height != logits.height {
        return Err(HeatmapError::ShapeMismatch(format!(
            "mask {}x{} vs logits {}x{}",
            mask.width, mask.height, logits.width, logits.height
        ))
        .into());
    }
    let mut acc = 0.0;
    for (&m, &l) in mask.data.iter().zip(&logits.data) {
        // max(l,0) - l*m + ln(1 + exp(-|l|))
        acc += l.max(0.0) - l * m + (-l.abs()).exp().ln_1p();
    }
    Ok(acc / mask.data.len() as f64)
}

// ---------------------------------------------------------------------------
// Training graph
// ---------------------------------------------------------------------------

/// The combined loss over one meta-batch as a single differentiable graph:
/// L shared-parameter encoder applications, one averaged embedding, L+1
/// shared-parameter decoder applications, and the weighted loss sum. Weights
/// are baked in as scale constants, so a zero weight contributes exactly zero
/// gradient.
pub struct TrainGraph {
    pub graph: Graph,
    pub l: usize,
    width: usize,
    height: usize,
    /// The averaged conditioning embedding node.
    pub c: Var,
    pub adapt: Var,
    pub auto: Var,
    pub seg: Var,
    pub total: Var,
}

pub fn train_graph(
    cfg: &ModelConfig,
    width: usize,
    height: usize,
    l: usize,
    w_adapt: f64,
    w_auto: f64,
    w_seg: f64,
) -> Result<TrainGraph, ModelError> {
    cfg.validate(width, height)?;
    if l == 0 {
        return Err(ModelError::EmptyInput);
    }
    let mut g = Graph::new();
    let mut images = Vec::with_capacity(l + 1);
    let mut targets = Vec::with_capacity(l + 1);
    let mut masks = Vec::with_capacity(l + 1);
    for i in 0..=l {
        images.push(g.input(&format!("image_{i}"), &[3, height, width]));
        targets.push(g.input(&format!("target_{i}"), &[1, height, width]));
        masks.push(g.input(&format!("mask_{i}"), &[1, height, width]));
    }
    // Parameter declaration order matches `Model::new` (encoder first), so
    // seeded init draws the same values here as there.
    let enc = declare_encoder(&mut g, cfg);
    let dec = declare_decoder(&mut g, cfg, Some(cfg.conditioning), 1);

    let mut acc: Option<Var> = None;
    for i in 0..l {
        let (emb, _) = apply_encoder(&mut g, &enc, images[i], targets[i]);
        acc = Some(match acc {
            None => emb,
            Some(a) => g.add(a, emb).expect("embedding shapes agree"),
        });
    }
    let c = g.scale(acc.expect("l >= 1"), 1.0 / l as f64);

    let mut auto_acc: Option<Var> = None;
    let mut seg_acc: Option<Var> = None;
    let push_seg = |g: &mut Graph, acc: &mut Option<Var>, term: Var| {
        *acc = Some(match *acc {
            None => term,
            Some(a) => g.add(a, term).expect("scalar losses add"),
        });
    };
    for i in 0..l {
        let (kp, seg) = apply_decoder(&mut g, &dec, images[i], Some(c));
        let term = g.kl_from_logits(targets[i], kp).expect("target/logit shapes agree");
        push_seg(&mut g, &mut auto_acc, term);
        let b = g.bce_from_logits(masks[i], seg).expect("mask/logit shapes agree");
        push_seg(&mut g, &mut seg_acc, b);
    }
    let (kp_val, seg_val) = apply_decoder(&mut g, &dec, images[l], Some(c));
    let adapt = g.kl_from_logits(targets[l], kp_val).expect("target/logit shapes agree");
    let b = g.bce_from_logits(masks[l], seg_val).expect("mask/logit shapes agree");
    push_seg(&mut g, &mut seg_acc, b);

    let auto = auto_acc.expect("l >= 1");
    let seg = g.scale(seg_acc.expect("views exist"), 1.0 / (l + 1) as f64);
    let wa = g.scale(adapt, w_adapt);
    let wu = g.scale(auto, w_auto);
    let ws = g.scale(seg, w_seg);
    let partial = g.add(wa, wu).expect("scalars add");
    let total = g.add(partial, ws).expect("scalars add");
    Ok(TrainGraph { graph: g, l, width, height, c, adapt, auto, seg, total })
}

impl TrainGraph {
    /// Tensors for one meta-batch, in input-slot order
    /// (image/target/mask per view).
    pub fn bind_inputs(&self, mb: &MetaBatch) -> Result<Vec<Tensor<f32>>, TrainingError> {
        if mb.views.len() != self.l + 1 {
            return Err(TrainingError::InvalidConfig(format!(
                "meta-batch has {} views, graph wants {}",
                mb.views.len(),
                self.l + 1
            )));
        }
        let mut inputs = Vec::with_capacity(3 * (self.l + 1));
        for v in &mb.views {
            if v.image.width != self.width || v.image.height != self.height {
                return Err(TrainingError::InvalidConfig(format!(
                    "view is {}x{}, graph wants {}x{}",
                    v.image.width, v.image.height, self.width, self.height
                )));
            }
            let plane = |h: &Heatmap| {
                let data = h.data.iter().map(|&x| x as f32).collect();
                Tensor::new(&[1, self.height, self.width], data).expect("plane dims")
            };
            inputs.push(v.image.to_tensor());
            inputs.push(plane(&v.target));
            inputs.push(plane(&v.mask));
        }
        Ok(inputs)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const META_STEP: &str = "meta.step";

/// Adam state: first/second moments per parameter tensor, in the graph's
/// parameter-slot order, plus the completed-step count for bias correction.
pub struct Adam {
    t: usize,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(slots: &[(String, Vec<usize>)]) -> Adam {
        Adam {
            t: 0,
            m: slots.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
            v: slots.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
        }
    }

    /// One update over named parameters; `grads` aligns with `slots`.
    /// Moment math runs in double precision, state persists as f32.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<f32>,
        slots: &[(String, Vec<usize>)],
        grads: &[Tensor<f32>],
        lr: f64,
    ) -> Result<(), TrainingError> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (name, _)) in slots.iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(name)?.data_mut();
            for k in 0..p.len() {
                let gk = g[k] as f64;
                let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * gk;
                let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let delta = lr * (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
                p[k] = (p[k] as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Owns the training graph, the parameters, and the optimiser state; one
/// `step` call consumes one batch of meta-batches.
pub struct Trainer {
    pub width: usize,
    pub height: usize,
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    tg: TrainGraph,
    store: ParamStore<f32>,
    adam: Adam,
    completed: usize,
}

impl Trainer {
    pub fn new(
        width: usize,
        height: usize,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        l: usize,
    ) -> Result<Trainer, TrainingError> {
        cfg.validate()?;
        let tg = train_graph(model_cfg, width, height, l, cfg.w_adapt, cfg.w_auto, cfg.w_seg)?;
        let mut store = ParamStore::new();
        init_params_for(&mut store, &tg.graph, &mut Rng::new(cfg.seed));
        let adam = Adam::new(tg.graph.param_slots());
        Ok(Trainer {
            width,
            height,
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            tg,
            store,
            adam,
            completed: 0,
        })
    }

    /// Restore parameters, Adam moments, and the step counter from a merged
    /// checkpoint store (see [`Trainer::checkpoint_store`]).
    pub fn from_checkpoint(
        width: usize,
        height: usize,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        l: usize,
        saved: &ParamStore<f32>,
    ) -> Result<Trainer, TrainingError> {
        let mut t = Trainer::new(width, height, model_cfg, cfg, l)?;
        let step = saved
            .get(META_STEP)
            .map_err(|_| TrainingError::MissingState(META_STEP.into()))?
            .item() as usize;
        let slots: Vec<(String, Vec<usize>)> = t.tg.graph.param_slots().to_vec();
        for (i, (name, shape)) in slots.iter().enumerate() {
            let fetch = |key: &str| -> Result<Tensor<f32>, TrainingError> {
                let tensor =
                    saved.get(key).map_err(|_| TrainingError::MissingState(key.into()))?;
                if tensor.shape() != &shape[..] {
                    return Err(TrainingError::InvalidConfig(format!(
                        "checkpoint tensor '{key}' has shape {:?}, graph wants {shape:?}",
                        tensor.shape()
                    )));
                }
                Ok(tensor.clone())
            };
            *t.store.get_mut(name)? = fetch(name)?;
            t.adam.m[i] = fetch(&format!("adam.m.{name}"))?;
            t.adam.v[i] = fetch(&format!("adam.v.{name}"))?;
        }
        t.adam.t = step;
        t.completed = step;
        Ok(t)
    }

    /// Completed optimiser steps (also the next step's index).
    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Parameters plus optimiser state and step counter, merged for saving.
    pub fn checkpoint_store(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        let slots = self.tg.graph.param_slots();
        for (i, (name, _)) in slots.iter().enumerate() {
            out.insert(name, self.store.get(name).expect("own param").clone())
                .expect("fresh name");
            out.insert(&format!("adam.m.{name}"), self.adam.m[i].clone()).expect("fresh name");
            out.insert(&format!("adam.v.{name}"), self.adam.v[i].clone()).expect("fresh name");
        }
        out.insert(META_STEP, Tensor::scalar(self.completed as f32)).expect("fresh name");
        out
    }

    /// A snapshot model around the current parameters.
    pub fn model(&self) -> Result<Model, TrainingError> {
        Ok(Model::with_params(
            self.width,
            self.height,
            self.model_cfg.clone(),
            self.store.clone(),
        )?)
    }

    /// One optimiser step over a batch of meta-batches: per-sample forward +
    /// backward, gradients averaged over the batch, Adam update at the
    /// scheduled learning rate. Returns the pre-update losses.
    pub fn step(&mut self, batch: &[MetaBatch]) -> Result<LossBreakdown, TrainingError> {
        if batch.is_empty() {
            return Err(TrainingError::InvalidConfig("empty training batch".into()));
        }
        let slots: Vec<(String, Vec<usize>)> = self.tg.graph.param_slots().to_vec();
        let params = self.store.bind(&self.tg.graph)?;
        let mut gacc: Vec<Tensor<f32>> = slots.iter().map(|(_, s)| Tensor::zeros(s)).collect();
        let (mut adapt, mut auto, mut seg) = (0.0f64, 0.0f64, 0.0f64);
        for mb in batch {
            let inputs = self.tg.bind_inputs(mb)?;
            let eval = self.tg.graph.forward(&inputs, &params)?;
            adapt += eval.value(self.tg.adapt).item() as f64;
            auto += eval.value(self.tg.auto).item() as f64;
            seg += eval.value(self.tg.seg).item() as f64;
            let grads = backward(&self.tg.graph, &eval, self.tg.total)?;
            for (a, g) in gacc.iter_mut().zip(&grads.params) {
                for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *av += gv;
                }
            }
        }
        let b = batch.len() as f64;
        let (adapt, auto, seg) = (adapt / b, auto / b, seg / b);
        let total =
            self.cfg.w_adapt * adapt + self.cfg.w_auto * auto + self.cfg.w_seg * seg;
        if !total.is_finite() {
            return Err(TrainingError::NonFiniteLoss {
                step: self.completed,
                adapt,
                auto,
                seg,
            });
        }
        let inv_b = (1.0 / b) as f32;
        for g in &mut gacc {
            for v in g.data_mut() {
                *v *= inv_b;
            }
        }
        let lr = lr_at(&self.cfg, self.completed);
        self.adam.apply(&mut self.store, &slots, &gacc, lr)?;
        self.completed += 1;
        Ok(LossBreakdown { adapt, auto, seg, total })
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Where meta-batches come from.
pub enum DataSource<'a> {
    /// Fresh procedural tasks every step (the infinite-data regime). Batch
    /// index `step·B + slot` seeds each sample, so runs are reproducible and
    /// resumable.
    Online,
    /// A fixed dataset, cycled in order.
    Fixed(&'a [MetaBatch]),
}

/// One row of the metric log, produced at every evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub adapt_loss: f64,
    pub auto_loss: f64,
    pub seg_loss: f64,
    pub rmse_adapt: f64,
    pub rmse_auto: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    pub final_losses: LossBreakdown,
}

pub struct TrainRun<'a> {
    pub scene: &'a SceneConfig,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub data: DataSource<'a>,
    /// Receives `metrics.csv` and rolling `checkpoint_<step>.bin` files.
    pub out_dir: Option<&'a Path>,
    /// Resume from a merged checkpoint store instead of fresh init.
    pub resume: Option<&'a ParamStore<f32>>,
    /// Stop early after this many total steps (the schedule still spans
    /// `train.steps`); `None` runs to the end.
    pub stop_after: Option<usize>,
}

/// CSV rendering of the metric log (shared by the loop and the CLI).
pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,adapt_loss,auto_loss,seg_loss,rmse_adapt,rmse_auto\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.step, r.adapt_loss, r.auto_loss, r.seg_loss, r.rmse_adapt, r.rmse_auto
        )
        .expect("string write");
    }
    out
}

// Domain separators keeping the task stream, the augmentation stream, and
// the held-out evaluation stream disjoint under one seed.
const AUG_DOMAIN: u64 = 0x8000_0000_0000_0000;
const EVAL_DOMAIN: u64 = 0xC000_0000_0000_0000;

/// Run the training loop: assemble batches, step the optimiser, score both
/// evaluation regimes at intervals, and write logs/checkpoints. The hook
/// observes every metric row as it is produced.
pub fn train_loop(
    run: TrainRun,
    mut hook: impl FnMut(&MetricRow),
) -> Result<TrainOutcome, TrainingError> {
    let scene = run.scene;
    let cfg = run.train;
    cfg.validate()?;
    scene.validate()?;
    let mut trainer = match run.resume {
        None => Trainer::new(scene.width, scene.height, run.model, cfg, scene.l_views)?,
        Some(saved) => Trainer::from_checkpoint(
            scene.width,
            scene.height,
            run.model,
            cfg,
            scene.l_views,
            saved,
        )?,
    };

    let meshes = object_library(scene, cfg.seed)?;
    let cams = scene.rig_cameras();
    // The evaluation set is fixed up front so every eval scores the same data.
    let eval_set: Vec<MetaBatch> = match &run.data {
        DataSource::Online => (0..cfg.eval_batches)
            .map(|i| generate_batch(scene, cfg.seed, EVAL_DOMAIN + i as u64, &meshes, &cams))
            .collect::<Result<_, _>>()?,
        DataSource::Fixed(set) => {
            if set.is_empty() {
                return Err(TrainingError::InvalidConfig("fixed dataset is empty".into()));
            }
            set[..cfg.eval_batches.min(set.len())].to_vec()
        }
    };

    let stop = run.stop_after.unwrap_or(cfg.steps).min(cfg.steps);
    let mut metrics = Vec::new();
    let mut final_losses = None;
    if let Some(dir) = run.out_dir {
        fs::create_dir_all(dir)?;
    }

    for s in trainer.completed()..stop {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let global = (s * cfg.batch_size + slot) as u64;
            let mut mb = match &run.data {
                DataSource::Online => {
                    generate_batch(scene, cfg.seed, global, &meshes, &cams)?
                }
                DataSource::Fixed(set) => set[global as usize % set.len()].clone(),
            };
            if cfg.augment && scene.pad > 0 {
                let mut rng = Rng::new(cfg.seed).derive(AUG_DOMAIN | global);
                for v in &mut mb.views {
                    *v = augment_view(&mut rng, v, scene.pad);
                }
            }
            batch.push(mb);
        }
        let losses = trainer.step(&batch)?;
        let done = s + 1;

        if done % cfg.eval_every == 0 || done == stop {
            let model = trainer.model()?;
            let row = MetricRow {
                step: done,
                adapt_loss: losses.adapt,
                auto_loss: losses.auto,
                seg_loss: losses.seg,
                rmse_adapt: eval_rmse(&model, &eval_set, Regime::Adaptation)?.rms,
                rmse_auto: eval_rmse(&model, &eval_set, Regime::Autoencoder)?.rms,
            };
            hook(&row);
            metrics.push(row);
        }
        if let Some(dir) = run.out_dir {
            if done % cfg.checkpoint_every == 0 || done == stop {
                let path = dir.join(format!("checkpoint_{done}.bin"));
                crate::autodiff::save_params(&trainer.checkpoint_store(), &path)?;
            }
        }
        final_losses = Some(losses);
    }

    if let Some(dir) = run.out_dir {
        fs::write(dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
    }
    let final_losses = final_losses.ok_or_else(|| {
        TrainingError::InvalidConfig(format!(
            "nothing to do: checkpoint already at step {} of {}",
            trainer.completed(),
            stop
        ))
    })?;
    Ok(TrainOutcome { model: trainer.model()?, metrics, final_losses })
}
