//! Detector networks: the task-embedding encoder, the conditioned residual
//! U-Net decoder, and the fixed-keypoint supervised baseline head.
//!
//! The encoder maps an (image, target-heatmap) pair to a K-vector; averaging
//! those vectors over a task's conditioning pairs gives the task embedding.
//! The decoder maps (image, embedding) to single-channel keypoint logits plus
//! segmentation logits. Three conditioning strategies are supported:
//!
//! * `Concat` — the embedding is tiled over the image and concatenated to the
//!   decoder input only;
//! * `Gate`   — each block multiplies its features by `sigmoid(linear(c))`
//!   per channel;
//! * `Film`   — each block applies `x * scale(c) + shift(c)` per channel,
//!   with generators initialised to the identity so the trunk trains first.
//!
//! Gate and FiLM are applied inside every down and up block, after the
//! resample-plus-conv but before the block's residual unit.
//!
//! Graphs are built once per model; the training composite reuses the same
//! declaration helpers so encoder replicas share one set of parameter nodes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Scalar, Tensor, Var};
use crate::heatmap::Heatmap;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Concat,
    Gate,
    Film,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding length K.
    pub embedding: usize,
    /// Down/up stage count D; input dims must be divisible by 2^D.
    pub stages: usize,
    /// Channels after the stem; doubles per stage.
    pub stem_channels: usize,
    pub mlp_hidden: usize,
    pub conditioning: Conditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding: 4,
            stages: 4,
            stem_channels: 8,
            mlp_hidden: 64,
            conditioning: Conditioning::Film,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), ModelError> {
        if self.embedding == 0 || self.stem_channels == 0 || self.mlp_hidden == 0 {
            return Err(ModelError::ShapeMismatch("zero-sized model dimension".into()));
        }
        if self.stages == 0 {
            return Err(ModelError::ShapeMismatch("need at least one stage".into()));
        }
        let div = 1usize << self.stages;
        if width % div != 0 || height % div != 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "{width}x{height} not divisible by 2^{}",
                self.stages
            )));
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.stem_channels << stage
    }
}

// ---------------------------------------------------------------------------
// Graph declaration helpers (parameter nodes created once, applied anywhere)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct ConvVars {
    w: Var,
    b: Var,
}

fn declare_conv(g: &mut Graph, name: &str, ci: usize, co: usize) -> ConvVars {
    ConvVars {
        w: g.param(&format!("{name}.w"), &[co, ci, 3, 3]),
        b: g.param(&format!("{name}.b"), &[co]),
    }
}

#[derive(Clone, Copy)]
struct LinearVars {
    w: Var,
    b: Var,
}

fn declare_linear(g: &mut Graph, name: &str, features: usize, out: usize) -> LinearVars {
    LinearVars {
        w: g.param(&format!("{name}.w"), &[out, features]),
        b: g.param(&format!("{name}.b"), &[out]),
    }
}

#[derive(Clone, Copy)]
enum CondVars {
    None,
    Gate(LinearVars),
    Film { scale: LinearVars, shift: LinearVars },
}

fn declare_cond(g: &mut Graph, name: &str, mode: Option<Conditioning>, k: usize, c: usize) -> CondVars {
    match mode {
        None | Some(Conditioning::Concat) => CondVars::None,
        Some(Conditioning::Gate) => {
            CondVars::Gate(declare_linear(g, &format!("{name}.cond.gate"), k, c))
        }
        Some(Conditioning::Film) => CondVars::Film {
            scale: declare_linear(g, &format!("{name}.cond.scale"), k, c),
            shift: declare_linear(g, &format!("{name}.cond.shift"), k, c),
        },
    }
}

fn apply_cond(g: &mut Graph, cond: &CondVars, x: Var, emb: Option<Var>) -> Var {
    let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
    match cond {
        CondVars::None => x,
        CondVars::Gate(lin) => {
            let emb = emb.expect("gated decoder needs an embedding");
            let raw = g.linear(emb, lin.w, lin.b).expect("gate shapes");
            let gate = g.sigmoid(raw);
            let tiled = g.broadcast_spatial(gate, h, w).expect("gate tile");
            g.mul(x, tiled).expect("gate apply")
        }
        CondVars::Film { scale, shift } => {
            let emb = emb.expect("film decoder needs an embedding");
            let s = g.linear(emb, scale.w, scale.b).expect("film scale shapes");
            let t = g.linear(emb, shift.w, shift.b).expect("film shift shapes");
            g.scale_shift(x, s, t).expect("film apply")
        }
    }
}

/// Stride-2 conv + relu, optional conditioning, then a one-conv residual
/// unit: `relu(h + conv(h))`.
fn apply_block(g: &mut Graph, down: &ConvVars, res: &ConvVars, cond: &CondVars, x: Var, emb: Option<Var>, stride: usize) -> Var {
    let c = g.conv2d(x, down.w, down.b, stride).expect("block conv");
    let h = g.relu(c);
    let h = apply_cond(g, cond, h, emb);
    let r = g.conv2d(h, res.w, res.b, 1).expect("residual conv");
    let sum = g.add(h, r).expect("residual add");
    g.relu(sum)
}

pub(crate) struct EncoderVars {
    stem: ConvVars,
    stages: Vec<(ConvVars, ConvVars)>,
    mlp1: LinearVars,
    mlp2: LinearVars,
}

pub(crate) fn declare_encoder(g: &mut Graph, cfg: &ModelConfig) -> EncoderVars {
    let s = cfg.stem_channels;
    let stem = declare_conv(g, "enc.stem", 4, s);
    let stages = (0..cfg.stages)
        .map(|i| {
            let (ci, co) = (cfg.channels(i), cfg.channels(i + 1));
            (
                declare_conv(g, &format!("enc.s{i}.down"), ci, co),
                declare_conv(g, &format!("enc.s{i}.res"), co, co),
            )
        })
        .collect();
    let top = cfg.channels(cfg.stages);
    EncoderVars {
        stem,
        stages,
        mlp1: declare_linear(g, "enc.mlp1", top, cfg.mlp_hidden),
        mlp2: declare_linear(g, "enc.mlp2", cfg.mlp_hidden, cfg.embedding),
    }
}

/// Returns (embedding, pre-max feature map).
pub(crate) fn apply_encoder(g: &mut Graph, v: &EncoderVars, image: Var, target: Var) -> (Var, Var) {
    let x = g.concat_channels(image, target).expect("encoder input concat");
    let c = g.conv2d(x, v.stem.w, v.stem.b, 1).expect("encoder stem");
    let mut f = g.relu(c);
    let none = CondVars::None;
    for (down, res) in &v.stages {
        f = apply_block(g, down, res, &none, f, None, 2);
    }
    let pooled = g.spatial_max(f).expect("encoder pool");
    let m = g.linear(pooled, v.mlp1.w, v.mlp1.b).expect("mlp1");
    let h = g.relu(m);
    let emb = g.linear(h, v.mlp2.w, v.mlp2.b).expect("mlp2");
    (emb, f)
}

pub(crate) struct DecoderVars {
    mode: Option<Conditioning>,
    stem: ConvVars,
    down: Vec<(ConvVars, ConvVars, CondVars)>,
    up: Vec<(ConvVars, ConvVars, CondVars)>,
    kp: ConvVars,
    seg: ConvVars,
}

pub(crate) fn declare_decoder(
    g: &mut Graph,
    cfg: &ModelConfig,
    mode: Option<Conditioning>,
    head_channels: usize,
) -> DecoderVars {
    let s = cfg.stem_channels;
    let k = cfg.embedding;
    let stem_in = if mode == Some(Conditioning::Concat) { 3 + k } else { 3 };
    let stem = declare_conv(g, "dec.stem", stem_in, s);
    let down = (0..cfg.stages)
        .map(|i| {
            let (ci, co) = (cfg.channels(i), cfg.channels(i + 1));
            (
                declare_conv(g, &format!("dec.d{i}.down"), ci, co),
                declare_conv(g, &format!("dec.d{i}.res"), co, co),
                declare_cond(g, &format!("dec.d{i}"), mode, k, co),
            )
        })
        .collect();
    // Up blocks run from the bottleneck back to full resolution.
    let up = (0..cfg.stages)
        .rev()
        .map(|i| {
            let (ci, co) = (cfg.channels(i + 1), cfg.channels(i));
            (
                declare_conv(g, &format!("dec.u{i}.up"), ci, co),
                declare_conv(g, &format!("dec.u{i}.res"), co, co),
                declare_cond(g, &format!("dec.u{i}"), mode, k, co),
            )
        })
        .collect();
    DecoderVars {
        mode,
        stem,
        down,
        up,
        kp: declare_conv(g, "dec.kp", s, head_channels),
        seg: declare_conv(g, "dec.seg", s, 1),
    }
}

/// Returns (keypoint logits, segmentation logits), both at input resolution.
pub(crate) fn apply_decoder(g: &mut Graph, v: &DecoderVars, image: Var, emb: Option<Var>) -> (Var, Var) {
    let input = if v.mode == Some(Conditioning::Concat) {
        let emb = emb.expect("concat decoder needs an embedding");
        let (h, w) = (g.shape(image)[1], g.shape(image)[2]);
        let tiled = g.broadcast_spatial(emb, h, w).expect("embedding tile");
        g.concat_channels(image, tiled).expect("decoder input concat")
    } else {
        image
    };
    let c = g.conv2d(input, v.stem.w, v.stem.b, 1).expect("decoder stem");
    let mut f = g.relu(c);
    // Per-block embedding: Concat conditions at the input only.
    let block_emb = match v.mode {
        Some(Conditioning::Gate) | Some(Conditioning::Film) => emb,
        _ => None,
    };

    let mut skips = Vec::with_capacity(v.down.len());
    for (down, res, cond) in &v.down {
        skips.push(f);
        f = apply_block(g, down, res, cond, f, block_emb, 2);
    }
    for (idx, (upc, res, cond)) in v.up.iter().enumerate() {
        let skip = skips[skips.len() - 1 - idx];
        let u = g.upsample2(f).expect("upsample");
        let c = g.conv2d(u, upc.w, upc.b, 1).expect("up conv");
        let h = g.relu(c);
        let h = g.add(h, skip).expect("skip add");
        let h = apply_cond(g, cond, h, block_emb);
        let r = g.conv2d(h, res.w, res.b, 1).expect("up residual conv");
        let sum = g.add(h, r).expect("up residual add");
        f = g.relu(sum);
    }
    let kp = g.conv2d(f, v.kp.w, v.kp.b, 1).expect("kp head");
    let seg = g.conv2d(f, v.seg.w, v.seg.b, 1).expect("seg head");
    (kp, seg)
}

// ---------------------------------------------------------------------------
// Standalone graphs
// ---------------------------------------------------------------------------

pub struct EncoderGraph {
    pub graph: Graph,
    pub image: Var,
    pub target: Var,
    pub embedding: Var,
    pub premax: Var,
}

pub fn encoder_graph(cfg: &ModelConfig, width: usize, height: usize) -> EncoderGraph {
    let mut g = Graph::new();
    let image = g.input("image", &[3, height, width]);
    let target = g.input("target", &[1, height, width]);
    let vars = declare_encoder(&mut g, cfg);
    let (embedding, premax) = apply_encoder(&mut g, &vars, image, target);
    EncoderGraph { graph: g, image, target, embedding, premax }
}

pub struct DecoderGraph {
    pub graph: Graph,
    pub image: Var,
    /// None for the unconditioned (supervised) trunk.
    pub embedding: Option<Var>,
    pub kp: Var,
    pub seg: Var,
}

pub fn decoder_graph(cfg: &ModelConfig, width: usize, height: usize) -> DecoderGraph {
    let mut g = Graph::new();
    let image = g.input("image", &[3, height, width]);
    let emb = g.input("embedding", &[cfg.embedding]);
    let vars = declare_decoder(&mut g, cfg, Some(cfg.conditioning), 1);
    let (kp, seg) = apply_decoder(&mut g, &vars, image, Some(emb));
    DecoderGraph { graph: g, image, embedding: Some(emb), kp, seg }
}

/// Supervised baseline: the same trunk with no conditioning and one keypoint
/// channel per fixed keypoint index.
pub fn supervised_graph(cfg: &ModelConfig, width: usize, height: usize, n_keypoints: usize) -> DecoderGraph {
    assert!(n_keypoints >= 1);
    let mut g = Graph::new();
    let image = g.input("image", &[3, height, width]);
    let vars = declare_decoder(&mut g, cfg, None, n_keypoints);
    let (kp, seg) = apply_decoder(&mut g, &vars, image, None);
    DecoderGraph { graph: g, image, embedding: None, kp, seg }
}

// ---------------------------------------------------------------------------
// Parameter initialisation
// ---------------------------------------------------------------------------

/// Initialise every parameter slot a graph declares, keyed by name:
/// conditioning generators start at the identity (FiLM: scale 1, shift 0;
/// Gate: bias +2 so gates open near 0.88), conv/linear weights are
/// He-uniform, biases zero. Draw order equals slot declaration order.
pub fn init_params_for<T: Scalar>(store: &mut ParamStore<T>, graph: &Graph, rng: &mut Rng) {
    for (name, shape) in graph.param_slots() {
        if store.get(name).is_ok() {
            continue; // shared with an already-initialised graph
        }
        let t: Tensor<T> = if name.contains(".cond.") {
            if name.ends_with(".w") {
                Tensor::zeros(shape)
            } else if name.ends_with("scale.b") {
                Tensor::full(shape, T::one())
            } else if name.ends_with("gate.b") {
                Tensor::full(shape, T::from_f64(2.0))
            } else {
                Tensor::zeros(shape)
            }
        } else if name.ends_with(".b") {
            Tensor::zeros(shape)
        } else {
            let fan_in = match shape.len() {
                4 => shape[1] * 9,
                2 => shape[1],
                _ => shape.iter().product(),
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::from_f64(rng.uniform_in(-limit, limit))).collect();
            Tensor::new(shape, data).expect("init shape")
        };
        store.insert(name, t).expect("fresh parameter");
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A trained (or trainable) detector: config, parameters, and the cached
/// encoder/decoder graphs for single-pair inference.
pub struct Model {
    pub width: usize,
    pub height: usize,
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    enc: EncoderGraph,
    dec: DecoderGraph,
}

impl Model {
    pub fn new(width: usize, height: usize, cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate(width, height)?;
        let enc = encoder_graph(&cfg, width, height);
        let dec = decoder_graph(&cfg, width, height);
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        init_params_for(&mut params, &enc.graph, &mut rng);
        init_params_for(&mut params, &dec.graph, &mut rng);
        Ok(Model { width, height, cfg, params, enc, dec })
    }

    /// Rebuild a model around restored parameters (shapes must match the
    /// config's graphs).
    pub fn with_params(
        width: usize,
        height: usize,
        cfg: ModelConfig,
        params: ParamStore<f32>,
    ) -> Result<Model, ModelError> {
        let mut m = Model::new(width, height, cfg, 0)?;
        // Validate coverage by binding both graphs.
        params.bind(&m.enc.graph)?;
        params.bind(&m.dec.graph)?;
        m.params = params;
        Ok(m)
    }

    pub fn encoder(&self) -> &EncoderGraph {
        &self.enc
    }

    pub fn decoder(&self) -> &DecoderGraph {
        &self.dec
    }

    fn target_tensor(&self, target: &Heatmap) -> Result<Tensor<f32>, ModelError> {
        if target.width != self.width || target.height != self.height {
            return Err(ModelError::ShapeMismatch(format!(
                "target {}x{} vs model {}x{}",
                target.width, target.height, self.width, self.height
            )));
        }
        let data = target.data.iter().map(|&v| v as f32).collect();
        Ok(Tensor::new(&[1, self.height, self.width], data).expect("target dims"))
    }

    /// Encode one conditioning pair to a K-vector.
    pub fn encode(&self, image: &Tensor<f32>, target: &Heatmap) -> Result<Vec<f32>, ModelError> {
        let t = self.target_tensor(target)?;
        let params = self.params.bind(&self.enc.graph)?;
        let eval = self.enc.graph.forward(&[image.clone(), t], &params)?;
        Ok(eval.value(self.enc.embedding).data().to_vec())
    }

    /// Decode keypoint and segmentation logits for one view.
    pub fn decode(&self, image: &Tensor<f32>, c: &[f32]) -> Result<(Heatmap, Heatmap), ModelError> {
        if c.len() != self.cfg.embedding {
            return Err(ModelError::ShapeMismatch(format!(
                "embedding length {} vs K={}",
                c.len(),
                self.cfg.embedding
            )));
        }
        let emb = Tensor::new(&[self.cfg.embedding], c.to_vec()).expect("embedding dims");
        let params = self.params.bind(&self.dec.graph)?;
        let eval = self.dec.graph.forward(&[image.clone(), emb], &params)?;
        let to_heatmap = |v: Var| {
            let data = eval.value(v).data().iter().map(|&x| x as f64).collect();
            Heatmap::new(self.width, self.height, data).expect("logit dims")
        };
        Ok((to_heatmap(self.dec.kp), to_heatmap(self.dec.seg)))
    }

    /// Soft-argmax keypoint detection for one view.
    pub fn detect(&self, image: &Tensor<f32>, c: &[f32]) -> Result<(f64, f64), ModelError> {
        let (kp, _) = self.decode(image, c)?;
        Ok(crate::heatmap::soft_argmax(&kp))
    }
}

/// Arithmetic mean of embeddings; order-invariant by accumulation in the
/// element type itself (callers wanting 1e-12 invariance use f64).
pub fn aggregate<T: Scalar>(embeddings: &[Vec<T>]) -> Result<Vec<T>, ModelError> {
    let first = embeddings.first().ok_or(ModelError::EmptyInput)?;
    let k = first.len();
    if embeddings.iter().any(|e| e.len() != k) {
        return Err(ModelError::ShapeMismatch("embedding lengths differ".into()));
    }
    let n = T::from_f64(embeddings.len() as f64);
    let mut out = vec![T::zero(); k];
    for e in embeddings {
        for (o, &v) in out.iter_mut().zip(e) {
            *o = *o + v;
        }
    }
    for o in &mut out {
        *o = *o / n;
    }
    Ok(out)
}
