//! Keypoint heatmaps: Gaussian targets, probabilistic readout, and the KL
//! objective the detector trains against.
//!
//! Convention: a pixel coordinate is `(u, v)` with `u` the column in
//! `[0, width)` and `v` the row in `[0, height)`; data is stored row-major.
//! Values are `f64` here — this module doubles as the high-precision oracle
//! path for metrics, while the training graphs keep their own f32 tensors.

use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense single-channel map over the image grid. Whether the values are
/// activations (e.g. a Gaussian target, peak 1) or unnormalised logits is a
/// convention of the operation consuming it; see each function's docs.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` values.
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, HeatmapError> {
        if width == 0 || height == 0 {
            return Err(HeatmapError::InvalidParam("zero-sized heatmap".into()));
        }
        if data.len() != width * height {
            return Err(HeatmapError::ShapeMismatch(format!(
                "expected {} values for {}x{}, got {}",
                width * height,
                width,
                height,
                data.len()
            )));
        }
        Ok(Heatmap { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Heatmap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn at_mut(&mut self, u: usize, v: usize) -> &mut f64 {
        &mut self.data[v * self.width + u]
    }

    /// Elementwise natural log, mapping zeros to `-inf`. Turns a target
    /// activation map into the logits whose softmax reproduces it exactly.
    pub fn ln(&self) -> Heatmap {
        Heatmap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&x| x.ln()).collect(),
        }
    }

    /// 8-bit binary PGM (`P5`), max-scaled so the peak maps to 255. An
    /// all-zero (or non-positive) map writes as all-black rather than erroring.
    pub fn write_pgm(&self, path: &Path) -> Result<(), HeatmapError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let peak = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&x| (x.max(0.0) * scale).round().clamp(0.0, 255.0) as u8)
            .collect();
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// Gaussian target `t(u, v) = exp(-((u-cu)^2 + (v-cv)^2) / (2 sigma^2))`,
/// unnormalised (peak 1 when the centre falls on a pixel). The centre may lie
/// off-grid or outside the image; values just decay accordingly.
pub fn make_target(
    width: usize,
    height: usize,
    center: (f64, f64),
    sigma: f64,
) -> Result<Heatmap, HeatmapError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(HeatmapError::InvalidParam(format!("sigma must be positive, got {sigma}")));
    }
    if width == 0 || height == 0 {
        return Err(HeatmapError::InvalidParam("zero-sized heatmap".into()));
    }
    let (cu, cv) = center;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(width * height);
    for v in 0..height {
        let dv = v as f64 - cv;
        for u in 0..width {
            let du = u as f64 - cu;
            data.push((-(du * du + dv * dv) * inv).exp());
        }
    }
    Ok(Heatmap { width, height, data })
}

/// Softmax-expectation readout of a *logit* map: returns the expected pixel
/// coordinate `(u, v)` under `softmax(logits)`. Uniform logits give the image
/// centre `((w-1)/2, (h-1)/2)`. Invariant to adding a constant to all logits.
pub fn soft_argmax(logits: &Heatmap) -> (f64, f64) {
    let max = logits
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut eu = 0.0;
    let mut ev = 0.0;
    for v in 0..logits.height {
        let row = &logits.data[v * logits.width..(v + 1) * logits.width];
        for (u, &l) in row.iter().enumerate() {
            let p = (l - max).exp();
            sum += p;
            eu += p * u as f64;
            ev += p * v as f64;
        }
    }
    (eu / sum, ev / sum)
}

/// Spatial spread of a *logit* map under softmax: `Var(u) + Var(v)` of the
/// pixel coordinate, i.e. the trace of the 2x2 spatial covariance. Near zero
/// for a delta peak, `(w^2 - 1)/12 + (h^2 - 1)/12` for uniform logits, and
/// about `2 sigma^2` for a Gaussian peak well inside the image.
pub fn softmax_covariance_trace(logits: &Heatmap) -> f64 {
    let (mu, mv) = soft_argmax(logits);
    let max = logits
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut acc = 0.0;
    for v in 0..logits.height {
        let row = &logits.data[v * logits.width..(v + 1) * logits.width];
        for (u, &l) in row.iter().enumerate() {
            let p = (l - max).exp();
            sum += p;
            let (du, dv) = (u as f64 - mu, v as f64 - mv);
            acc += p * (du * du + dv * dv);
        }
    }
    acc / sum
}

/// KL divergence `KL(t-hat || softmax(logits))` where `t-hat` is `target`
/// normalised to sum 1 internally. Zero-valued target pixels contribute
/// nothing (the `0 ln 0 = 0` convention). Non-negative, and zero exactly when
/// the softmax reproduces the normalised target.
pub fn kl_loss(target: &Heatmap, logits: &Heatmap) -> Result<f64, HeatmapError> {
    if target.width != logits.width || target.height != logits.height {
        return Err(HeatmapError::ShapeMismatch(format!(
            "target {}x{} vs logits {}x{}",
            target.width, target.height, logits.width, logits.height
        )));
    }
    let total: f64 = target.data.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(HeatmapError::InvalidParam(format!(
            "target mass must be positive and finite, got {total}"
        )));
    }
    let max = logits
        .data
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z: f64 = logits.data.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    let mut kl = 0.0;
    for (&t, &l) in target.data.iter().zip(&logits.data) {
        // Guard on the normalised value: a subnormal target entry can divide
        // down to exactly zero, and 0*ln(0) must stay out of the sum.
        let q = t / total;
        if q > 0.0 {
            kl += q * (q.ln() - (l - log_z));
        }
    }
    // Clamp the tiny negative residue float summation can leave behind, but
    // let non-finite values through so poisoned logits surface instead of
    // reading as a perfect score.
    Ok(if kl.is_finite() { kl.max(0.0) } else { kl })
}

/// Root-mean-square Euclidean pixel error over prediction/ground-truth pairs.
pub fn rms_pixel_error(
    predicted: &[(f64, f64)],
    truth: &[(f64, f64)],
) -> Result<f64, HeatmapError> {
    if predicted.is_empty() {
        return Err(HeatmapError::EmptyInput);
    }
    if predicted.len() != truth.len() {
        return Err(HeatmapError::ShapeMismatch(format!(
            "{} predictions vs {} ground-truth points",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    for (&(pu, pv), &(tu, tv)) in predicted.iter().zip(truth) {
        let (du, dv) = (pu - tu, pv - tv);
        sum += du * du + dv * dv;
    }
    Ok((sum / predicted.len() as f64).sqrt())
}
