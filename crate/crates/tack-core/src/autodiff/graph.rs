//! Static compute graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once per network configuration: builder methods
//! append nodes (shape-checked immediately, so a malformed net fails at
//! construction, not mid-training) and can only reference earlier nodes,
//! making the graph acyclic by construction. [`Graph::forward`] evaluates all
//! nodes in insertion order; [`backward`] walks the same order in reverse.
//!
//! The primitive set is exactly what the detector networks need: 3x3 convs
//! (stride 1/2, same padding), nearest x2 upsampling, relu/sigmoid, linear,
//! add/mul/scale, channel concat, spatial max, pixel softmax, FiLM-style
//! scale-and-shift, mean/sum reductions, and two fused loss heads
//! (softmax-KL and mean-BCE) that keep the log-sum-exp numerics stable.

use super::kernels;
use super::tensor::{AutodiffError, Scalar, Tensor};

/// Handle to a graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input(usize),
    Param(usize),
    Conv2d { stride: usize },
    Upsample2,
    Relu,
    Sigmoid,
    Linear,
    Add,
    Mul,
    Scale(f64),
    ConcatC,
    BroadcastSpatial,
    SpatialMax,
    PixelSoftmax,
    ScaleShift,
    Mean,
    Sum,
    KlFromLogits,
    BceFromLogits,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_slots: Vec<(String, Vec<usize>)>,
    param_slots: Vec<(String, Vec<usize>)>,
}

fn err(node: usize, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch { node, msg: msg.into() }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Declared (name, shape) input slots, in declaration order.
    pub fn input_slots(&self) -> &[(String, Vec<usize>)] {
        &self.input_slots
    }

    /// Declared (name, shape) parameter slots, in declaration order.
    pub fn param_slots(&self) -> &[(String, Vec<usize>)] {
        &self.param_slots
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Vec<usize>) -> Var {
        self.nodes.push(Node { op, inputs, shape });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Var {
        assert!(
            !self.input_slots.iter().any(|(n, _)| n == name),
            "duplicate input slot '{name}'"
        );
        let slot = self.input_slots.len();
        self.input_slots.push((name.to_string(), shape.to_vec()));
        self.push(Op::Input(slot), vec![], shape.to_vec())
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Var {
        assert!(
            !self.param_slots.iter().any(|(n, _)| n == name),
            "duplicate param slot '{name}'"
        );
        let slot = self.param_slots.len();
        self.param_slots.push((name.to_string(), shape.to_vec()));
        self.push(Op::Param(slot), vec![], shape.to_vec())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        if stride != 1 && stride != 2 {
            return Err(err(id, format!("conv stride must be 1 or 2, got {stride}")));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 {
            return Err(err(id, format!("conv input must be (c,h,w), got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(err(id, format!("conv weight must be (co,ci,3,3), got {ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(err(id, format!("conv ci mismatch: weight {ws:?} vs input {xs:?}")));
        }
        if bs != [ws[0]] {
            return Err(err(id, format!("conv bias must be ({},), got {bs:?}", ws[0])));
        }
        let shape = vec![
            ws[0],
            kernels::conv_out_dim(xs[1], stride),
            kernels::conv_out_dim(xs[2], stride),
        ];
        Ok(self.push(Op::Conv2d { stride }, vec![x.0, w.0, b.0], shape))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(err(id, format!("upsample input must be (c,h,w), got {xs:?}")));
        }
        let shape = vec![xs[0], 2 * xs[1], 2 * xs[2]];
        Ok(self.push(Op::Upsample2, vec![x.0], shape))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu, vec![x.0], shape)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid, vec![x.0], shape)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(err(
                id,
                format!("linear wants x(f) w(o,f) b(o), got x{xs:?} w{ws:?} b{bs:?}"),
            ));
        }
        Ok(self.push(Op::Linear, vec![x.0, w.0, b.0], vec![ws[0]]))
    }

    fn same_shape_binary(&mut self, op: Op, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        if self.shape(a) != self.shape(b) {
            return Err(err(
                id,
                format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, vec![a.0, b.0], shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape_binary(Op::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape_binary(Op::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(c), vec![x.0], shape)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(err(id, format!("concat wants matching (c,h,w), got {sa:?} vs {sb:?}")));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        Ok(self.push(Op::ConcatC, vec![a.0, b.0], shape))
    }

    /// Tile a (c,) vector over a (c,h,w) grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 {
            return Err(err(id, format!("broadcast input must be rank 1, got {xs:?}")));
        }
        Ok(self.push(Op::BroadcastSpatial, vec![x.0], vec![xs[0], h, w]))
    }

    /// Per-channel max over the spatial grid: (c,h,w) -> (c,).
    pub fn spatial_max(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(err(id, format!("spatial_max input must be (c,h,w), got {xs:?}")));
        }
        Ok(self.push(Op::SpatialMax, vec![x.0], vec![xs[0]]))
    }

    /// Softmax over every element of the tensor (an image's pixels sum to 1).
    pub fn pixel_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        if self.shape(x).is_empty() {
            return Err(err(id, "softmax of a scalar is ill-posed"));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::PixelSoftmax, vec![x.0], shape))
    }

    /// FiLM application: `y[c,i,j] = x[c,i,j] * scale[c] + shift[c]`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        let xs = self.shape(x).to_vec();
        let ss = self.shape(scale).to_vec();
        let ts = self.shape(shift).to_vec();
        if xs.len() != 3 || ss != [xs[0]] || ts != [xs[0]] {
            return Err(err(
                id,
                format!("scale_shift wants x(c,h,w) scale(c) shift(c), got {xs:?} {ss:?} {ts:?}"),
            ));
        }
        Ok(self.push(Op::ScaleShift, vec![x.0, scale.0, shift.0], xs))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean, vec![x.0], vec![])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum, vec![x.0], vec![])
    }

    /// `KL(normalize(target) || softmax(logits))`, summed over elements.
    /// `target` holds non-negative activations (normalised internally).
    pub fn kl_from_logits(&mut self, target: Var, logits: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        if self.shape(target) != self.shape(logits) || self.shape(target).is_empty() {
            return Err(err(
                id,
                format!(
                    "kl wants matching non-scalar shapes, got {:?} vs {:?}",
                    self.shape(target),
                    self.shape(logits)
                ),
            ));
        }
        Ok(self.push(Op::KlFromLogits, vec![target.0, logits.0], vec![]))
    }

    /// Mean binary cross-entropy of `logits` against `mask` (values in [0,1]),
    /// computed in the numerically stable max-form.
    pub fn bce_from_logits(&mut self, mask: Var, logits: Var) -> Result<Var, AutodiffError> {
        let id = self.nodes.len();
        if self.shape(mask) != self.shape(logits) || self.shape(mask).is_empty() {
            return Err(err(
                id,
                format!(
                    "bce wants matching non-scalar shapes, got {:?} vs {:?}",
                    self.shape(mask),
                    self.shape(logits)
                ),
            ));
        }
        Ok(self.push(Op::BceFromLogits, vec![mask.0, logits.0], vec![]))
    }

    /// Evaluate every node. `inputs` and `params` are matched positionally to
    /// the declared slots (see [`Graph::input_slots`] / [`Graph::param_slots`]).
    pub fn forward<T: Scalar>(
        &self,
        inputs: &[Tensor<T>],
        params: &[Tensor<T>],
    ) -> Result<Evaluation<T>, AutodiffError> {
        if inputs.len() != self.input_slots.len() {
            return Err(err(
                usize::MAX,
                format!("expected {} inputs, got {}", self.input_slots.len(), inputs.len()),
            ));
        }
        if params.len() != self.param_slots.len() {
            return Err(err(
                usize::MAX,
                format!("expected {} params, got {}", self.param_slots.len(), params.len()),
            ));
        }
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(slot) => {
                    let t = &inputs[*slot];
                    if t.shape() != node.shape {
                        return Err(err(
                            id,
                            format!(
                                "input '{}' expects shape {:?}, got {:?}",
                                self.input_slots[*slot].0,
                                node.shape,
                                t.shape()
                            ),
                        ));
                    }
                    t.clone()
                }
                Op::Param(slot) => {
                    let t = &params[*slot];
                    if t.shape() != node.shape {
                        return Err(err(
                            id,
                            format!(
                                "param '{}' expects shape {:?}, got {:?}",
                                self.param_slots[*slot].0,
                                node.shape,
                                t.shape()
                            ),
                        ));
                    }
                    t.clone()
                }
                Op::Conv2d { stride } => {
                    let x = &values[node.inputs[0]];
                    let w = &values[node.inputs[1]];
                    let b = &values[node.inputs[2]];
                    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let co = w.shape()[0];
                    let mut out = Tensor::zeros(&node.shape);
                    kernels::conv2d_forward(
                        x.data(),
                        ci,
                        h,
                        wd,
                        w.data(),
                        b.data(),
                        co,
                        *stride,
                        out.data_mut(),
                    );
                    out
                }
                Op::Upsample2 => {
                    let x = &values[node.inputs[0]];
                    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let mut out = Tensor::zeros(&node.shape);
                    kernels::upsample2_forward(x.data(), c, h, wd, out.data_mut());
                    out
                }
                Op::Relu => {
                    let x = &values[node.inputs[0]];
                    let mut out = x.clone();
                    for v in out.data_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                    out
                }
                Op::Sigmoid => {
                    let x = &values[node.inputs[0]];
                    let mut out = x.clone();
                    let one = T::one();
                    for v in out.data_mut() {
                        *v = one / (one + (-*v).exp());
                    }
                    out
                }
                Op::Linear => {
                    let x = &values[node.inputs[0]];
                    let w = &values[node.inputs[1]];
                    let b = &values[node.inputs[2]];
                    let (o, f) = (w.shape()[0], w.shape()[1]);
                    let mut out = Tensor::zeros(&node.shape);
                    kernels::linear_forward(x.data(), w.data(), b.data(), o, f, out.data_mut());
                    out
                }
                Op::Add => {
                    let a = &values[node.inputs[0]];
                    let b = &values[node.inputs[1]];
                    let mut out = a.clone();
                    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                        *o = *o + bv;
                    }
                    out
                }
                Op::Mul => {
                    let a = &values[node.inputs[0]];
                    let b = &values[node.inputs[1]];
                    let mut out = a.clone();
                    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                        *o = *o * bv;
                    }
                    out
                }
                Op::Scale(c) => {
                    let x = &values[node.inputs[0]];
                    let c = T::from_f64(*c);
                    let mut out = x.clone();
                    for v in out.data_mut() {
                        *v = *v * c;
                    }
                    out
                }
                Op::ConcatC => {
                    let a = &values[node.inputs[0]];
                    let b = &values[node.inputs[1]];
                    let mut data = Vec::with_capacity(a.numel() + b.numel());
                    data.extend_from_slice(a.data());
                    data.extend_from_slice(b.data());
                    Tensor::new(&node.shape, data).expect("concat shape")
                }
                Op::BroadcastSpatial => {
                    let x = &values[node.inputs[0]];
                    let (h, w) = (node.shape[1], node.shape[2]);
                    let mut data = Vec::with_capacity(x.numel() * h * w);
                    for &v in x.data() {
                        data.extend(std::iter::repeat(v).take(h * w));
                    }
                    Tensor::new(&node.shape, data).expect("broadcast shape")
                }
                Op::SpatialMax => {
                    let x = &values[node.inputs[0]];
                    let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
                    let mut data = Vec::with_capacity(c);
                    for ch in 0..c {
                        let plane = &x.data()[ch * hw..(ch + 1) * hw];
                        let mut m = plane[0];
                        for &v in &plane[1..] {
                            if v > m {
                                m = v;
                            }
                        }
                        data.push(m);
                    }
                    Tensor::new(&node.shape, data).expect("spatial max shape")
                }
                Op::PixelSoftmax => {
                    let x = &values[node.inputs[0]];
                    let mut m = x.data()[0];
                    for &v in &x.data()[1..] {
                        if v > m {
                            m = v;
                        }
                    }
                    let mut out = x.clone();
                    let mut z = T::zero();
                    for v in out.data_mut() {
                        *v = (*v - m).exp();
                        z = z + *v;
                    }
                    for v in out.data_mut() {
                        *v = *v / z;
                    }
                    out
                }
                Op::ScaleShift => {
                    let x = &values[node.inputs[0]];
                    let s = &values[node.inputs[1]];
                    let t = &values[node.inputs[2]];
                    let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
                    let mut out = x.clone();
                    for ch in 0..c {
                        let (sv, tv) = (s.data()[ch], t.data()[ch]);
                        for v in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
                            *v = *v * sv + tv;
                        }
                    }
                    out
                }
                Op::Mean => {
                    let x = &values[node.inputs[0]];
                    let mut acc = T::zero();
                    for &v in x.data() {
                        acc = acc + v;
                    }
                    Tensor::scalar(acc / T::from_f64(x.numel() as f64))
                }
                Op::Sum => {
                    let x = &values[node.inputs[0]];
                    let mut acc = T::zero();
                    for &v in x.data() {
                        acc = acc + v;
                    }
                    Tensor::scalar(acc)
                }
                Op::KlFromLogits => {
                    let q = &values[node.inputs[0]];
                    let l = &values[node.inputs[1]];
                    let (mass, lse) = kl_prelude(q, l);
                    if !(mass > T::zero()) || !mass.is_finite() {
                        return Err(AutodiffError::Numeric {
                            node: id,
                            msg: "kl target has non-positive or non-finite mass".into(),
                        });
                    }
                    let mut kl = T::zero();
                    for (&qv, &lv) in q.data().iter().zip(l.data()) {
                        // Guard on the normalised value: a subnormal target
                        // entry can divide down to exactly zero, and 0*ln(0)
                        // must stay out of the sum.
                        let qh = qv / mass;
                        if qh > T::zero() {
                            kl = kl + qh * (qh.ln() - (lv - lse));
                        }
                    }
                    // Rounding can leave the sum a hair negative; clamp that,
                    // but let non-finite values through so poisoned inputs
                    // surface instead of reading as a perfect score.
                    let kl = if kl.is_finite() { kl.max(T::zero()) } else { kl };
                    Tensor::scalar(kl)
                }
                Op::BceFromLogits => {
                    let m = &values[node.inputs[0]];
                    let l = &values[node.inputs[1]];
                    let mut acc = T::zero();
                    for (&mv, &lv) in m.data().iter().zip(l.data()) {
                        // max(l,0) - l*m + ln(1 + exp(-|l|))
                        acc = acc + lv.max(T::zero()) - lv * mv + (-lv.abs()).exp().ln_1p();
                    }
                    Tensor::scalar(acc / T::from_f64(m.numel() as f64))
                }
            };
            values.push(value);
        }
        Ok(Evaluation { values })
    }
}

/// Target mass and log-sum-exp of the logits — shared by KL forward/backward.
fn kl_prelude<T: Scalar>(q: &Tensor<T>, l: &Tensor<T>) -> (T, T) {
    let mut mass = T::zero();
    for &v in q.data() {
        mass = mass + v;
    }
    let mut m = l.data()[0];
    for &v in &l.data()[1..] {
        if v > m {
            m = v;
        }
    }
    let mut z = T::zero();
    for &v in l.data() {
        z = z + (v - m).exp();
    }
    (mass, m + z.ln())
}

/// All node values from one forward pass.
#[derive(Debug)]
pub struct Evaluation<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }
}

/// Gradients of the loss w.r.t. every declared input and parameter slot
/// (zeros where the loss does not depend on a slot).
#[derive(Debug)]
pub struct Gradients<T> {
    pub inputs: Vec<Tensor<T>>,
    pub params: Vec<Tensor<T>>,
}

/// Reverse-mode gradients of the scalar `loss` node.
pub fn backward<T: Scalar>(
    graph: &Graph,
    eval: &Evaluation<T>,
    loss: Var,
) -> Result<Gradients<T>, AutodiffError> {
    if !graph.nodes[loss.0].shape.is_empty() {
        return Err(AutodiffError::NonScalarLoss);
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
    grads[loss.0] = Some(Tensor::scalar(T::one()));

    for id in (0..=loss.0).rev() {
        if grads[id].is_none() {
            continue;
        }
        // Inputs of node `id` always precede it, so split the borrow there.
        let (head, tail) = grads.split_at_mut(id);
        let gout = tail[0].as_ref().unwrap();
        let node = &graph.nodes[id];
        let val = |v: usize| &eval.values[v];
        let mut acc = |idx: usize, shape: &[usize], f: &mut dyn FnMut(&mut [T])| {
            let slot = head[idx].get_or_insert_with(|| Tensor::zeros(shape));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Input(_) | Op::Param(_) => {}
            Op::Conv2d { stride } => {
                let (xi, wi, bi) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let x = val(xi);
                let w = val(wi);
                let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let co = w.shape()[0];
                // Accumulate into fresh buffers, then add into the slots, so
                // the kernel only sees plain slices.
                let mut dx = vec![T::zero(); x.numel()];
                let mut dw = vec![T::zero(); w.numel()];
                let mut db = vec![T::zero(); co];
                kernels::conv2d_backward(
                    x.data(),
                    ci,
                    h,
                    wd,
                    w.data(),
                    co,
                    *stride,
                    gout.data(),
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                acc(xi, x.shape(), &mut |s| add_into(s, &dx));
                acc(wi, w.shape(), &mut |s| add_into(s, &dw));
                acc(bi, &[co], &mut |s| add_into(s, &db));
            }
            Op::Upsample2 => {
                let xi = node.inputs[0];
                let x = val(xi);
                let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = vec![T::zero(); x.numel()];
                kernels::upsample2_backward(gout.data(), c, h, wd, &mut dx);
                acc(xi, x.shape(), &mut |s| add_into(s, &dx));
            }
            Op::Relu => {
                let xi = node.inputs[0];
                let x = val(xi);
                let xd = x.data();
                let g = gout.data();
                acc(xi, x.shape(), &mut |s| {
                    for i in 0..s.len() {
                        if xd[i] > T::zero() {
                            s[i] = s[i] + g[i];
                        }
                    }
                });
            }
            Op::Sigmoid => {
                let xi = node.inputs[0];
                let y = val(id).data();
                let g = gout.data();
                let shape = graph.nodes[xi].shape.clone();
                acc(xi, &shape, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Linear => {
                let (xi, wi, bi) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let x = val(xi);
                let w = val(wi);
                let (o, f) = (w.shape()[0], w.shape()[1]);
                let mut dx = vec![T::zero(); f];
                let mut dw = vec![T::zero(); o * f];
                let mut db = vec![T::zero(); o];
                kernels::linear_backward(
                    x.data(),
                    w.data(),
                    o,
                    f,
                    gout.data(),
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                acc(xi, x.shape(), &mut |s| add_into(s, &dx));
                acc(wi, w.shape(), &mut |s| add_into(s, &dw));
                acc(bi, &[o], &mut |s| add_into(s, &db));
            }
            Op::Add => {
                let g = gout.data();
                for &i in &node.inputs {
                    let shape = graph.nodes[i].shape.clone();
                    acc(i, &shape, &mut |s| add_into(s, g));
                }
            }
            Op::Mul => {
                let (ai, bi) = (node.inputs[0], node.inputs[1]);
                let a = val(ai).data();
                let b = val(bi).data();
                let g = gout.data();
                let shape = graph.nodes[ai].shape.clone();
                acc(ai, &shape, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * b[i];
                    }
                });
                acc(bi, &shape, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * a[i];
                    }
                });
            }
            Op::Scale(c) => {
                let xi = node.inputs[0];
                let c = T::from_f64(*c);
                let g = gout.data();
                let shape = graph.nodes[xi].shape.clone();
                acc(xi, &shape, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + c * g[i];
                    }
                });
            }
            Op::ConcatC => {
                let (ai, bi) = (node.inputs[0], node.inputs[1]);
                let na = graph.nodes[ai].shape.iter().product::<usize>();
                let g = gout.data();
                let sa = graph.nodes[ai].shape.clone();
                let sb = graph.nodes[bi].shape.clone();
                acc(ai, &sa, &mut |s| add_into(s, &g[..na]));
                acc(bi, &sb, &mut |s| add_into(s, &g[na..]));
            }
            Op::BroadcastSpatial => {
                let xi = node.inputs[0];
                let (h, w) = (node.shape[1], node.shape[2]);
                let hw = h * w;
                let g = gout.data();
                let shape = graph.nodes[xi].shape.clone();
                acc(xi, &shape, &mut |s| {
                    for (c, sv) in s.iter_mut().enumerate() {
                        let mut a = T::zero();
                        for &gv in &g[c * hw..(c + 1) * hw] {
                            a = a + gv;
                        }
                        *sv = *sv + a;
                    }
                });
            }
            Op::SpatialMax => {
                let xi = node.inputs[0];
                let x = val(xi);
                let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
                let g = gout.data();
                let xd = x.data();
                acc(xi, x.shape(), &mut |s| {
                    for ch in 0..c {
                        let plane = &xd[ch * hw..(ch + 1) * hw];
                        // First max in scan order, matching forward.
                        let mut arg = 0;
                        for (i, &v) in plane.iter().enumerate() {
                            if v > plane[arg] {
                                arg = i;
                            }
                        }
                        s[ch * hw + arg] = s[ch * hw + arg] + g[ch];
                    }
                });
            }
            Op::PixelSoftmax => {
                let xi = node.inputs[0];
                let y = val(id).data();
                let g = gout.data();
                let mut dot = T::zero();
                for i in 0..y.len() {
                    dot = dot + g[i] * y[i];
                }
                let shape = graph.nodes[xi].shape.clone();
                acc(xi, &shape, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + y[i] * (g[i] - dot);
                    }
                });
            }
            Op::ScaleShift => {
                let (xi, si, ti) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let x = val(xi);
                let sc = val(si);
                let (c, hw) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
                let g = gout.data();
                let xd = x.data();
                let sd = sc.data();
                acc(xi, x.shape(), &mut |s| {
                    for ch in 0..c {
                        let sv = sd[ch];
                        for i in ch * hw..(ch + 1) * hw {
                            s[i] = s[i] + g[i] * sv;
                        }
                    }
                });
                acc(si, &[c], &mut |s| {
                    for ch in 0..c {
                        let mut a = T::zero();
                        for i in ch * hw..(ch + 1) * hw {
                            a = a + g[i] * xd[i];
                        }
                        s[ch] = s[ch] + a;
                    }
                });
                acc(ti, &[c], &mut |s| {
                    for ch in 0..c {
                        let mut a = T::zero();
                        for i in ch * hw..(ch + 1) * hw {
                            a = a + g[i];
                        }
                        s[ch] = s[ch] + a;
                    }
                });
            }
            Op::Mean => {
                let xi = node.inputs[0];
                let shape = graph.nodes[xi].shape.clone();
                let n: usize = shape.iter().product();
                let gv = gout.data()[0] / T::from_f64(n as f64);
                acc(xi, &shape, &mut |s| {
                    for v in s.iter_mut() {
                        *v = *v + gv;
                    }
                });
            }
            Op::Sum => {
                let xi = node.inputs[0];
                let shape = graph.nodes[xi].shape.clone();
                let gv = gout.data()[0];
                acc(xi, &shape, &mut |s| {
                    for v in s.iter_mut() {
                        *v = *v + gv;
                    }
                });
            }
            Op::KlFromLogits => {
                let (qi, li) = (node.inputs[0], node.inputs[1]);
                let q = val(qi);
                let l = val(li);
                let loss_val = val(id).data()[0];
                let (mass, lse) = kl_prelude(q, l);
                let gv = gout.data()[0];
                let qd = q.data();
                let ld = l.data();
                // d/dlogits = softmax(l) - normalise(q)
                acc(li, l.shape(), &mut |s| {
                    for i in 0..s.len() {
                        let p = (ld[i] - lse).exp();
                        let qh = qd[i] / mass;
                        s[i] = s[i] + gv * (p - qh);
                    }
                });
                // d/dtarget_j = (ln q_hat_j - logprob_j - L) / mass (0 at q=0)
                acc(qi, q.shape(), &mut |s| {
                    for i in 0..s.len() {
                        let qh = qd[i] / mass;
                        if qh > T::zero() {
                            s[i] = s[i] + gv * (qh.ln() - (ld[i] - lse) - loss_val) / mass;
                        }
                    }
                });
            }
            Op::BceFromLogits => {
                let (mi, li) = (node.inputs[0], node.inputs[1]);
                let m = val(mi);
                let l = val(li);
                let n = T::from_f64(m.numel() as f64);
                let gv = gout.data()[0];
                let md = m.data();
                let ld = l.data();
                acc(li, l.shape(), &mut |s| {
                    let one = T::one();
                    for i in 0..s.len() {
                        let sig = one / (one + (-ld[i]).exp());
                        s[i] = s[i] + gv * (sig - md[i]) / n;
                    }
                });
                acc(mi, m.shape(), &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] - gv * ld[i] / n;
                    }
                });
            }
        }
    }

    let mut input_grads = Vec::with_capacity(graph.input_slots.len());
    let mut param_grads = Vec::with_capacity(graph.param_slots.len());
    for (id, node) in graph.nodes.iter().enumerate() {
        match node.op {
            Op::Input(_) => input_grads.push((id, node.shape.clone())),
            Op::Param(_) => param_grads.push((id, node.shape.clone())),
            _ => {}
        }
    }
    let take = |pairs: Vec<(usize, Vec<usize>)>, grads: &mut Vec<Option<Tensor<T>>>| {
        pairs
            .into_iter()
            .map(|(id, shape)| grads[id].take().unwrap_or_else(|| Tensor::zeros(&shape)))
            .collect()
    };
    Ok(Gradients {
        inputs: take(input_grads, &mut grads),
        params: take(param_grads, &mut grads),
    })
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn relu_forward_clips_negatives() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let y = g.relu(x);
        let eval = g
            .forward(&[Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()], &[])
            .unwrap();
        assert_eq!(eval.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel_via_graph() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 4, 4]);
        let w = g.param("w", &[1, 1, 3, 3]);
        let b = g.param("b", &[1]);
        let y = g.conv2d(x, w, b, 1).unwrap();
        let mut wt = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        wt.data_mut()[4] = 1.0;
        let xs: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let eval = g
            .forward(
                &[Tensor::new(&[1, 4, 4], xs.clone()).unwrap()],
                &[wt, Tensor::zeros(&[1])],
            )
            .unwrap();
        assert_eq!(eval.value(y).data(), &xs[..]);
    }

    #[test]
    fn two_layer_linear_matches_matrix_oracle() {
        // Oracle: nalgebra matrix products.
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let x = g.input("x", &[4]);
        let w1 = g.param("w1", &[3, 4]);
        let b1 = g.param("b1", &[3]);
        let w2 = g.param("w2", &[2, 3]);
        let b2 = g.param("b2", &[2]);
        let h = g.linear(x, w1, b1).unwrap();
        let y = g.linear(h, w2, b2).unwrap();

        let rand_t = |rng: &mut Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
        };
        let (xv, w1v, b1v, w2v, b2v) = (
            rand_t(&mut rng, &[4]),
            rand_t(&mut rng, &[3, 4]),
            rand_t(&mut rng, &[3]),
            rand_t(&mut rng, &[2, 3]),
            rand_t(&mut rng, &[2]),
        );
        let eval = g
            .forward(&[xv.clone()], &[w1v.clone(), b1v.clone(), w2v.clone(), b2v.clone()])
            .unwrap();

        let xm = nalgebra::DVector::from_vec(xv.data().to_vec());
        let w1m = nalgebra::DMatrix::from_row_slice(3, 4, w1v.data());
        let w2m = nalgebra::DMatrix::from_row_slice(2, 3, w2v.data());
        let b1m = nalgebra::DVector::from_vec(b1v.data().to_vec());
        let b2m = nalgebra::DVector::from_vec(b2v.data().to_vec());
        let expect = &w2m * (&w1m * xm + b1m) + b2m;
        for (a, b) in eval.value(y).data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut g = Graph::new();
        let x = g.input("x", &[3, 4]);
        let l = g.mean(x);
        let eval = g.forward(&[Tensor::full(&[3, 4], 2.0_f64)], &[]).unwrap();
        let grads = backward(&g, &eval, l).unwrap();
        for &v in grads.inputs[0].data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_relu_gradient_is_step_function() {
        let mut g = Graph::new();
        let x = g.input("x", &[4]);
        let r = g.relu(x);
        let l = g.sum(r);
        let eval = g
            .forward(&[Tensor::new(&[4], vec![-2.0, 3.0, -0.5, 1.0]).unwrap()], &[])
            .unwrap();
        let grads = backward(&g, &eval, l).unwrap();
        assert_eq!(grads.inputs[0].data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let y = g.relu(x);
        let eval = g.forward(&[Tensor::zeros(&[2])], &[]).unwrap();
        assert!(matches!(
            backward::<f64>(&g, &eval, y),
            Err(AutodiffError::NonScalarLoss)
        ));
    }

    #[test]
    fn forward_rejects_wrong_input_shape_with_node_id() {
        let mut g = Graph::new();
        let _ = g.input("x", &[2, 2]);
        let got = g.forward::<f64>(&[Tensor::zeros(&[3])], &[]);
        match got {
            Err(AutodiffError::ShapeMismatch { node, .. }) => assert_eq!(node, 0),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn pixel_softmax_sums_to_one() {
        let mut rng = Rng::new(9);
        let mut g = Graph::new();
        let x = g.input("x", &[1, 6, 5]);
        let y = g.pixel_softmax(x).unwrap();
        for _ in 0..20 {
            let t = Tensor::new(&[1, 6, 5], (0..30).map(|_| 4.0 * rng.normal()).collect()).unwrap();
            let eval = g.forward(&[t], &[]).unwrap();
            let s: f64 = eval.value(y).data().iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "sum {s}");
        }
    }

    #[test]
    fn gradient_linearity_in_loss_combination() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let mut rng = Rng::new(12);
        let (a, b) = (0.7, -1.3);
        let build = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let x = g.input("x", &[5]);
            let r = g.relu(x);
            let l1 = g.sum(r);
            let sg = g.sigmoid(x);
            let l2 = g.mean(sg);
            let l1s = g.scale(l1, wa);
            let l2s = g.scale(l2, wb);
            let l = g.add(l1s, l2s).unwrap();
            (g, l)
        };
        let xv = Tensor::new(&[5], (0..5).map(|_| rng.normal() + 0.3).collect::<Vec<f64>>()).unwrap();

        let (g_ab, l_ab) = build(a, b);
        let eval = g_ab.forward(&[xv.clone()], &[]).unwrap();
        let combined = backward(&g_ab, &eval, l_ab).unwrap();

        let (g1, l1) = build(1.0, 0.0);
        let e1 = g1.forward(&[xv.clone()], &[]).unwrap();
        let g1v = backward(&g1, &e1, l1).unwrap();
        let (g2, l2) = build(0.0, 1.0);
        let e2 = g2.forward(&[xv.clone()], &[]).unwrap();
        let g2v = backward(&g2, &e2, l2).unwrap();

        for i in 0..5 {
            let expect = a * g1v.inputs[0].data()[i] + b * g2v.inputs[0].data()[i];
            assert!((combined.inputs[0].data()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let mut rng = Rng::new(7);
        let mut g = Graph::new();
        let x = g.input("x", &[2, 6, 6]);
        let w = g.param("w", &[3, 2, 3, 3]);
        let b = g.param("b", &[3]);
        let c = g.conv2d(x, w, b, 2).unwrap();
        let r = g.relu(c);
        let l = g.mean(r);
        let mk = |rng: &mut Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::<f32>::new(
                shape,
                (0..n).map(|_| rng.normal() as f32).collect(),
            )
            .unwrap()
        };
        let xv = mk(&mut rng, &[2, 6, 6]);
        let wv = mk(&mut rng, &[3, 2, 3, 3]);
        let bv = mk(&mut rng, &[3]);
        let e1 = g.forward(&[xv.clone()], &[wv.clone(), bv.clone()]).unwrap();
        let e2 = g.forward(&[xv], &[wv, bv]).unwrap();
        assert_eq!(e1.value(l).data(), e2.value(l).data());
        assert_eq!(e1.value(c).data(), e2.value(c).data());
    }

    #[test]
    fn kl_graph_op_matches_heatmap_module() {
        let mut rng = Rng::new(15);
        let (w, h) = (9, 7);
        let target: Vec<f64> = (0..w * h).map(|_| rng.uniform() + 1e-4).collect();
        let logits: Vec<f64> = (0..w * h).map(|_| rng.normal()).collect();

        let mut g = Graph::new();
        let t = g.input("t", &[h, w]);
        let l = g.input("l", &[h, w]);
        let kl = g.kl_from_logits(t, l).unwrap();
        let eval = g
            .forward(
                &[
                    Tensor::new(&[h, w], target.clone()).unwrap(),
                    Tensor::new(&[h, w], logits.clone()).unwrap(),
                ],
                &[],
            )
            .unwrap();

        let hm_t = crate::heatmap::Heatmap::new(w, h, target).unwrap();
        let hm_l = crate::heatmap::Heatmap::new(w, h, logits).unwrap();
        let expect = crate::heatmap::kl_loss(&hm_t, &hm_l).unwrap();
        assert!((eval.value(kl).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_hand_computation() {
        let mut g = Graph::new();
        let m = g.input("m", &[3]);
        let l = g.input("l", &[3]);
        let loss = g.bce_from_logits(m, l).unwrap();
        let mv = [1.0, 0.0, 1.0];
        let lv = [2.0, -1.5, 0.0];
        let eval = g
            .forward(
                &[
                    Tensor::new(&[3], mv.to_vec()).unwrap(),
                    Tensor::new(&[3], lv.to_vec()).unwrap(),
                ],
                &[],
            )
            .unwrap();
        let expect: f64 = mv
            .iter()
            .zip(&lv)
            .map(|(&m, &l): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-l).exp());
                -(m * p.ln() + (1.0 - m) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((eval.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn concat_preserves_both_halves() {
        let mut g = Graph::new();
        let a = g.input("a", &[1, 2, 2]);
        let b = g.input("b", &[2, 2, 2]);
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[3, 2, 2]);
        let av = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bv = Tensor::new(&[2, 2, 2], (10..18).map(f64::from).collect()).unwrap();
        let eval = g.forward(&[av, bv], &[]).unwrap();
        let out = eval.value(c).data();
        assert_eq!(&out[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out[4], 10.0);
        assert_eq!(out[11], 17.0);
    }

    #[test]
    fn builder_rejects_shape_errors() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 4, 4]);
        let w = g.param("w", &[3, 5, 3, 3]); // ci=5 mismatches x's 2
        let b = g.param("b", &[3]);
        assert!(g.conv2d(x, w, b, 1).is_err());
        let v = g.input("v", &[4]);
        assert!(g.spatial_max(v).is_err());
        let u = g.input("u", &[5]);
        assert!(g.add(v, u).is_err());
    }
}
