//! Finite-difference verification of the backward pass.
//!
//! Every primitive gets a small fixed-seed fixture whose loss is reduced
//! through `sum(mul(y, r))` with random `r`, so the upstream gradient reaching
//! the op under test is non-uniform (a plain `sum` would hide errors that
//! cancel under a constant upstream). Fixtures guard the non-smooth ops:
//! relu inputs are kept away from zero and spatial-max fixtures keep a wide
//! gap between the top two activations, so the central difference never
//! straddles a kink.
//!
//! Relative error uses `|a - fd| / max(|a|, |fd|, 1e-4)`: the floor keeps
//! finite-difference roundoff (~1e-9 absolute here) from being amplified
//! into spurious failures where the true gradient is tiny.

use super::graph::{backward, Graph, Var};
use super::tensor::Tensor;
use crate::rng::Rng;

/// Central-difference step, chosen so truncation and f64 roundoff balance.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub primitive: String,
    pub max_rel_err: f64,
    /// Composites exercise whole blocks; they get the looser tolerance.
    pub composite: bool,
    pub pass: bool,
}

struct Case {
    name: &'static str,
    composite: bool,
    graph: Graph,
    loss: Var,
    inputs: Vec<Tensor<f64>>,
    params: Vec<Tensor<f64>>,
}

fn rel_err(a: f64, fd: f64) -> f64 {
    if a.abs() < 1e-10 && fd.abs() < 1e-10 {
        return 0.0;
    }
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4)
}

fn max_rel_err(case: &Case) -> f64 {
    let eval = case.graph.forward(&case.inputs, &case.params).expect("fixture forward");
    let grads = backward(&case.graph, &eval, case.loss).expect("fixture backward");
    let loss_at = |inputs: &[Tensor<f64>], params: &[Tensor<f64>]| -> f64 {
        case.graph.forward(inputs, params).expect("fd forward").value(case.loss).item()
    };

    let mut worst = 0.0_f64;
    for (ti, t) in case.inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = case.inputs.clone();
            plus[ti].data_mut()[k] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[ti].data_mut()[k] -= FD_STEP;
            let fd = (loss_at(&plus, &case.params) - loss_at(&minus, &case.params))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.inputs[ti].data()[k], fd));
        }
    }
    for (ti, t) in case.params.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = case.params.clone();
            plus[ti].data_mut()[k] += FD_STEP;
            let mut minus = case.params.clone();
            minus[ti].data_mut()[k] -= FD_STEP;
            let fd = (loss_at(&case.inputs, &plus) - loss_at(&case.inputs, &minus))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.params[ti].data()[k], fd));
        }
    }
    worst
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Normals pushed away from the origin: |v| >= margin.
fn randn_off_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal();
            v.signum() * (v.abs() + margin)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_in(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect()).unwrap()
}

/// loss = sum(y * r) for a fresh input r, giving y a non-uniform upstream.
fn weighted_loss(g: &mut Graph, y: Var, rng: &mut Rng) -> (Var, Tensor<f64>) {
    let shape = g.shape(y).to_vec();
    let r = g.input("upstream", &shape);
    let m = g.mul(y, r).unwrap();
    let loss = g.sum(m);
    (loss, randn(rng, &shape))
}

fn conv_case(name: &'static str, stride: usize, h: usize, w: usize) -> Case {
    let mut rng = Rng::new(101 + stride as u64);
    let mut g = Graph::new();
    let x = g.input("x", &[2, h, w]);
    let wt = g.param("w", &[3, 2, 3, 3]);
    let b = g.param("b", &[3]);
    let y = g.conv2d(x, wt, b, stride).unwrap();
    let (loss, r) = weighted_loss(&mut g, y, &mut rng);
    let xv = randn(&mut rng, &[2, h, w]);
    let wv = randn(&mut rng, &[3, 2, 3, 3]);
    let bv = randn(&mut rng, &[3]);
    Case { name, composite: false, graph: g, loss, inputs: vec![xv, r], params: vec![wv, bv] }
}

fn unary_case(
    name: &'static str,
    seed: u64,
    shape: &[usize],
    make_x: fn(&mut Rng, &[usize]) -> Tensor<f64>,
    apply: fn(&mut Graph, Var) -> Var,
) -> Case {
    let mut rng = Rng::new(seed);
    let mut g = Graph::new();
    let x = g.input("x", shape);
    let y = apply(&mut g, x);
    let (loss, r) = weighted_loss(&mut g, y, &mut rng);
    let xv = make_x(&mut rng, shape);
    Case { name, composite: false, graph: g, loss, inputs: vec![xv, r], params: vec![] }
}

fn all_cases() -> Vec<Case> {
    let mut cases = Vec::new();

    cases.push(conv_case("conv2d/stride1", 1, 5, 5));
    cases.push(conv_case("conv2d/stride2", 2, 6, 6));

    cases.push(unary_case("upsample2", 7, &[2, 3, 3], randn, |g, x| {
        g.upsample2(x).unwrap()
    }));
    cases.push(unary_case(
        "relu",
        11,
        &[6],
        |rng, s| randn_off_zero(rng, s, 0.1),
        |g, x| g.relu(x),
    ));
    cases.push(unary_case("sigmoid", 13, &[6], randn, |g, x| g.sigmoid(x)));
    cases.push(unary_case("scale", 17, &[5], randn, |g, x| g.scale(x, -2.7)));
    cases.push(unary_case("pixel_softmax", 19, &[1, 4, 5], randn, |g, x| {
        g.pixel_softmax(x).unwrap()
    }));
    cases.push(unary_case("broadcast_spatial", 23, &[3], randn, |g, x| {
        g.broadcast_spatial(x, 2, 2).unwrap()
    }));

    // spatial_max: bump each channel's argmax so the top-two gap dwarfs the
    // FD step and the max index is stable under perturbation.
    {
        let mut rng = Rng::new(29);
        let mut g = Graph::new();
        let x = g.input("x", &[2, 4, 4]);
        let y = g.spatial_max(x).unwrap();
        let (loss, r) = weighted_loss(&mut g, y, &mut rng);
        let mut xv = randn(&mut rng, &[2, 4, 4]);
        for ch in 0..2 {
            let plane = &mut xv.data_mut()[ch * 16..(ch + 1) * 16];
            let mut arg = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[arg] {
                    arg = i;
                }
            }
            plane[arg] += 0.5;
        }
        cases.push(Case {
            name: "spatial_max",
            composite: false,
            graph: g,
            loss,
            inputs: vec![xv, r],
            params: vec![],
        });
    }

    // linear
    {
        let mut rng = Rng::new(31);
        let mut g = Graph::new();
        let x = g.input("x", &[5]);
        let w = g.param("w", &[3, 5]);
        let b = g.param("b", &[3]);
        let y = g.linear(x, w, b).unwrap();
        let (loss, r) = weighted_loss(&mut g, y, &mut rng);
        let xv = randn(&mut rng, &[5]);
        let wv = randn(&mut rng, &[3, 5]);
        let bv = randn(&mut rng, &[3]);
        cases.push(Case {
            name: "linear",
            composite: false,
            graph: g,
            loss,
            inputs: vec![xv, r],
            params: vec![wv, bv],
        });
    }

    // add / mul
    for (name, is_mul, seed) in [("add", false, 37u64), ("mul", true, 41)] {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let a = g.input("a", &[7]);
        let b = g.input("b", &[7]);
        let y = if is_mul { g.mul(a, b).unwrap() } else { g.add(a, b).unwrap() };
        let (loss, r) = weighted_loss(&mut g, y, &mut rng);
        let av = randn(&mut rng, &[7]);
        let bv = randn(&mut rng, &[7]);
        cases.push(Case {
            name,
            composite: false,
            graph: g,
            loss,
            inputs: vec![av, bv, r],
            params: vec![],
        });
    }

    // concat
    {
        let mut rng = Rng::new(43);
        let mut g = Graph::new();
        let a = g.input("a", &[1, 2, 3]);
        let b = g.input("b", &[2, 2, 3]);
        let y = g.concat_channels(a, b).unwrap();
        let (loss, r) = weighted_loss(&mut g, y, &mut rng);
        let av = randn(&mut rng, &[1, 2, 3]);
        let bv = randn(&mut rng, &[2, 2, 3]);
        cases.push(Case {
            name: "concat_channels",
            composite: false,
            graph: g,
            loss,
            inputs: vec![av, bv, r],
            params: vec![],
        });
    }

    // scale_shift
    {
        let mut rng = Rng::new(47);
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3, 3]);
        let s = g.input("s", &[2]);
        let t = g.input("t", &[2]);
        let y = g.scale_shift(x, s, t).unwrap();
        let (loss, r) = weighted_loss(&mut g, y, &mut rng);
        let xv = randn(&mut rng, &[2, 3, 3]);
        let sv = randn(&mut rng, &[2]);
        let tv = randn(&mut rng, &[2]);
        cases.push(Case {
            name: "scale_shift",
            composite: false,
            graph: g,
            loss,
            inputs: vec![xv, sv, tv, r],
            params: vec![],
        });
    }

    // mean / sum with non-unit upstream via a scale on top
    for (name, is_mean, seed) in [("mean", true, 53u64), ("sum", false, 59)] {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let x = g.input("x", &[3, 4]);
        let red = if is_mean { g.mean(x) } else { g.sum(x) };
        let loss = g.scale(red, 1.7);
        let xv = randn(&mut rng, &[3, 4]);
        cases.push(Case { name, composite: false, graph: g, loss, inputs: vec![xv], params: vec![] });
    }

    // kl_from_logits: strictly positive target so the FD probe stays in the
    // domain where the target gradient is defined.
    {
        let mut rng = Rng::new(61);
        let mut g = Graph::new();
        let q = g.input("target", &[4, 5]);
        let l = g.input("logits", &[4, 5]);
        let kl = g.kl_from_logits(q, l).unwrap();
        let loss = g.scale(kl, 1.3);
        let qv = rand_in(&mut rng, &[4, 5], 0.1, 1.1);
        let lv = randn(&mut rng, &[4, 5]);
        cases.push(Case {
            name: "kl_from_logits",
            composite: false,
            graph: g,
            loss,
            inputs: vec![qv, lv],
            params: vec![],
        });
    }

    // bce_from_logits: soft mask strictly inside (0,1).
    {
        let mut rng = Rng::new(67);
        let mut g = Graph::new();
        let m = g.input("mask", &[3, 4]);
        let l = g.input("logits", &[3, 4]);
        let bce = g.bce_from_logits(m, l).unwrap();
        let loss = g.scale(bce, 0.9);
        let mv = rand_in(&mut rng, &[3, 4], 0.2, 0.8);
        let lv = randn(&mut rng, &[3, 4]);
        cases.push(Case {
            name: "bce_from_logits",
            composite: false,
            graph: g,
            loss,
            inputs: vec![mv, lv],
            params: vec![],
        });
    }

    cases.push(encoder_block_case());
    cases.push(film_block_case());
    cases.push(shared_weight_case());
    cases
}

/// Conv -> relu -> conv -> residual add -> spatial max -> linear head.
fn encoder_block_case() -> Case {
    let mut g = Graph::new();
    let x = g.input("x", &[2, 6, 6]);
    let w1 = g.param("c1.w", &[2, 2, 3, 3]);
    let b1 = g.param("c1.b", &[2]);
    let c1 = g.conv2d(x, w1, b1, 1).unwrap();
    let a1 = g.relu(c1);
    let w2 = g.param("c2.w", &[2, 2, 3, 3]);
    let b2 = g.param("c2.b", &[2]);
    let c2 = g.conv2d(a1, w2, b2, 1).unwrap();
    let res = g.add(c2, x).unwrap();
    let pooled = g.spatial_max(res).unwrap();
    let wl = g.param("head.w", &[3, 2]);
    let bl = g.param("head.b", &[3]);
    let emb = g.linear(pooled, wl, bl).unwrap();
    let mut rng = Rng::new(0); // replaced per attempt below
    let (loss, _) = weighted_loss(&mut g, emb, &mut rng);

    // Retry seeds until the relu inputs clear zero and each spatial-max
    // channel has a comfortable top-two gap; FD then never crosses a kink.
    for attempt in 0..64 {
        let mut rng = Rng::new(71 + attempt);
        let xv = randn(&mut rng, &[2, 6, 6]);
        let w1v = randn(&mut rng, &[2, 2, 3, 3]);
        let b1v = randn(&mut rng, &[2]);
        let w2v = randn(&mut rng, &[2, 2, 3, 3]);
        let b2v = randn(&mut rng, &[2]);
        let wlv = randn(&mut rng, &[3, 2]);
        let blv = randn(&mut rng, &[3]);
        let rv = randn(&mut rng, &[3]);
        let inputs = vec![xv, rv];
        let params = vec![w1v, b1v, w2v, b2v, wlv, blv];
        let eval = g.forward(&inputs, &params).unwrap();
        let relu_ok = eval.value(c1).data().iter().all(|v| v.abs() > 5e-3);
        let gap_ok = (0..2).all(|ch| {
            let plane = &eval.value(res).data()[ch * 36..(ch + 1) * 36];
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &v in plane {
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            top - second > 1e-3
        });
        if relu_ok && gap_ok {
            return Case { name: "block/encoder", composite: true, graph: g, loss, inputs, params };
        }
    }
    panic!("no seed produced a kink-free encoder fixture");
}

/// Upsample -> skip concat -> conv -> FiLM -> pixel softmax -> KL loss.
fn film_block_case() -> Case {
    let mut g = Graph::new();
    let x = g.input("x", &[2, 3, 3]);
    let skip = g.input("skip", &[1, 6, 6]);
    let emb = g.input("emb", &[3]);
    let target = g.input("target", &[1, 6, 6]);
    let up = g.upsample2(x).unwrap();
    let cat = g.concat_channels(up, skip).unwrap();
    let wc = g.param("c.w", &[1, 3, 3, 3]);
    let bc = g.param("c.b", &[1]);
    let conv = g.conv2d(cat, wc, bc, 1).unwrap();
    let ws = g.param("film.scale.w", &[1, 3]);
    let bs = g.param("film.scale.b", &[1]);
    let scale = g.linear(emb, ws, bs).unwrap();
    let wt = g.param("film.shift.w", &[1, 3]);
    let bt = g.param("film.shift.b", &[1]);
    let shift = g.linear(emb, wt, bt).unwrap();
    let filmed = g.scale_shift(conv, scale, shift).unwrap();
    let soft = g.pixel_softmax(filmed).unwrap();
    // Anchor the softmax output with a weighted sum plus a KL on the logits;
    // both paths flow back through the FiLM generators.
    let r = g.input("upstream", &[1, 6, 6]);
    let weighted = g.mul(soft, r).unwrap();
    let s1 = g.sum(weighted);
    let kl = g.kl_from_logits(target, filmed).unwrap();
    let kls = g.scale(kl, 0.7);
    let loss = g.add(s1, kls).unwrap();

    let mut rng = Rng::new(83);
    let inputs = vec![
        randn(&mut rng, &[2, 3, 3]),
        randn(&mut rng, &[1, 6, 6]),
        randn(&mut rng, &[3]),
        rand_in(&mut rng, &[1, 6, 6], 0.1, 1.1),
        randn(&mut rng, &[1, 6, 6]),
    ];
    let params = vec![
        randn(&mut rng, &[1, 3, 3, 3]),
        randn(&mut rng, &[1]),
        randn(&mut rng, &[1, 3]),
        randn(&mut rng, &[1]),
        randn(&mut rng, &[1, 3]),
        randn(&mut rng, &[1]),
    ];
    Case { name: "block/film_decoder", composite: true, graph: g, loss, inputs, params }
}

/// One weight tensor applied to two different inputs: gradients from both
/// uses must accumulate (the conditioning stack shares encoder weights).
fn shared_weight_case() -> Case {
    let mut rng = Rng::new(89);
    let mut g = Graph::new();
    let x1 = g.input("x1", &[1, 4, 4]);
    let x2 = g.input("x2", &[1, 4, 4]);
    let w = g.param("w", &[1, 1, 3, 3]);
    let b = g.param("b", &[1]);
    let y1 = g.conv2d(x1, w, b, 1).unwrap();
    let y2 = g.conv2d(x2, w, b, 1).unwrap();
    let s = g.add(y1, y2).unwrap();
    let (loss, r) = weighted_loss(&mut g, s, &mut rng);
    let inputs = vec![randn(&mut rng, &[1, 4, 4]), randn(&mut rng, &[1, 4, 4]), r];
    let params = vec![randn(&mut rng, &[1, 1, 3, 3]), randn(&mut rng, &[1])];
    Case { name: "block/shared_weights", composite: true, graph: g, loss, inputs, params }
}

/// Run every fixture and report the worst relative error per primitive.
pub fn grad_check(primitive_tol: f64, composite_tol: f64) -> Vec<GradCheckEntry> {
    all_cases()
        .into_iter()
        .map(|case| {
            let err = max_rel_err(&case);
            let tol = if case.composite { composite_tol } else { primitive_tol };
            GradCheckEntry {
                primitive: case.name.to_string(),
                max_rel_err: err,
                composite: case.composite,
                pass: err < tol,
            }
        })
        .collect()
}
