//! Finite-difference gradient checks. Each returns the worst relative error
//! seen for one random seed.

use oicsr::graph::Graph;
use oicsr::regularizers::{
    l1_scale_value_grad, l2_value_grad, oicsr_gl_value_grad, separated_gl_value_grad,
};
use oicsr::{Gradients, LayerSpec, Model, NodeId, ParamSlot, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
/// Denominator floor for the relative error; keeps round-off in `f(w±h)` from
/// dominating coordinates whose true derivative is almost zero.
pub const FLOOR: f64 = 1e-2;
/// Samples at most this many coordinates per parameter tensor.
const MAX_COORDS: usize = 48;

type Build = dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Checks `sum(build(inputs) ⊙ probe)` for a random constant probe.
fn check_op(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &Build) -> f64 {
    let probe = {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids);
        random_tensor(rng, g.shape(out), 1.0)
    };
    let run = |inputs: &[Tensor], want_grad: bool| {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids);
        let p = g.constant(probe.clone());
        let m = g.mul(out, p).unwrap();
        let loss = g.sum(m).unwrap();
        let value = g.value(loss).data()[0];
        let grads = if want_grad {
            g.backward(loss).unwrap();
            ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, analytic) = run(&inputs, true);
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let mut work = inputs.clone();
        let mut flat = work[k].data().to_vec();
        let numeric = central_difference(&mut flat, H, |x| {
            work[k].data_mut().copy_from_slice(x);
            run(&work, false).0
        });
        for (a, n) in analytic[k].iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n, FLOOR));
        }
    }
    worst
}

/// Worst relative error over every graph operator for one seed.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |name, inputs, build: &Build, r: &mut ChaCha8Rng| {
        out.push((name, check_op(r, inputs, build)));
    };

    let inputs = vec![
        random_tensor(&mut r, &[3, 4], 1.0),
        random_tensor(&mut r, &[4, 2], 1.0),
    ];
    run(
        "matmul",
        inputs,
        &|g, x| g.matmul(x[0], x[1]).unwrap(),
        &mut r,
    );

    let inputs = vec![random_tensor(&mut r, &[3, 2], 1.0)];
    run(
        "transpose",
        inputs,
        &|g, x| g.transpose(x[0]).unwrap(),
        &mut r,
    );

    let inputs = vec![
        random_tensor(&mut r, &[2, 2, 5, 5], 1.0),
        random_tensor(&mut r, &[3, 2, 3, 3], 1.0),
    ];
    run(
        "conv2d",
        inputs,
        &|g, x| g.conv2d(x[0], x[1], 1, 0).unwrap(),
        &mut r,
    );

    let inputs = vec![
        random_tensor(&mut r, &[2, 2, 5, 5], 1.0),
        random_tensor(&mut r, &[3, 2, 3, 3], 1.0),
    ];
    run(
        "conv2d stride 2 pad 1",
        inputs,
        &|g, x| g.conv2d(x[0], x[1], 2, 1).unwrap(),
        &mut r,
    );

    let inputs = vec![kink_free_tensor(&mut r, &[3, 4])];
    run("relu", inputs, &|g, x| g.relu(x[0]).unwrap(), &mut r);

    let inputs = vec![
        random_tensor(&mut r, &[2, 3], 1.0),
        random_tensor(&mut r, &[2, 3], 1.0),
    ];
    run("add", inputs, &|g, x| g.add(x[0], x[1]).unwrap(), &mut r);

    let inputs = vec![
        random_tensor(&mut r, &[2, 3], 1.0),
        random_tensor(&mut r, &[2, 3], 1.0),
    ];
    run("mul", inputs, &|g, x| g.mul(x[0], x[1]).unwrap(), &mut r);

    let inputs = vec![
        random_tensor(&mut r, &[4, 3], 1.0),
        random_tensor(&mut r, &[3], 1.0),
    ];
    run(
        "bias_add dense",
        inputs,
        &|g, x| g.bias_add(x[0], x[1]).unwrap(),
        &mut r,
    );

    let inputs = vec![
        random_tensor(&mut r, &[2, 3, 2, 2], 1.0),
        random_tensor(&mut r, &[3], 1.0),
    ];
    run(
        "bias_add conv",
        inputs,
        &|g, x| g.bias_add(x[0], x[1]).unwrap(),
        &mut r,
    );

    let inputs = vec![
        random_tensor(&mut r, &[2, 3, 2, 2], 1.0),
        random_tensor(&mut r, &[3], 1.0),
        random_tensor(&mut r, &[3], 1.0),
    ];
    run(
        "scale_shift",
        inputs,
        &|g, x| g.scale_shift(x[0], x[1], x[2]).unwrap(),
        &mut r,
    );

    let inputs = vec![kink_free_tensor(&mut r, &[2, 2, 4, 5])];
    run(
        "maxpool2d",
        inputs,
        &|g, x| g.maxpool2d(x[0], 2).unwrap(),
        &mut r,
    );

    let inputs = vec![random_tensor(&mut r, &[2, 2, 2, 3], 1.0)];
    run("flatten", inputs, &|g, x| g.flatten(x[0]).unwrap(), &mut r);

    let inputs = vec![random_tensor(&mut r, &[3, 3], 1.0)];
    run("sum", inputs, &|g, x| g.sum(x[0]).unwrap(), &mut r);

    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let inputs = vec![random_tensor(&mut r, &[4, 5], 3.0)];
    run(
        "softmax_cross_entropy",
        inputs,
        &move |g, x| g.softmax_cross_entropy(x[0], &labels).unwrap(),
        &mut r,
    );

    out
}

fn coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= MAX_COORDS {
        return (0..n).collect();
    }
    (0..MAX_COORDS).map(|_| rng.random_range(0..n)).collect()
}

/// Composite network up to 4 weighted layers trained on cross-entropy; FD over
/// a sample of every parameter tensor. Draws until no relu input or pooling
/// window is within `1e-4` of a kink.
pub fn model_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (model, x, labels) = loop {
        let arch = random_architecture(&mut r, 4);
        let model = random_model(&mut r, &arch);
        let x = random_batch(&mut r, &model, 3);
        let classes = model.output_shape()[0];
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..classes)).collect();
        let mut g = Graph::new();
        let params = model.bind(&mut g, false);
        let xid = g.constant(x.clone());
        let (_, margin) = forward_with_margin(&model, &mut g, &params, xid);
        if margin > 1e-4 {
            break (model, x, labels);
        }
    };
    let loss = |m: &Model, grads: bool| {
        let mut g = Graph::new();
        let params = m.bind(&mut g, true);
        let xid = g.constant(x.clone());
        let logits = m.forward(&mut g, &params, xid).unwrap();
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        let value = g.value(loss).data()[0];
        let grads = grads.then(|| {
            g.backward(loss).unwrap();
            Gradients::from_graph(m, &g, &params)
        });
        (value, grads)
    };
    let analytic = loss(&model, true).1.unwrap();
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for layer in 0..model.layers().len() {
        for slot in model.layer(layer).slots() {
            let n = model.layer(layer).param(slot).unwrap().numel();
            for i in coords(&mut r, n) {
                let orig = work.param_mut(layer, slot).unwrap().data()[i];
                work.param_mut(layer, slot).unwrap().data_mut()[i] = orig + H;
                let plus = loss(&work, false).0;
                work.param_mut(layer, slot).unwrap().data_mut()[i] = orig - H;
                let minus = loss(&work, false).0;
                work.param_mut(layer, slot).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * H);
                let a = analytic.get(layer, slot).unwrap()[i];
                worst = worst.max(rel_err(a, numeric, FLOOR));
            }
        }
    }
    worst
}

type ValueGrad = fn(&Model) -> (f64, Gradients);

fn regularizer_error(r: &mut ChaCha8Rng, model: &Model, f: ValueGrad) -> f64 {
    let (_, analytic) = f(model);
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    for layer in 0..model.layers().len() {
        for slot in model.layer(layer).slots() {
            let n = model.layer(layer).param(slot).unwrap().numel();
            for i in coords(r, n) {
                let orig = work.param_mut(layer, slot).unwrap().data()[i];
                work.param_mut(layer, slot).unwrap().data_mut()[i] = orig + H;
                let plus = f(&work).0;
                work.param_mut(layer, slot).unwrap().data_mut()[i] = orig - H;
                let minus = f(&work).0;
                work.param_mut(layer, slot).unwrap().data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * H);
                let a = analytic.get(layer, slot).unwrap()[i];
                worst = worst.max(rel_err(a, numeric, FLOOR));
            }
        }
    }
    worst
}

/// Worst relative error of every regularizer on one random model. The model
/// always has at least one scale_shift so the L1 term applies.
pub fn regularizer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut arch = random_architecture(&mut r, 4);
    if !arch.layers.contains(&LayerSpec::ScaleShift) {
        arch.layers.insert(1, LayerSpec::ScaleShift);
    }
    let model = random_model(&mut r, &arch);
    vec![
        ("l2", regularizer_error(&mut r, &model, l2_value_grad)),
        (
            "separated_gl",
            regularizer_error(&mut r, &model, separated_gl_value_grad),
        ),
        (
            "oicsr_gl",
            regularizer_error(&mut r, &model, |m| oicsr_gl_value_grad(m).unwrap()),
        ),
        (
            "l1_scale",
            regularizer_error(&mut r, &model, |m| l1_scale_value_grad(m).unwrap()),
        ),
    ]
}

/// For a network with three weighted layers, the middle layer's weights sit in
/// the in-channel of pair 0 and the out-channel of pair 1. Returns the largest
/// gap between the analytic gradient and the explicit sum of the two group
/// contributions `w / ‖g₀‖ + w / ‖g₁‖`, and the smallest magnitude of either
/// contribution (both must be present).
pub fn oicsr_middle_layer_contributions(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let arch = loop {
        let arch = random_architecture(&mut r, 4);
        let weighted = arch
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. }))
            .count();
        if weighted >= 3 {
            break arch;
        }
    };
    let model = random_model(&mut r, &arch);
    let (_, grads) = oicsr_gl_value_grad(&model).unwrap();
    let (first, second) = (&model.pairs()[0], &model.pairs()[1]);
    let mid = first.in_layer;
    assert_eq!(mid, second.out_layer);
    let w = model.layer(mid).weight().unwrap().data();

    let group_norm = |p: usize, i: usize| {
        let a = model.out_channel_slice(p, i).unwrap();
        let b = model.in_channel_slice(p, i).unwrap();
        a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt()
    };
    // every middle-layer weight must land in exactly one group of each pair
    let mut hits = vec![(0u32, 0u32); w.len()];
    let mut from_in = vec![0.0; w.len()];
    for i in 0..first.channel_count {
        let norm = group_norm(0, i);
        for j in model.in_channel_indices(0, i).unwrap() {
            from_in[j] += w[j] / norm;
            hits[j].0 += 1;
        }
    }
    let mut from_out = vec![0.0; w.len()];
    for i in 0..second.channel_count {
        let norm = group_norm(1, i);
        for j in model.out_channel_indices(1, i).unwrap() {
            from_out[j] += w[j] / norm;
            hits[j].1 += 1;
        }
    }
    assert!(hits.iter().all(|&h| h == (1, 1)), "group coverage {hits:?}");
    let g = grads.get(mid, ParamSlot::Weight).unwrap();
    let mut gap: f64 = 0.0;
    let mut smallest = f64::INFINITY;
    for j in 0..w.len() {
        gap = gap.max((g[j] - (from_in[j] + from_out[j])).abs());
        if w[j] != 0.0 {
            smallest = smallest.min(from_in[j].abs()).min(from_out[j].abs());
        }
    }
    (gap, smallest)
}
