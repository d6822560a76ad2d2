//! Random sequential models and finite-difference helpers shared by the
//! integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use oicsr::graph::Graph;
use oicsr::model::BoundParams;
use oicsr::{Architecture, Layer, LayerSpec, Model, NodeId, ParamSlot, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Values spread out so that no two are within `0.01` of each other and none
/// is within `0.01` of zero: safe for relu and maxpool finite differences.
pub fn kink_free_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut slots: Vec<i64> = (1..=n as i64).flat_map(|k| [k, -k]).collect();
    for i in (1..slots.len()).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let data = slots[..n]
        .iter()
        .map(|&k| k as f64 * 0.03 + rng.random_range(-0.005..0.005))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A random architecture with between 2 and `max_weighted` dense/conv layers,
/// mixing conv→conv, conv→dense and dense→dense pairs with relu, maxpool and
/// scale_shift in between.
pub fn random_architecture(rng: &mut ChaCha8Rng, max_weighted: usize) -> Architecture {
    random_architecture_wide(rng, max_weighted, 5)
}

/// [`random_architecture`] with hidden widths up to `max_width`.
pub fn random_architecture_wide(
    rng: &mut ChaCha8Rng,
    max_weighted: usize,
    max_width: usize,
) -> Architecture {
    let max_weighted = max_weighted.max(2);
    let mut layers = Vec::new();
    let weighted = rng.random_range(2..=max_weighted);
    let extras =
        |rng: &mut ChaCha8Rng, layers: &mut Vec<LayerSpec>, spatial: Option<&mut usize>| {
            if rng.random_bool(0.4) {
                layers.push(LayerSpec::ScaleShift);
            }
            if rng.random_bool(0.6) {
                layers.push(LayerSpec::Relu);
            }
            if let Some(side) = spatial {
                if *side >= 4 && rng.random_bool(0.4) {
                    layers.push(LayerSpec::Maxpool { kernel: 2 });
                    *side /= 2;
                }
            }
        };
    if rng.random_bool(0.6) {
        let channels = rng.random_range(1..=3);
        let mut side = rng.random_range(4..=7);
        let input = vec![channels, side, side];
        let convs = rng.random_range(1..weighted);
        for _ in 0..convs {
            let kernel = if rng.random_bool(0.7) { 3 } else { 1 };
            let padding = if side < 3 || rng.random_bool(0.6) {
                kernel / 2
            } else {
                0
            };
            layers.push(LayerSpec::Conv2d {
                channels: rng.random_range(2..=max_width),
                kernel,
                stride: 1,
                padding,
                bias: rng.random_bool(0.7),
            });
            side = side + 2 * padding - kernel + 1;
            extras(rng, &mut layers, Some(&mut side));
        }
        layers.push(LayerSpec::Flatten);
        for _ in convs + 1..weighted {
            layers.push(LayerSpec::Dense {
                channels: rng.random_range(2..=max_width + 1),
                bias: rng.random_bool(0.7),
            });
            extras(rng, &mut layers, None);
        }
        layers.push(LayerSpec::Dense {
            channels: rng.random_range(2..=4),
            bias: rng.random_bool(0.7),
        });
        Architecture { input, layers }
    } else {
        let input = vec![rng.random_range(2..=6)];
        for _ in 0..weighted - 1 {
            layers.push(LayerSpec::Dense {
                channels: rng.random_range(2..=max_width + 1),
                bias: rng.random_bool(0.7),
            });
            extras(rng, &mut layers, None);
        }
        layers.push(LayerSpec::Dense {
            channels: rng.random_range(2..=4),
            bias: rng.random_bool(0.7),
        });
        Architecture { input, layers }
    }
}

/// Builds a model from `arch` and replaces biases and affine parameters with
/// random nonzero values so nothing sits at its initial value.
pub fn random_model(rng: &mut ChaCha8Rng, arch: &Architecture) -> Model {
    let mut model = Model::from_architecture(arch, rng.random()).unwrap();
    for idx in 0..model.layers().len() {
        for slot in model.layer(idx).slots() {
            let t = model.param_mut(idx, slot).unwrap();
            match slot {
                ParamSlot::Weight => {}
                ParamSlot::Gamma => t.data_mut().iter_mut().for_each(|v| {
                    let m = rng.random_range(0.5..1.5);
                    *v = if rng.random_bool(0.5) { m } else { -m };
                }),
                ParamSlot::Bias | ParamSlot::Beta => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.3..0.3)),
            }
        }
    }
    model
}

pub fn random_batch(rng: &mut ChaCha8Rng, model: &Model, n: usize) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(model.input_shape());
    random_tensor(rng, &shape, 1.0)
}

/// Forward pass that also reports the smallest distance of any relu input from
/// zero and of any maxpool window's runner-up from its maximum.
pub fn forward_with_margin(
    model: &Model,
    graph: &mut Graph,
    params: &BoundParams,
    x: NodeId,
) -> (NodeId, f64) {
    let mut h = x;
    let mut margin = f64::INFINITY;
    for (idx, layer) in model.layers().iter().enumerate() {
        let p = |slot| params.get(idx, slot);
        h = match layer {
            Layer::Dense { .. } => {
                let wt = graph.transpose(p(ParamSlot::Weight).unwrap()).unwrap();
                let y = graph.matmul(h, wt).unwrap();
                match p(ParamSlot::Bias) {
                    Some(b) => graph.bias_add(y, b).unwrap(),
                    None => y,
                }
            }
            Layer::Conv2d {
                stride, padding, ..
            } => {
                let y = graph
                    .conv2d(h, p(ParamSlot::Weight).unwrap(), *stride, *padding)
                    .unwrap();
                match p(ParamSlot::Bias) {
                    Some(b) => graph.bias_add(y, b).unwrap(),
                    None => y,
                }
            }
            Layer::ScaleShift { .. } => graph
                .scale_shift(h, p(ParamSlot::Gamma).unwrap(), p(ParamSlot::Beta).unwrap())
                .unwrap(),
            Layer::Relu => {
                for v in graph.value(h).data() {
                    margin = margin.min(v.abs());
                }
                graph.relu(h).unwrap()
            }
            Layer::MaxPool { size } => {
                margin = margin.min(pool_margin(graph.value(h), *size));
                graph.maxpool2d(h, *size).unwrap()
            }
            Layer::Flatten => graph.flatten(h).unwrap(),
        };
    }
    (h, margin)
}

fn pool_margin(t: &Tensor, size: usize) -> f64 {
    let s = t.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut margin = f64::INFINITY;
    for p in 0..planes {
        for oy in 0..h / size {
            for ox in 0..w / size {
                let mut vals: Vec<f64> = (0..size * size)
                    .map(|k| t.data()[(p * h + oy * size + k / size) * w + ox * size + k % size])
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min(vals[0] - vals[1]);
            }
        }
    }
    margin
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_difference(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(x);
            x[i] = orig - h;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}
