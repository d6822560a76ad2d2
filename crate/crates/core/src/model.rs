//! Sequential models and their out-in-channel pairing.
//!
//! Every weighted layer (dense or conv) except the last one is paired with the
//! next weighted layer. Out-channel `i` of the first layer and in-channel `i`
//! of the second form one group that is regularized, scored and pruned as a
//! unit. Pass-through layers between them (relu, maxpool, scale_shift) keep
//! channel identity; a flatten between a conv and a dense layer turns each
//! conv channel into `H·W` consecutive dense inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::tensor::{conv_out_extent, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid architecture at layer {layer}: {detail}")]
    Construction { layer: usize, detail: String },
    #[error("pair {pair} does not exist (model has {count} pairs)")]
    PairIndex { pair: usize, count: usize },
    #[error("channel {channel} out of range for pair {pair} with {count} channels")]
    ChannelIndex {
        pair: usize,
        channel: usize,
        count: usize,
    },
    #[error("parameter {what} has {got} values, expected {expected}")]
    ParamLength {
        what: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn yes() -> bool {
    true
}

/// One entry of an architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        channels: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    ScaleShift,
    Relu,
    Maxpool {
        #[serde(default = "two")]
        kernel: usize,
    },
    Flatten,
}

/// Per-sample input shape plus the ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[C, H, W]` for images or `[D]` for feature vectors.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamSlot {
    pub const ALL: [ParamSlot; 4] = [Self::Weight, Self::Bias, Self::Gamma, Self::Beta];

    pub fn name(self) -> &'static str {
        match self {
            Self::Weight => "weight",
            Self::Bias => "bias",
            Self::Gamma => "gamma",
            Self::Beta => "beta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight: OC×IC`
    Dense {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    /// `weight: OC×IC×kh×kw`
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    ScaleShift {
        gamma: Tensor,
        beta: Tensor,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::ScaleShift { .. } => "scale_shift",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn param(&self, slot: ParamSlot) -> Option<&Tensor> {
        match (self, slot) {
            (Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. }, ParamSlot::Weight) => {
                Some(weight)
            }
            (Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. }, ParamSlot::Bias) => {
                bias.as_ref()
            }
            (Layer::ScaleShift { gamma, .. }, ParamSlot::Gamma) => Some(gamma),
            (Layer::ScaleShift { beta, .. }, ParamSlot::Beta) => Some(beta),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, slot: ParamSlot) -> Option<&mut Tensor> {
        match (self, slot) {
            (Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. }, ParamSlot::Weight) => {
                Some(weight)
            }
            (Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. }, ParamSlot::Bias) => {
                bias.as_mut()
            }
            (Layer::ScaleShift { gamma, .. }, ParamSlot::Gamma) => Some(gamma),
            (Layer::ScaleShift { beta, .. }, ParamSlot::Beta) => Some(beta),
            _ => None,
        }
    }

    /// Present parameter slots in canonical order.
    pub fn slots(&self) -> Vec<ParamSlot> {
        ParamSlot::ALL
            .into_iter()
            .filter(|&s| self.param(s).is_some())
            .collect()
    }

    /// Output channels of a weighted layer.
    pub fn out_channels(&self) -> Option<usize> {
        self.weight().map(|w| w.shape()[0])
    }

    fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { weight, bias } => LayerSpec::Dense {
                channels: weight.shape()[0],
                bias: bias.is_some(),
            },
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => LayerSpec::Conv2d {
                channels: weight.shape()[0],
                kernel: weight.shape()[2],
                stride: *stride,
                padding: *padding,
                bias: bias.is_some(),
            },
            Layer::ScaleShift { .. } => LayerSpec::ScaleShift,
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { size } => LayerSpec::Maxpool { kernel: *size },
            Layer::Flatten => LayerSpec::Flatten,
        }
    }
}

/// A consecutive pair of weighted layers whose channels are grouped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPair {
    pub out_layer: usize,
    pub in_layer: usize,
    /// Output channels of `out_layer`.
    pub channel_count: usize,
    /// In-layer input columns fed by one out-channel.
    pub in_multiplicity: usize,
    /// Pass-through layers between the two (relu, maxpool, scale_shift).
    pub intervening: Vec<usize>,
}

/// Sequential network plus derived pair metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input: Vec<usize>,
    layers: Vec<Layer>,
    /// Per-sample output shape of each layer.
    shapes: Vec<Vec<usize>>,
    pairs: Vec<ChannelPair>,
}

impl Model {
    /// Builds a model with He-normal weights (std `√(2/fan_in)`), zero biases,
    /// `γ = 1` and `β = 0`.
    pub fn from_architecture(arch: &Architecture, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut shape = arch.input.clone();
        check_input(&shape)?;
        for (idx, spec) in arch.layers.iter().enumerate() {
            let err = |detail: String| ModelError::Construction { layer: idx, detail };
            let layer = match *spec {
                LayerSpec::Dense { channels, bias } => {
                    if shape.len() != 1 {
                        return Err(err(format!(
                            "dense expects a flat input, got {shape:?}; add a flatten layer"
                        )));
                    }
                    if channels == 0 {
                        return Err(err("dense needs at least one channel".into()));
                    }
                    let fan_in = shape[0];
                    Layer::Dense {
                        weight: he_normal(&[channels, fan_in], fan_in, &mut rng),
                        bias: bias.then(|| Tensor::zeros(&[channels])),
                    }
                }
                LayerSpec::Conv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    if shape.len() != 3 {
                        return Err(err(format!("conv2d expects C×H×W input, got {shape:?}")));
                    }
                    if channels == 0 {
                        return Err(err("conv2d needs at least one channel".into()));
                    }
                    let fan_in = shape[0] * kernel * kernel;
                    Layer::Conv2d {
                        weight: he_normal(&[channels, shape[0], kernel, kernel], fan_in, &mut rng),
                        bias: bias.then(|| Tensor::zeros(&[channels])),
                        stride,
                        padding,
                    }
                }
                LayerSpec::ScaleShift => Layer::ScaleShift {
                    gamma: Tensor::full(&[shape[0]], 1.0),
                    beta: Tensor::zeros(&[shape[0]]),
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Maxpool { kernel } => Layer::MaxPool { size: kernel },
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = output_shape(idx, &layer, &shape)?;
            layers.push(layer);
        }
        Self::from_layers(arch.input.clone(), layers)
    }

    /// Assembles a model from explicit layers, validating the chain and deriving pairs.
    pub fn from_layers(input: Vec<usize>, layers: Vec<Layer>) -> Result<Self, ModelError> {
        check_input(&input)?;
        let mut model = Self {
            input,
            layers,
            shapes: Vec::new(),
            pairs: Vec::new(),
        };
        model.rederive()?;
        Ok(model)
    }

    /// Recomputes shapes and pairs after the layer list changed.
    pub(crate) fn rederive(&mut self) -> Result<(), ModelError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = output_shape(idx, layer, &shape)?;
            shapes.push(shape.clone());
        }
        self.shapes = shapes;
        self.pairs = derive_pairs(&self.input, &self.layers, &self.shapes)?;
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        &self.layers[idx]
    }

    pub fn pairs(&self) -> &[ChannelPair] {
        &self.pairs
    }

    pub fn pair(&self, pair: usize) -> Result<&ChannelPair, ModelError> {
        self.pairs.get(pair).ok_or(ModelError::PairIndex {
            pair,
            count: self.pairs.len(),
        })
    }

    /// Total number of out-in-channel groups over all pairs.
    pub fn group_count(&self) -> usize {
        self.pairs.iter().map(|p| p.channel_count).sum()
    }

    /// Per-sample input shape seen by layer `idx`.
    pub fn layer_input_shape(&self, idx: usize) -> &[usize] {
        if idx == 0 {
            &self.input
        } else {
            &self.shapes[idx - 1]
        }
    }

    /// Per-sample output shape of layer `idx`.
    pub fn layer_output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map_or(&self.input, |s| s)
    }

    /// Index of the last weighted layer (the classifier).
    pub fn final_weighted_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(Layer::is_weighted)
    }

    /// Current architecture, reflecting any pruning.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.input.clone(),
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| {
                l.slots()
                    .into_iter()
                    .map(move |s| l.param(s).unwrap().numel())
            })
            .sum()
    }

    fn check_channel(&self, pair: usize, channel: usize) -> Result<&ChannelPair, ModelError> {
        let p = self.pair(pair)?;
        if channel >= p.channel_count {
            return Err(ModelError::ChannelIndex {
                pair,
                channel,
                count: p.channel_count,
            });
        }
        Ok(p)
    }

    /// Flat indices into the out-layer weight covering out-channel `channel`.
    pub fn out_channel_indices(
        &self,
        pair: usize,
        channel: usize,
    ) -> Result<std::ops::Range<usize>, ModelError> {
        let p = self.check_channel(pair, channel)?;
        let w = self.layers[p.out_layer]
            .weight()
            .expect("paired layer is weighted");
        let row = w.numel() / p.channel_count;
        Ok(channel * row..(channel + 1) * row)
    }

    /// Flat indices into the in-layer weight fed by out-channel `channel`:
    /// the column block `[channel·m, (channel+1)·m)` of every in-layer row.
    pub fn in_channel_indices(
        &self,
        pair: usize,
        channel: usize,
    ) -> Result<Vec<usize>, ModelError> {
        let p = self.check_channel(pair, channel)?;
        let w = self.layers[p.in_layer]
            .weight()
            .expect("paired layer is weighted");
        let s = w.shape();
        let (rows, cols) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let run = p.in_multiplicity * inner;
        let mut idx = Vec::with_capacity(rows * run);
        for o in 0..rows {
            let start = (o * cols + channel * p.in_multiplicity) * inner;
            idx.extend(start..start + run);
        }
        Ok(idx)
    }

    /// Weights of out-channel `channel`, row-major.
    pub fn out_channel_slice(&self, pair: usize, channel: usize) -> Result<Vec<f64>, ModelError> {
        let range = self.out_channel_indices(pair, channel)?;
        let w = self.layers[self.pairs[pair].out_layer].weight().unwrap();
        Ok(w.data()[range].to_vec())
    }

    /// Weights of the matching in-channel in the next weighted layer.
    pub fn in_channel_slice(&self, pair: usize, channel: usize) -> Result<Vec<f64>, ModelError> {
        let idx = self.in_channel_indices(pair, channel)?;
        let w = self.layers[self.pairs[pair].in_layer].weight().unwrap();
        Ok(idx.into_iter().map(|i| w.data()[i]).collect())
    }

    /// Zeros every parameter belonging to group `(pair, channel)`: the
    /// out-channel row and bias, the in-channel columns, and the channel's
    /// `γ`/`β` in intervening scale_shift layers. The network then computes
    /// exactly what it would with the group surgically removed.
    pub fn zero_group(&mut self, pair: usize, channel: usize) -> Result<(), ModelError> {
        let out_range = self.out_channel_indices(pair, channel)?;
        let in_idx = self.in_channel_indices(pair, channel)?;
        let p = self.pairs[pair].clone();
        let out_layer = &mut self.layers[p.out_layer];
        out_layer.param_mut(ParamSlot::Weight).unwrap().data_mut()[out_range].fill(0.0);
        if let Some(b) = out_layer.param_mut(ParamSlot::Bias) {
            b.data_mut()[channel] = 0.0;
        }
        let w = self.layers[p.in_layer]
            .param_mut(ParamSlot::Weight)
            .unwrap();
        for i in in_idx {
            w.data_mut()[i] = 0.0;
        }
        for &l in &p.intervening {
            if let Layer::ScaleShift { gamma, beta } = &mut self.layers[l] {
                gamma.data_mut()[channel] = 0.0;
                beta.data_mut()[channel] = 0.0;
            }
        }
        Ok(())
    }

    /// Registers every parameter as a node of `graph`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let nodes = self
            .layers
            .iter()
            .map(|layer| {
                layer
                    .slots()
                    .into_iter()
                    .map(|slot| {
                        let t = layer.param(slot).unwrap().clone();
                        let id = if trainable {
                            graph.param(t)
                        } else {
                            graph.constant(t)
                        };
                        (slot, id)
                    })
                    .collect()
            })
            .collect();
        BoundParams { nodes }
    }

    /// Records the forward pass for a batch `x` of shape `[N, input...]`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &BoundParams,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let mut h = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            let p = |slot| params.get(idx, slot);
            h = match layer {
                Layer::Dense { .. } => {
                    let wt = graph.transpose(p(ParamSlot::Weight).unwrap())?;
                    let y = graph.matmul(h, wt)?;
                    match p(ParamSlot::Bias) {
                        Some(b) => graph.bias_add(y, b)?,
                        None => y,
                    }
                }
                Layer::Conv2d {
                    stride, padding, ..
                } => {
                    let y = graph.conv2d(h, p(ParamSlot::Weight).unwrap(), *stride, *padding)?;
                    match p(ParamSlot::Bias) {
                        Some(b) => graph.bias_add(y, b)?,
                        None => y,
                    }
                }
                Layer::ScaleShift { .. } => graph.scale_shift(
                    h,
                    p(ParamSlot::Gamma).unwrap(),
                    p(ParamSlot::Beta).unwrap(),
                )?,
                Layer::Relu => graph.relu(h)?,
                Layer::MaxPool { size } => graph.maxpool2d(h, *size)?,
                Layer::Flatten => graph.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Evaluates the network on a batch without recording gradients.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor, ModelError> {
        if inputs.shape().get(1..) != Some(&self.input[..]) {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "predict",
                detail: format!(
                    "batch shape {:?} does not match model input {:?}",
                    inputs.shape(),
                    self.input
                ),
            }));
        }
        let mut graph = Graph::new();
        let params = self.bind(&mut graph, false);
        let x = graph.constant(inputs.clone());
        let y = self.forward(&mut graph, &params, x)?;
        Ok(graph.value(y).clone())
    }

    /// Replaces one parameter buffer, keeping its shape.
    pub fn set_param(
        &mut self,
        layer: usize,
        slot: ParamSlot,
        values: Vec<f64>,
    ) -> Result<(), ModelError> {
        let t = self.layers[layer]
            .param_mut(slot)
            .ok_or_else(|| ModelError::ParamLength {
                what: format!("layer {layer} {}", slot.name()),
                got: values.len(),
                expected: 0,
            })?;
        if values.len() != t.numel() {
            return Err(ModelError::ParamLength {
                what: format!("layer {layer} {}", slot.name()),
                got: values.len(),
                expected: t.numel(),
            });
        }
        t.data_mut().copy_from_slice(&values);
        Ok(())
    }

    pub fn param_mut(&mut self, layer: usize, slot: ParamSlot) -> Option<&mut Tensor> {
        self.layers[layer].param_mut(slot)
    }
}

/// Graph node ids of a model's parameters, grouped per layer.
#[derive(Debug, Clone)]
pub struct BoundParams {
    nodes: Vec<Vec<(ParamSlot, NodeId)>>,
}

impl BoundParams {
    pub fn get(&self, layer: usize, slot: ParamSlot) -> Option<NodeId> {
        self.nodes[layer]
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|&(_, id)| id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, ParamSlot, NodeId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().map(move |&(s, id)| (l, s, id)))
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn check_input(input: &[usize]) -> Result<(), ModelError> {
    if !(input.len() == 1 || input.len() == 3) || input.contains(&0) {
        return Err(ModelError::Construction {
            layer: 0,
            detail: format!("input must be [D] or [C, H, W] with positive extents, got {input:?}"),
        });
    }
    Ok(())
}

fn output_shape(idx: usize, layer: &Layer, input: &[usize]) -> Result<Vec<usize>, ModelError> {
    let err = |detail: String| ModelError::Construction { layer: idx, detail };
    match layer {
        Layer::Dense { weight, bias } => {
            let s = weight.shape();
            if input.len() != 1 {
                return Err(err(format!("dense expects a flat input, got {input:?}")));
            }
            if s.len() != 2 || s[1] != input[0] {
                return Err(err(format!(
                    "dense weight {s:?} does not accept {} inputs",
                    input[0]
                )));
            }
            check_vec(idx, bias.as_ref(), s[0], "bias")?;
            Ok(vec![s[0]])
        }
        Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            let s = weight.shape();
            if input.len() != 3 {
                return Err(err(format!("conv2d expects C×H×W input, got {input:?}")));
            }
            if s.len() != 4 || s[1] != input[0] {
                return Err(err(format!(
                    "conv2d weight {s:?} does not accept {} input channels",
                    input[0]
                )));
            }
            check_vec(idx, bias.as_ref(), s[0], "bias")?;
            let h = conv_out_extent(input[1], s[2], *stride, *padding)
                .map_err(|e| err(e.to_string()))?;
            let w = conv_out_extent(input[2], s[3], *stride, *padding)
                .map_err(|e| err(e.to_string()))?;
            Ok(vec![s[0], h, w])
        }
        Layer::ScaleShift { gamma, beta } => {
            check_vec(idx, Some(gamma), input[0], "gamma")?;
            check_vec(idx, Some(beta), input[0], "beta")?;
            Ok(input.to_vec())
        }
        Layer::Relu => Ok(input.to_vec()),
        Layer::MaxPool { size } => {
            if input.len() != 3 {
                return Err(err(format!("maxpool expects C×H×W input, got {input:?}")));
            }
            if *size == 0 || input[1] < *size || input[2] < *size {
                return Err(err(format!(
                    "pool window {size} does not fit {}×{}",
                    input[1], input[2]
                )));
            }
            Ok(vec![input[0], input[1] / size, input[2] / size])
        }
        Layer::Flatten => Ok(vec![input.iter().product()]),
    }
}

fn check_vec(idx: usize, t: Option<&Tensor>, len: usize, what: &str) -> Result<(), ModelError> {
    match t {
        Some(t) if t.shape() != [len] => Err(ModelError::Construction {
            layer: idx,
            detail: format!("{what} has shape {:?}, expected [{len}]", t.shape()),
        }),
        _ => Ok(()),
    }
}

fn derive_pairs(
    input: &[usize],
    layers: &[Layer],
    shapes: &[Vec<usize>],
) -> Result<Vec<ChannelPair>, ModelError> {
    let mut pairs = Vec::new();
    let mut prev: Option<usize> = None;
    let mut intervening = Vec::new();
    let mut multiplicity = 1;
    for (idx, layer) in layers.iter().enumerate() {
        let in_shape = if idx == 0 { input } else { &shapes[idx - 1] };
        match layer {
            Layer::Dense { .. } | Layer::Conv2d { .. } => {
                if let Some(out_layer) = prev {
                    let channel_count = layers[out_layer].out_channels().unwrap();
                    let pair = ChannelPair {
                        out_layer,
                        in_layer: idx,
                        channel_count,
                        in_multiplicity: multiplicity,
                        intervening: std::mem::take(&mut intervening),
                    };
                    let ic = layer.weight().unwrap().shape()[1];
                    debug_assert_eq!(ic, channel_count * multiplicity);
                    pairs.push(pair);
                }
                prev = Some(idx);
                multiplicity = 1;
            }
            Layer::Flatten => {
                if prev.is_some() && in_shape.len() == 3 {
                    multiplicity *= in_shape[1] * in_shape[2];
                }
            }
            Layer::ScaleShift { .. } if prev.is_some() && multiplicity > 1 => {
                return Err(ModelError::Construction {
                    layer: idx,
                    detail: "scale_shift between flatten and the next weighted layer would split \
                             channel identity"
                        .into(),
                });
            }
            Layer::ScaleShift { .. } | Layer::Relu | Layer::MaxPool { .. } => {
                if prev.is_some() {
                    intervening.push(idx);
                }
            }
        }
    }
    Ok(pairs)
}
