use crate::graph::Graph;
use crate::model::{BoundParams, Model, ParamSlot};

/// Gradient buffers shaped like a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Vec<(ParamSlot, Vec<f64>)>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| {
                l.slots()
                    .into_iter()
                    .map(|s| (s, vec![0.0; l.param(s).unwrap().numel()]))
                    .collect()
            })
            .collect();
        Self { layers }
    }

    /// Collects the leaf gradients accumulated in `graph` by a backward pass.
    pub fn from_graph(model: &Model, graph: &Graph, params: &BoundParams) -> Self {
        let mut grads = Self::zeros_like(model);
        for (layer, slot, id) in params.iter() {
            if let Some(g) = graph.grad(id) {
                grads.get_mut(layer, slot).unwrap().copy_from_slice(g);
            }
        }
        grads
    }

    pub fn get(&self, layer: usize, slot: ParamSlot) -> Option<&[f64]> {
        self.layers[layer]
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, v)| v.as_slice())
    }

    pub fn get_mut(&mut self, layer: usize, slot: ParamSlot) -> Option<&mut [f64]> {
        self.layers[layer]
            .iter_mut()
            .find(|(s, _)| *s == slot)
            .map(|(_, v)| v.as_mut_slice())
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            for ((_, a), (_, b)) in mine.iter_mut().zip(theirs) {
                a.iter_mut().zip(b).for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, ParamSlot, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().map(move |(s, g)| (l, *s, g.as_slice())))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, _, g)| g.iter().all(|v| v.is_finite()))
    }
}
