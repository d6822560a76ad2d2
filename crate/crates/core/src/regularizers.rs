//! Penalty values and analytic gradients.
//!
//! All functions return the raw penalty `R(W)` and `∂R/∂W`; the caller applies
//! the coefficient. Group norms at or below [`GROUP_NORM_EPS`] use the zero
//! subgradient, so channels that are already dead stay dead.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grads::Gradients;
use crate::model::{Layer, Model, ParamSlot};

/// Group norms at or below this value get a zero subgradient.
pub const GROUP_NORM_EPS: f64 = 1e-12;

/// Default coefficient of the plain weight-decay term.
pub const DEFAULT_LAMBDA: f64 = 1e-4;
/// Default coefficient of the structured term.
pub const DEFAULT_LAMBDA_S: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegularizerError {
    #[error("l1_scale needs at least one scale_shift layer")]
    NoScaleLayers,
    #[error("oicsr_gl needs at least two weighted layers")]
    NoPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// Weight decay only; no structured term.
    L2,
    /// Group Lasso over the out-channels of each layer.
    SeparatedGl,
    /// Group Lasso over out-in-channel groups of consecutive layers.
    OicsrGl,
    /// L1 on scale_shift scaling factors.
    L1Scale,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::SeparatedGl => "separated_gl",
            Self::OicsrGl => "oicsr_gl",
            Self::L1Scale => "l1_scale",
        }
    }

    /// The structured penalty added to the loss for this kind, if any.
    pub fn structured_value_grad(
        self,
        model: &Model,
    ) -> Result<Option<(f64, Gradients)>, RegularizerError> {
        Ok(match self {
            Self::L2 => None,
            Self::SeparatedGl => Some(separated_gl_value_grad(model)),
            Self::OicsrGl => Some(oicsr_gl_value_grad(model)?),
            Self::L1Scale => Some(l1_scale_value_grad(model)?),
        })
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::L2, Self::SeparatedGl, Self::OicsrGl, Self::L1Scale]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown regularizer '{s}'"))
    }
}

/// `Σ w²` over every dense/conv weight; gradient `2w`.
pub fn l2_value_grad(model: &Model) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(model);
    let mut value = 0.0;
    for (idx, layer) in model.layers().iter().enumerate() {
        if let Some(w) = layer.weight() {
            let g = grads.get_mut(idx, ParamSlot::Weight).unwrap();
            for (g, &w) in g.iter_mut().zip(w.data()) {
                value += w * w;
                *g = 2.0 * w;
            }
        }
    }
    (value, grads)
}

/// `Σ_l Σ_i ‖W^l_{i,:}‖₂` over every weighted layer except the classifier.
pub fn separated_gl_value_grad(model: &Model) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(model);
    let mut value = 0.0;
    for pair in model.pairs() {
        let w = model.layer(pair.out_layer).weight().unwrap();
        let g = grads.get_mut(pair.out_layer, ParamSlot::Weight).unwrap();
        let row = w.numel() / pair.channel_count;
        for (w_row, g_row) in w.data().chunks(row).zip(g.chunks_mut(row)) {
            let norm = w_row.iter().map(|v| v * v).sum::<f64>().sqrt();
            value += norm;
            if norm > GROUP_NORM_EPS {
                g_row.iter_mut().zip(w_row).for_each(|(g, w)| *g = w / norm);
            }
        }
    }
    (value, grads)
}

/// `Σ_pairs Σ_i ‖out_i ⊕ in_i‖₂`. A weight that sits in the in-slice of one
/// pair and the out-slice of the next receives both contributions.
pub fn oicsr_gl_value_grad(model: &Model) -> Result<(f64, Gradients), RegularizerError> {
    if model.pairs().is_empty() {
        return Err(RegularizerError::NoPairs);
    }
    let mut grads = Gradients::zeros_like(model);
    let mut value = 0.0;
    for (p, pair) in model.pairs().iter().enumerate() {
        let w_out = model.layer(pair.out_layer).weight().unwrap().data();
        let w_in = model.layer(pair.in_layer).weight().unwrap().data();
        for i in 0..pair.channel_count {
            let out_idx = model.out_channel_indices(p, i).expect("valid channel");
            let in_idx = model.in_channel_indices(p, i).expect("valid channel");
            let sq: f64 = w_out[out_idx.clone()].iter().map(|v| v * v).sum::<f64>()
                + in_idx.iter().map(|&j| w_in[j] * w_in[j]).sum::<f64>();
            let norm = sq.sqrt();
            value += norm;
            if norm <= GROUP_NORM_EPS {
                continue;
            }
            let g_out = grads.get_mut(pair.out_layer, ParamSlot::Weight).unwrap();
            for j in out_idx {
                g_out[j] += w_out[j] / norm;
            }
            let g_in = grads.get_mut(pair.in_layer, ParamSlot::Weight).unwrap();
            for j in in_idx {
                g_in[j] += w_in[j] / norm;
            }
        }
    }
    Ok((value, grads))
}

/// `Σ |γ|` over every scale_shift layer; gradient `sign(γ)` with `sign(0) = 0`.
pub fn l1_scale_value_grad(model: &Model) -> Result<(f64, Gradients), RegularizerError> {
    let mut grads = Gradients::zeros_like(model);
    let mut value = 0.0;
    let mut found = false;
    for (idx, layer) in model.layers().iter().enumerate() {
        if let Layer::ScaleShift { gamma, .. } = layer {
            found = true;
            let g = grads.get_mut(idx, ParamSlot::Gamma).unwrap();
            for (g, &v) in g.iter_mut().zip(gamma.data()) {
                value += v.abs();
                *g = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
    }
    if !found {
        return Err(RegularizerError::NoScaleLayers);
    }
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn two_dense(w1: &[f64], s1: [usize; 2], w2: &[f64], s2: [usize; 2]) -> Model {
        Model::from_layers(
            vec![s1[1]],
            vec![
                Layer::Dense {
                    weight: Tensor::new(s1.to_vec(), w1.to_vec()).unwrap(),
                    bias: None,
                },
                Layer::Dense {
                    weight: Tensor::new(s2.to_vec(), w2.to_vec()).unwrap(),
                    bias: None,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn l2_hand_values() {
        let m = two_dense(&[3.0], [1, 1], &[0.0], [1, 1]);
        let (v, g) = l2_value_grad(&m);
        assert_eq!(v, 9.0);
        assert_eq!(g.get(0, ParamSlot::Weight).unwrap(), &[6.0]);
        assert_eq!(g.get(1, ParamSlot::Weight).unwrap(), &[0.0]);
    }

    #[test]
    fn separated_gl_hand_values() {
        let m = two_dense(&[3.0, 4.0, 0.0, 0.0], [2, 2], &[1.0, 1.0], [1, 2]);
        let (v, g) = separated_gl_value_grad(&m);
        assert_eq!(v, 5.0);
        assert_eq!(g.get(0, ParamSlot::Weight).unwrap(), &[0.6, 0.8, 0.0, 0.0]);
        // the classifier is not regularized
        assert_eq!(g.get(1, ParamSlot::Weight).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn oicsr_hand_values() {
        let m = two_dense(&[3.0, 4.0], [1, 2], &[12.0], [1, 1]);
        let (v, g) = oicsr_gl_value_grad(&m).unwrap();
        assert_eq!(v, 13.0);
        assert_eq!(
            g.get(0, ParamSlot::Weight).unwrap(),
            &[3.0 / 13.0, 4.0 / 13.0]
        );
        assert_eq!(g.get(1, ParamSlot::Weight).unwrap(), &[12.0 / 13.0]);
    }

    #[test]
    fn oicsr_zero_model() {
        let m = two_dense(&[0.0; 4], [2, 2], &[0.0; 2], [1, 2]);
        let (v, g) = oicsr_gl_value_grad(&m).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|(_, _, g)| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn oicsr_without_pairs_is_an_error() {
        let m = Model::from_layers(
            vec![2],
            vec![Layer::Dense {
                weight: Tensor::zeros(&[1, 2]),
                bias: None,
            }],
        )
        .unwrap();
        assert_eq!(oicsr_gl_value_grad(&m), Err(RegularizerError::NoPairs));
    }

    #[test]
    fn l1_scale_hand_values() {
        let layers = vec![
            Layer::Dense {
                weight: Tensor::zeros(&[2, 2]),
                bias: None,
            },
            Layer::ScaleShift {
                gamma: Tensor::new(vec![2], vec![-2.0, 0.5]).unwrap(),
                beta: Tensor::zeros(&[2]),
            },
            Layer::Dense {
                weight: Tensor::zeros(&[1, 2]),
                bias: None,
            },
        ];
        let mut m = Model::from_layers(vec![2], layers).unwrap();
        let (v, g) = l1_scale_value_grad(&m).unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(g.get(1, ParamSlot::Gamma).unwrap(), &[-1.0, 1.0]);

        m.set_param(1, ParamSlot::Gamma, vec![0.0, 0.0]).unwrap();
        let (v, g) = l1_scale_value_grad(&m).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.get(1, ParamSlot::Gamma).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn l1_scale_requires_scale_layers() {
        let m = two_dense(&[1.0], [1, 1], &[1.0], [1, 1]);
        assert_eq!(
            l1_scale_value_grad(&m).unwrap_err(),
            RegularizerError::NoScaleLayers
        );
    }

    #[test]
    fn kind_names_parse() {
        for k in ["l2", "separated_gl", "oicsr_gl", "l1_scale"] {
            assert_eq!(k.parse::<RegularizerKind>().unwrap().name(), k);
        }
        assert!("l3".parse::<RegularizerKind>().is_err());
    }
}
