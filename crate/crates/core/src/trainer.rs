//! Nesterov SGD and the train / fine-tune loops.
//!
//! The minimized objective is `mean cross-entropy + λ_s·R(W)` where `R` is the
//! structured penalty chosen by [`RegularizerKind`]. The plain `λ` term is
//! applied as decoupled weight decay inside the optimizer step.

use std::io::Write;
use std::sync::mpsc::Sender;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::grads::Gradients;
use crate::graph::Graph;
use crate::importance::{score_all, Criterion};
use crate::model::{Model, ParamSlot};
use crate::pruner::PruneHooks;
use crate::regularizers::{RegularizerKind, DEFAULT_LAMBDA, DEFAULT_LAMBDA_S};

/// Groups with out-in-channel energy below this are reported as dead.
pub const DEAD_GROUP_ENERGY: f64 = 1e-8;

const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("dataset does not fit the model: {0}")]
    DataMismatch(String),
}

fn default_momentum() -> f64 {
    0.9
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_lambda_s() -> f64 {
    DEFAULT_LAMBDA_S
}

/// All hyperparameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// `λ`, applied as decoupled decay on dense/conv weights.
    #[serde(default = "default_lambda")]
    pub weight_decay: f64,
    /// `λ_s`, coefficient of the structured penalty.
    #[serde(default = "default_lambda_s")]
    pub lambda_s: f64,
    pub regularizer: RegularizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(epoch, multiplier)`: from `epoch` (0-based) on, the learning rate is
    /// `lr · multiplier`. `None` means ×0.1 at 50% and ×0.01 at 75% of the epochs.
    #[serde(default)]
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    #[serde(default)]
    pub seed: u64,
    /// Cumulative FLOPs pruning ratios, one per pruning iteration.
    #[serde(default)]
    pub prune_ratios: Vec<f64>,
    /// `None` selects the criterion that matches the regularizer.
    #[serde(default)]
    pub criterion: Option<Criterion>,
    #[serde(default)]
    pub fine_tune_epochs: usize,
    /// `None` means `lr / 10`.
    #[serde(default)]
    pub fine_tune_lr: Option<f64>,
}

impl RunConfig {
    pub fn new(regularizer: RegularizerKind, lr: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            lr,
            momentum: default_momentum(),
            weight_decay: DEFAULT_LAMBDA,
            lambda_s: DEFAULT_LAMBDA_S,
            regularizer,
            batch_size,
            epochs,
            lr_schedule: None,
            seed: 0,
            prune_ratios: Vec::new(),
            criterion: None,
            fine_tune_epochs: 0,
            fine_tune_lr: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if [self.weight_decay, self.lambda_s]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return bad("weight_decay and lambda_s must be nonnegative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(s) = &self.lr_schedule {
            if s.windows(2).any(|w| w[1].0 <= w[0].0) {
                return bad("lr_schedule epochs must be strictly increasing".into());
            }
            if s.iter().any(|&(_, m)| m.is_nan() || m <= 0.0) {
                return bad("lr_schedule multipliers must be positive".into());
            }
        }
        if let Some(lr) = self.fine_tune_lr {
            if lr.is_nan() || lr <= 0.0 {
                return bad(format!("fine_tune_lr must be positive, got {lr}"));
            }
        }
        if self.prune_ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return bad("prune_ratios must lie in [0, 1)".into());
        }
        if self.prune_ratios.windows(2).any(|w| w[1] < w[0]) {
            return bad("prune_ratios must be nondecreasing".into());
        }
        Ok(())
    }

    /// Criterion to rank channels with, defaulting to the one that matches the regularizer.
    pub fn pruning_criterion(&self) -> Criterion {
        self.criterion.unwrap_or(match self.regularizer {
            RegularizerKind::OicsrGl => Criterion::OutInChannel,
            RegularizerKind::L1Scale => Criterion::ScaleMagnitude,
            RegularizerKind::L2 | RegularizerKind::SeparatedGl => Criterion::OutChannel,
        })
    }

    fn schedule(&self, epochs: usize) -> Vec<(usize, f64)> {
        match &self.lr_schedule {
            Some(s) => s.clone(),
            None => {
                let mut s = Vec::new();
                for (e, m) in [(epochs / 2, 0.1), (epochs * 3 / 4, 0.01)] {
                    if e == 0 {
                        continue;
                    }
                    match s.last_mut() {
                        Some((last, mult)) if *last == e => *mult = m,
                        _ => s.push((e, m)),
                    }
                }
                s
            }
        }
    }
}

/// Learning-rate multiplier in effect at `epoch`.
fn multiplier(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .map_or(1.0, |&(_, m)| m)
}

/// One epoch's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean data loss over the epoch's batches.
    pub loss: f64,
    /// `λ_s·R(W)` at the end of the epoch.
    pub reg: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Sum of out-in-channel energies.
    pub energy_sum: f64,
    pub dead_groups: usize,
}

pub const METRICS_HEADER: &str = "epoch,loss,reg,train_acc,eval_acc,energy_sum,dead_groups";

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            w,
            "{},{:e},{:e},{},{},{:e},{}",
            m.epoch, m.loss, m.reg, m.train_acc, m.eval_acc, m.energy_sum, m.dead_groups
        )?;
    }
    Ok(())
}

/// Receives metrics as each epoch completes.
pub trait MetricsSink {
    fn record(&mut self, metrics: &EpochMetrics);
}

impl MetricsSink for Vec<EpochMetrics> {
    fn record(&mut self, metrics: &EpochMetrics) {
        self.push(metrics.clone());
    }
}

impl MetricsSink for Sender<EpochMetrics> {
    fn record(&mut self, metrics: &EpochMetrics) {
        // a dropped receiver just means nobody is listening
        let _ = self.send(metrics.clone());
    }
}

impl MetricsSink for () {
    fn record(&mut self, _: &EpochMetrics) {}
}

/// Optimizer state: one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Gradients,
}

impl SgdState {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: Gradients::zeros_like(model),
        }
    }
}

/// `v ← μv + g;  w ← w − lr·(g + μv) − lr·λ·w`, with the decay term on dense/conv weights only.
pub fn sgd_nesterov_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for layer in 0..model.layers().len() {
        for slot in model.layer(layer).slots() {
            let g = grads.get(layer, slot).expect("gradient shaped like model");
            let v = state
                .velocity
                .get_mut(layer, slot)
                .expect("state shaped like model");
            let decay = if slot == ParamSlot::Weight {
                weight_decay
            } else {
                0.0
            };
            let w = model.param_mut(layer, slot).unwrap().data_mut();
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g;
                *w -= lr * (g + momentum * *v) + lr * decay * *w;
            }
        }
    }
}

/// Fraction of `data` the model classifies correctly.
pub fn accuracy(model: &Model, data: &Dataset) -> crate::Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Sum of out-in-channel energies and the number of dead groups.
pub fn energy_summary(model: &Model) -> (f64, usize) {
    let scores = score_all(model, Criterion::OutInChannel).expect("out_in_channel always applies");
    let sum = scores.iter().map(|g| g.energy).sum();
    let dead = scores
        .iter()
        .filter(|g| g.energy < DEAD_GROUP_ENERGY)
        .count();
    (sum, dead)
}

fn check_data(model: &Model, data: &Dataset) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::DataMismatch("dataset is empty".into()));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(TrainError::DataMismatch(format!(
            "samples have shape {:?}, model expects {:?}",
            data.sample_shape(),
            model.input_shape()
        )));
    }
    let classes = model.output_shape();
    if classes.len() != 1 || classes[0] < data.num_classes {
        return Err(TrainError::DataMismatch(format!(
            "model outputs {classes:?}, dataset has {} classes",
            data.num_classes
        )));
    }
    Ok(())
}

/// Trains from the current weights for `config.epochs` epochs.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    eval_data: &Dataset,
    config: &RunConfig,
    sink: &mut dyn MetricsSink,
) -> crate::Result<Vec<EpochMetrics>> {
    run_epochs(
        model,
        train_data,
        eval_data,
        config,
        config.epochs,
        config.lr,
        config.seed,
        sink,
    )
}

/// Retrains a pruned model with the same structured penalty, fresh momentum,
/// and learning rate `fine_tune_lr` (default `lr / 10`).
pub fn fine_tune(
    model: &mut Model,
    train_data: &Dataset,
    eval_data: &Dataset,
    config: &RunConfig,
    epochs: usize,
    sink: &mut dyn MetricsSink,
) -> crate::Result<Vec<EpochMetrics>> {
    let lr = config.fine_tune_lr.unwrap_or(config.lr / 10.0);
    run_epochs(
        model,
        train_data,
        eval_data,
        config,
        epochs,
        lr,
        config.seed ^ 0x5EED_F1AE,
        sink,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut Model,
    train_data: &Dataset,
    eval_data: &Dataset,
    config: &RunConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> crate::Result<Vec<EpochMetrics>> {
    config.validate()?;
    check_data(model, train_data)?;
    check_data(model, eval_data)?;
    let schedule = config.schedule(epochs);
    let mut state = SgdState::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut history = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let epoch_lr = lr * multiplier(&schedule, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = train_data.batch(batch);
            let mut graph = Graph::new();
            let params = model.bind(&mut graph, true);
            let xid = graph.constant(x);
            let logits = model.forward(&mut graph, &params, xid)?;
            let loss = graph.softmax_cross_entropy(logits, &y)?;
            let loss_value = graph.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    loss: loss_value,
                }
                .into());
            }
            correct += graph
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            loss_sum += loss_value * batch.len() as f64;
            graph.backward(loss)?;
            let mut grads = Gradients::from_graph(model, &graph, &params);
            if config.lambda_s > 0.0 {
                if let Some((_, reg_grads)) = config.regularizer.structured_value_grad(model)? {
                    grads.add_scaled(&reg_grads, config.lambda_s);
                }
            }
            sgd_nesterov_step(
                model,
                &grads,
                &mut state,
                epoch_lr,
                config.momentum,
                config.weight_decay,
            );
        }
        let reg = if config.lambda_s > 0.0 {
            config
                .regularizer
                .structured_value_grad(model)?
                .map_or(0.0, |(v, _)| config.lambda_s * v)
        } else {
            0.0
        };
        let (energy_sum, dead_groups) = energy_summary(model);
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / train_data.len() as f64,
            reg,
            train_acc: correct as f64 / train_data.len() as f64,
            eval_acc: accuracy(model, eval_data)?,
            energy_sum,
            dead_groups,
        };
        log::debug!(
            "epoch {}: loss {:.4} reg {:.4} train {:.3} eval {:.3}",
            metrics.epoch,
            metrics.loss,
            metrics.reg,
            metrics.train_acc,
            metrics.eval_acc
        );
        sink.record(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

/// [`PruneHooks`] backed by [`fine_tune`]; keeps each iteration's metrics.
pub struct FineTuneHooks<'a> {
    pub train_data: &'a Dataset,
    pub eval_data: &'a Dataset,
    pub config: RunConfig,
    pub history: Vec<(usize, Vec<EpochMetrics>)>,
}

impl<'a> FineTuneHooks<'a> {
    pub fn new(train_data: &'a Dataset, eval_data: &'a Dataset, config: RunConfig) -> Self {
        Self {
            train_data,
            eval_data,
            config,
            history: Vec::new(),
        }
    }
}

impl PruneHooks for FineTuneHooks<'_> {
    fn evaluate(&mut self, model: &Model) -> crate::Result<f64> {
        accuracy(model, self.eval_data)
    }

    fn fine_tune(&mut self, model: &mut Model, iteration: usize) -> crate::Result<()> {
        let mut config = self.config.clone();
        config.seed = config.seed.wrapping_add(iteration as u64);
        let metrics = fine_tune(
            model,
            self.train_data,
            self.eval_data,
            &config,
            config.fine_tune_epochs,
            &mut (),
        )?;
        self.history.push((iteration, metrics));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use crate::tensor::Tensor;

    fn scalar_model(w: f64) -> Model {
        Model::from_layers(
            vec![1],
            vec![Layer::Dense {
                weight: Tensor::new(vec![1, 1], vec![w]).unwrap(),
                bias: None,
            }],
        )
        .unwrap()
    }

    fn grad_of(model: &Model, g: f64) -> Gradients {
        let mut grads = Gradients::zeros_like(model);
        grads.get_mut(0, ParamSlot::Weight).unwrap()[0] = g;
        grads
    }

    fn weight(model: &Model) -> f64 {
        model.layer(0).weight().unwrap().data()[0]
    }

    #[test]
    fn nesterov_hand_step() {
        let mut m = scalar_model(1.0);
        let mut state = SgdState::new(&m);
        let g = grad_of(&m, 1.0);
        sgd_nesterov_step(&mut m, &g, &mut state, 0.1, 0.9, 0.0);
        assert!((weight(&m) - 0.81).abs() < 1e-15);
        assert_eq!(state.velocity.get(0, ParamSlot::Weight).unwrap(), &[1.0]);
    }

    #[test]
    fn zero_gradient_keeps_weight() {
        let mut m = scalar_model(0.7);
        let mut state = SgdState::new(&m);
        let g = grad_of(&m, 0.0);
        sgd_nesterov_step(&mut m, &g, &mut state, 0.1, 0.9, 0.0);
        assert_eq!(weight(&m), 0.7);
    }

    #[test]
    fn no_momentum_is_plain_sgd() {
        let mut m = scalar_model(0.7);
        let mut state = SgdState::new(&m);
        for g in [0.3, -1.2, 0.5] {
            let before = weight(&m);
            let grads = grad_of(&m, g);
            sgd_nesterov_step(&mut m, &grads, &mut state, 0.05, 0.0, 0.0);
            assert_eq!(weight(&m), before - 0.05 * g);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut m = scalar_model(2.0);
        let mut state = SgdState::new(&m);
        let grads = grad_of(&m, 0.0);
        sgd_nesterov_step(&mut m, &grads, &mut state, 0.1, 0.9, 0.5);
        assert!((weight(&m) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn default_schedule() {
        let c = RunConfig::new(RegularizerKind::L2, 0.1, 8, 8);
        let s = c.schedule(8);
        assert_eq!(s, vec![(4, 0.1), (6, 0.01)]);
        assert_eq!(multiplier(&s, 0), 1.0);
        assert_eq!(multiplier(&s, 4), 0.1);
        assert_eq!(multiplier(&s, 7), 0.01);
        assert_eq!(c.schedule(1), vec![]);
        assert_eq!(c.schedule(2), vec![(1, 0.01)]);
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new(RegularizerKind::OicsrGl, 0.1, 8, 2);
        assert!(c.validate().is_ok());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c.momentum = 0.9;
        c.lr_schedule = Some(vec![(3, 0.1), (3, 0.01)]);
        assert!(c.validate().is_err());
        c.lr_schedule = None;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_criteria() {
        let c = |k| RunConfig::new(k, 0.1, 1, 1).pruning_criterion();
        assert_eq!(c(RegularizerKind::OicsrGl), Criterion::OutInChannel);
        assert_eq!(c(RegularizerKind::SeparatedGl), Criterion::OutChannel);
        assert_eq!(c(RegularizerKind::L2), Criterion::OutChannel);
        assert_eq!(c(RegularizerKind::L1Scale), Criterion::ScaleMagnitude);
    }
}
