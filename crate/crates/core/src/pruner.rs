//! FLOPs accounting, global greedy channel selection and channel surgery.
//!
//! FLOPs count one multiply-add as 2 FLOPs: a conv layer costs
//! `2·OC·IC·kh·kw·H'·W'`, a dense layer `2·OC·IC`, everything else 0.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::{score_all, sort_ascending, Criterion, OutInChannelGroup};
use crate::model::{Layer, Model, ParamSlot};
use crate::tensor::Tensor;

pub const FLOPS_CONVENTION: &str = "FLOPs convention: 1 multiply-add = 2 FLOPs";

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("pruning ratio {0} outside [0, 1)")]
    InvalidRatio(f64),
    #[error("pruning ratios must be nondecreasing: {0:?}")]
    RatiosNotMonotone(Vec<f64>),
    #[error("stale plan: {0}")]
    StalePlan(String),
    #[error("malformed plan file at line {line}: {detail}")]
    PlanFormat { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl FlopsReport {
    /// Writes `layer,kind,flops,params` rows preceded by a `#` convention line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {FLOPS_CONVENTION}")?;
        writeln!(w, "layer,kind,flops,params")?;
        for l in &self.per_layer {
            writeln!(w, "{},{},{},{}", l.layer, l.kind, l.flops, l.params)?;
        }
        writeln!(w, "total,,{},{}", self.total_flops, self.total_params)
    }
}

/// `2·kh·kw·H'·W'` for conv, `2` for dense: FLOPs per (out-channel, in-column) pair.
fn flops_unit(model: &Model, idx: usize) -> u64 {
    match model.layer(idx) {
        Layer::Conv2d { weight, .. } => {
            let s = weight.shape();
            let out = model.layer_output_shape(idx);
            2 * (s[2] * s[3] * out[1] * out[2]) as u64
        }
        Layer::Dense { .. } => 2,
        _ => 0,
    }
}

pub fn count_flops(model: &Model) -> FlopsReport {
    let per_layer: Vec<LayerFlops> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(idx, layer)| {
            let flops = layer.weight().map_or(0, |w| {
                flops_unit(model, idx) * (w.shape()[0] * w.shape()[1]) as u64
            });
            let params = layer
                .slots()
                .into_iter()
                .map(|s| layer.param(s).unwrap().numel() as u64)
                .sum();
            LayerFlops {
                layer: idx,
                kind: layer.kind().to_string(),
                flops,
                params,
            }
        })
        .collect();
    FlopsReport {
        total_flops: per_layer.iter().map(|l| l.flops).sum(),
        total_params: per_layer.iter().map(|l| l.params).sum(),
        per_layer,
    }
}

/// Tracks total FLOPs while channels are hypothetically removed.
#[derive(Debug, Clone)]
pub struct FlopsSimulator {
    /// Per weighted layer: (unit, out channels, in columns).
    layers: Vec<Option<(u64, u64, u64)>>,
    pairs: Vec<(usize, usize, u64)>,
    total: u64,
}

impl FlopsSimulator {
    pub fn new(model: &Model) -> Self {
        let layers: Vec<_> = model
            .layers()
            .iter()
            .enumerate()
            .map(|(idx, l)| {
                l.weight().map(|w| {
                    (
                        flops_unit(model, idx),
                        w.shape()[0] as u64,
                        w.shape()[1] as u64,
                    )
                })
            })
            .collect();
        let total = layers.iter().flatten().map(|(u, o, i)| u * o * i).sum();
        let pairs = model
            .pairs()
            .iter()
            .map(|p| (p.out_layer, p.in_layer, p.in_multiplicity as u64))
            .collect();
        Self {
            layers,
            pairs,
            total,
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Removes one channel of `pair`: a row of its out-layer and `m` columns of its in-layer.
    pub fn remove_channel(&mut self, pair: usize) {
        let (out_layer, in_layer, m) = self.pairs[pair];
        let (unit, oc, ic) = self.layers[out_layer].as_mut().unwrap();
        self.total -= *unit * *ic;
        *oc -= 1;
        let (unit, oc, ic) = self.layers[in_layer].as_mut().unwrap();
        self.total -= *unit * *oc * m;
        *ic -= m;
    }
}

/// Channels selected for removal in one pruning iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub iteration: usize,
    pub target_ratio: f64,
    /// In selection order (ascending energy).
    pub removals: Vec<OutInChannelGroup>,
    /// Channel count of every pair when the plan was made.
    pub pair_channel_counts: Vec<usize>,
    pub original_flops: u64,
    pub predicted_flops: u64,
    /// Fraction of the original FLOPs removed once this plan is applied.
    pub achieved_flops_ratio: f64,
    /// Pairs where the 50% cap rejected at least one candidate.
    pub capped_pairs: Vec<usize>,
    pub target_reached: bool,
}

fn removed_ratio(original: u64, current: u64) -> f64 {
    if original == 0 {
        0.0
    } else {
        original.saturating_sub(current) as f64 / original as f64
    }
}

fn target_met(original: u64, current: u64, target: f64) -> bool {
    original.saturating_sub(current) as f64 >= target * original as f64
}

/// Greedy global selection: walks groups in ascending energy, skipping groups
/// whose pair already lost `⌊channels/2⌋` channels in this plan, until at least
/// `target_ratio` of `original_flops` has been removed.
pub fn select_prune_set(
    model: &Model,
    scores: &[OutInChannelGroup],
    target_ratio: f64,
    original_flops: u64,
) -> Result<PruningPlan, PruneError> {
    if !(0.0..1.0).contains(&target_ratio) {
        return Err(PruneError::InvalidRatio(target_ratio));
    }
    let counts: Vec<usize> = model.pairs().iter().map(|p| p.channel_count).collect();
    let mut seen = BTreeSet::new();
    for g in scores {
        if g.pair_id >= counts.len() || g.channel >= counts[g.pair_id] {
            return Err(PruneError::StalePlan(format!(
                "score for pair {} channel {} does not match the model",
                g.pair_id, g.channel
            )));
        }
        if !seen.insert((g.pair_id, g.channel)) {
            return Err(PruneError::StalePlan(format!(
                "duplicate score for pair {} channel {}",
                g.pair_id, g.channel
            )));
        }
    }

    let mut order = scores.to_vec();
    sort_ascending(&mut order);
    let mut sim = FlopsSimulator::new(model);
    let mut removed = vec![0usize; counts.len()];
    let mut capped = BTreeSet::new();
    let mut removals = Vec::new();
    for g in order {
        if target_met(original_flops, sim.total(), target_ratio) {
            break;
        }
        if removed[g.pair_id] >= counts[g.pair_id] / 2 {
            capped.insert(g.pair_id);
            continue;
        }
        sim.remove_channel(g.pair_id);
        removed[g.pair_id] += 1;
        removals.push(g);
    }
    let predicted = sim.total();
    Ok(PruningPlan {
        iteration: 0,
        target_ratio,
        removals,
        pair_channel_counts: counts,
        original_flops,
        predicted_flops: predicted,
        achieved_flops_ratio: removed_ratio(original_flops, predicted),
        capped_pairs: capped.into_iter().collect(),
        target_reached: target_met(original_flops, predicted, target_ratio),
    })
}

fn keep_rows(t: &Tensor, drop: &BTreeSet<usize>) -> Tensor {
    let rows = t.shape()[0];
    let row_len = t.numel() / rows;
    let data: Vec<f64> = t
        .data()
        .chunks(row_len)
        .enumerate()
        .filter(|(r, _)| !drop.contains(r))
        .flat_map(|(_, row)| row.iter().copied())
        .collect();
    let mut shape = t.shape().to_vec();
    shape[0] = rows - drop.len();
    Tensor::new(shape, data).expect("row removal keeps shape consistent")
}

/// Drops the column blocks `[c·m, (c+1)·m)` of axis 1 for every `c` in `drop`.
fn keep_col_blocks(t: &Tensor, drop: &BTreeSet<usize>, m: usize) -> Tensor {
    let s = t.shape();
    let (rows, cols) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(t.numel() - rows * drop.len() * m * inner);
    for o in 0..rows {
        for c in 0..cols {
            if drop.contains(&(c / m)) {
                continue;
            }
            let start = (o * cols + c) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = cols - drop.len() * m;
    Tensor::new(shape, data).expect("column removal keeps shape consistent")
}

/// Physically removes every group in `plan`, returning the smaller model.
pub fn apply_surgery(model: &Model, plan: &PruningPlan) -> Result<Model, PruneError> {
    let counts: Vec<usize> = model.pairs().iter().map(|p| p.channel_count).collect();
    if counts != plan.pair_channel_counts {
        return Err(PruneError::StalePlan(format!(
            "plan was made for pair widths {:?}, model has {:?}",
            plan.pair_channel_counts, counts
        )));
    }
    let mut per_pair: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); counts.len()];
    for g in &plan.removals {
        if g.pair_id >= counts.len() || g.channel >= counts[g.pair_id] {
            return Err(PruneError::StalePlan(format!(
                "pair {} channel {} out of range",
                g.pair_id, g.channel
            )));
        }
        if !per_pair[g.pair_id].insert(g.channel) {
            return Err(PruneError::StalePlan(format!(
                "pair {} channel {} listed twice",
                g.pair_id, g.channel
            )));
        }
    }
    for (p, drop) in per_pair.iter().enumerate() {
        if drop.len() >= counts[p] {
            return Err(PruneError::StalePlan(format!(
                "plan removes every channel of pair {p}"
            )));
        }
    }

    let mut out = model.clone();
    let pairs = model.pairs().to_vec();
    for (pair, drop) in pairs.iter().zip(&per_pair) {
        if drop.is_empty() {
            continue;
        }
        let layers = out.layers_mut();
        for slot in [ParamSlot::Weight, ParamSlot::Bias] {
            if let Some(t) = layers[pair.out_layer].param_mut(slot) {
                *t = keep_rows(t, drop);
            }
        }
        let w = layers[pair.in_layer].param_mut(ParamSlot::Weight).unwrap();
        *w = keep_col_blocks(w, drop, pair.in_multiplicity);
        for &l in &pair.intervening {
            if let Layer::ScaleShift { gamma, beta } = &mut layers[l] {
                *gamma = keep_rows(gamma, drop);
                *beta = keep_rows(beta, drop);
            }
        }
    }
    out.rederive()
        .map_err(|e| PruneError::StalePlan(format!("surgery broke the model: {e}")))?;
    Ok(out)
}

/// Writes plan rows `iteration,pair_id,channel,energy`.
pub fn write_plan_csv<'a, W: Write>(
    plans: impl IntoIterator<Item = &'a PruningPlan>,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "iteration,pair_id,channel,energy")?;
    for plan in plans {
        for g in &plan.removals {
            writeln!(
                w,
                "{},{},{},{:e}",
                plan.iteration, g.pair_id, g.channel, g.energy
            )?;
        }
    }
    Ok(())
}

/// Reads plan rows back as `(iteration, group)`.
pub fn read_plan_csv<R: BufRead>(r: R) -> Result<Vec<(usize, OutInChannelGroup)>, PruneError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if n == 0 {
            if line.trim() != "iteration,pair_id,channel,energy" {
                return Err(PruneError::PlanFormat {
                    line: 1,
                    detail: format!("unexpected header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| PruneError::PlanFormat {
            line: n + 1,
            detail,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s}: {e}")));
        let energy = f[3]
            .parse::<f64>()
            .map_err(|e| bad(format!("{}: {e}", f[3])))?;
        out.push((
            int(f[0])?,
            OutInChannelGroup {
                pair_id: int(f[1])?,
                channel: int(f[2])?,
                energy,
            },
        ));
    }
    Ok(out)
}

/// Callbacks the pruning loop needs from the training side.
pub trait PruneHooks {
    /// Accuracy of `model` on held-out data, in `[0, 1]`.
    fn evaluate(&mut self, model: &Model) -> crate::Result<f64>;
    /// Retrains the pruned model in place.
    fn fine_tune(&mut self, model: &mut Model, iteration: usize) -> crate::Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub plan: PruningPlan,
    pub flops: FlopsReport,
    pub accuracy_before_fine_tune: f64,
    pub accuracy_after_fine_tune: f64,
}

/// Runs `ratios.len()` prune → fine-tune iterations. Ratios are cumulative
/// fractions of the FLOPs of the model passed in.
pub fn prune_loop(
    model: Model,
    ratios: &[f64],
    criterion: Criterion,
    hooks: &mut dyn PruneHooks,
) -> crate::Result<(Model, Vec<IterationReport>)> {
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(PruneError::InvalidRatio(bad).into());
    }
    if ratios.windows(2).any(|w| w[1] < w[0]) {
        return Err(PruneError::RatiosNotMonotone(ratios.to_vec()).into());
    }
    let original = count_flops(&model).total_flops;
    let mut model = model;
    let mut reports = Vec::with_capacity(ratios.len());
    for (t, &ratio) in ratios.iter().enumerate() {
        let iteration = t + 1;
        let scores = score_all(&model, criterion)?;
        let mut plan = select_prune_set(&model, &scores, ratio, original)?;
        plan.iteration = iteration;
        if !plan.target_reached {
            log::warn!(
                "iteration {iteration}: target {ratio} unreachable under the 50% cap \
                 (achieved {:.4}, capped pairs {:?})",
                plan.achieved_flops_ratio,
                plan.capped_pairs
            );
        }
        model = apply_surgery(&model, &plan)?;
        let flops = count_flops(&model);
        debug_assert_eq!(flops.total_flops, plan.predicted_flops);
        let before = hooks.evaluate(&model)?;
        hooks.fine_tune(&mut model, iteration)?;
        let after = hooks.evaluate(&model)?;
        reports.push(IterationReport {
            iteration,
            plan,
            flops,
            accuracy_before_fine_tune: before,
            accuracy_after_fine_tune: after,
        });
    }
    Ok((model, reports))
}
