//! Brute-force reference implementations.

use oicsr::pruner::apply_surgery;
use oicsr::{Layer, Model, OutInChannelGroup, PruningPlan, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// FLOPs recomputed from layer shapes: `2·OC·IC` for dense, and
/// `2·OC·IC·kh·kw·H'·W'` for conv.
pub fn flops_from_shapes(model: &Model) -> u64 {
    let mut total = 0u64;
    for (idx, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Dense { weight, .. } => {
                total += 2 * (weight.shape()[0] * weight.shape()[1]) as u64;
            }
            Layer::Conv2d { weight, .. } => {
                let s = weight.shape();
                let out = model.layer_output_shape(idx);
                total += 2 * (s[0] * s[1] * s[2] * s[3] * out[1] * out[2]) as u64;
            }
            _ => {}
        }
    }
    total
}

fn plan_for(model: &Model, removals: &[OutInChannelGroup]) -> PruningPlan {
    PruningPlan {
        iteration: 0,
        target_ratio: 0.0,
        removals: removals.to_vec(),
        pair_channel_counts: model.pairs().iter().map(|p| p.channel_count).collect(),
        original_flops: 0,
        predicted_flops: 0,
        achieved_flops_ratio: 0.0,
        capped_pairs: Vec::new(),
        target_reached: false,
    }
}

/// Greedy selection simulated by actually performing surgery after every
/// tentative removal and recounting FLOPs from the resulting shapes.
pub fn exhaustive_greedy(
    model: &Model,
    scores: &[OutInChannelGroup],
    target: f64,
    original_flops: u64,
) -> Vec<(usize, usize)> {
    let mut order = scores.to_vec();
    order.sort_by(|a, b| {
        a.energy
            .partial_cmp(&b.energy)
            .unwrap()
            .then((a.pair_id, a.channel).cmp(&(b.pair_id, b.channel)))
    });
    let counts: Vec<usize> = model.pairs().iter().map(|p| p.channel_count).collect();
    let mut taken: Vec<OutInChannelGroup> = Vec::new();
    for g in order {
        let current = flops_from_shapes(&apply_surgery(model, &plan_for(model, &taken)).unwrap());
        if (original_flops - current) as f64 >= target * original_flops as f64 {
            break;
        }
        let already = taken.iter().filter(|t| t.pair_id == g.pair_id).count();
        if already >= counts[g.pair_id] / 2 {
            continue;
        }
        taken.push(g);
    }
    taken.iter().map(|g| (g.pair_id, g.channel)).collect()
}

/// Random energies for every group; about a third are drawn from a small set
/// of values so that ties are common.
pub fn random_scores(rng: &mut ChaCha8Rng, model: &Model) -> Vec<OutInChannelGroup> {
    let mut scores = Vec::new();
    for (p, pair) in model.pairs().iter().enumerate() {
        for i in 0..pair.channel_count {
            let energy = if rng.random_bool(0.35) {
                rng.random_range(0..4) as f64 * 0.5
            } else {
                rng.random_range(0.0..3.0)
            };
            scores.push(OutInChannelGroup {
                pair_id: p,
                channel: i,
                energy,
            });
        }
    }
    scores.shuffle(rng);
    scores
}

/// Random set of groups that leaves at least one channel in every pair.
pub fn random_group_set(rng: &mut ChaCha8Rng, model: &Model) -> Vec<OutInChannelGroup> {
    let mut out = Vec::new();
    for (p, pair) in model.pairs().iter().enumerate() {
        let mut channels: Vec<usize> = (0..pair.channel_count).collect();
        channels.shuffle(rng);
        let k = rng.random_range(0..pair.channel_count);
        for &c in &channels[..k] {
            out.push(OutInChannelGroup {
                pair_id: p,
                channel: c,
                energy: 0.0,
            });
        }
    }
    out
}

/// Largest absolute output difference between zeroing `groups` in place and
/// surgically removing them, on a random batch.
pub fn zero_vs_surgery_gap(
    rng: &mut ChaCha8Rng,
    model: &Model,
    groups: &[OutInChannelGroup],
) -> f64 {
    let x: Tensor = random_batch(rng, model, 4);
    let mut zeroed = model.clone();
    for g in groups {
        zeroed.zero_group(g.pair_id, g.channel).unwrap();
    }
    let pruned = apply_surgery(model, &plan_for(model, groups)).unwrap();
    let a = zeroed.predict(&x).unwrap();
    let b = pruned.predict(&x).unwrap();
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}
