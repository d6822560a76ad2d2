mod common;

use common::{random_architecture, random_model, rng};
use oicsr::importance::{groups_holding_fraction, score_all, sort_ascending};
use oicsr::regularizers::{
    l1_scale_value_grad, l2_value_grad, oicsr_gl_value_grad, separated_gl_value_grad,
};
use oicsr::{Criterion, Gradients, Model, ParamSlot};
use proptest::prelude::*;
use rand::Rng;

fn scaled(model: &Model, c: f64) -> Model {
    let mut m = model.clone();
    for idx in 0..m.layers().len() {
        for slot in m.layer(idx).slots() {
            if matches!(slot, ParamSlot::Weight | ParamSlot::Gamma) {
                m.param_mut(idx, slot)
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v *= c);
            }
        }
    }
    m
}

fn step(model: &Model, grads: &Gradients, eta: f64) -> Model {
    let mut m = model.clone();
    for (idx, slot, g) in grads.iter() {
        let t = m.param_mut(idx, slot).unwrap();
        t.data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(w, g)| *w -= eta * g);
    }
    m
}

fn concat_norm(model: &Model, pair: usize, channel: usize) -> f64 {
    let mut v = model.out_channel_slice(pair, channel).unwrap();
    v.extend(model.in_channel_slice(pair, channel).unwrap());
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn with_scale_shift(seed: u64) -> Model {
    let mut r = rng(seed);
    loop {
        let arch = random_architecture(&mut r, 4);
        if arch
            .layers
            .iter()
            .any(|l| matches!(l, oicsr::LayerSpec::ScaleShift))
        {
            return random_model(&mut r, &arch);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oicsr_value_is_sum_of_concatenated_norms(seed in any::<u64>()) {
        let mut r = rng(seed);
        let arch = random_architecture(&mut r, 4);
        let model = random_model(&mut r, &arch);
        let (value, _) = oicsr_gl_value_grad(&model).unwrap();
        let mut want = 0.0;
        for (p, pair) in model.pairs().iter().enumerate() {
            for i in 0..pair.channel_count {
                want += concat_norm(&model, p, i);
            }
        }
        prop_assert!((value - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn penalties_are_homogeneous(seed in any::<u64>(), c in 0.1f64..4.0) {
        let model = with_scale_shift(seed);
        let m = scaled(&model, c);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        prop_assert!(close(oicsr_gl_value_grad(&m).unwrap().0, c * oicsr_gl_value_grad(&model).unwrap().0));
        prop_assert!(close(separated_gl_value_grad(&m).0, c * separated_gl_value_grad(&model).0));
        prop_assert!(close(l1_scale_value_grad(&m).unwrap().0, c * l1_scale_value_grad(&model).unwrap().0));
        prop_assert!(close(l2_value_grad(&m).0, c * c * l2_value_grad(&model).0));
    }

    #[test]
    fn zeroed_groups_get_no_subgradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let arch = random_architecture(&mut r, 4);
        let mut model = random_model(&mut r, &arch);
        let p = r.random_range(0..model.pairs().len());
        let i = r.random_range(0..model.pairs()[p].channel_count);
        let before = oicsr_gl_value_grad(&model).unwrap().0;
        let norm = concat_norm(&model, p, i);
        model.zero_group(p, i).unwrap();
        let (after, grads) = oicsr_gl_value_grad(&model).unwrap();
        // the group's own term vanishes; overlapping groups can only shrink
        prop_assert!(after <= before - norm + 1e-12);
        let pair = model.pairs()[p].clone();
        let g_out = grads.get(pair.out_layer, ParamSlot::Weight).unwrap();
        for j in model.out_channel_indices(p, i).unwrap() {
            prop_assert_eq!(g_out[j], 0.0);
        }
        let g_in = grads.get(pair.in_layer, ParamSlot::Weight).unwrap();
        for j in model.in_channel_indices(p, i).unwrap() {
            prop_assert_eq!(g_in[j], 0.0);
        }
    }

    #[test]
    fn small_gradient_steps_shrink_every_group_penalty(seed in any::<u64>()) {
        let mut r = rng(seed);
        let arch = random_architecture(&mut r, 4);
        let model = random_model(&mut r, &arch);
        for (value, grads) in [oicsr_gl_value_grad(&model).unwrap(), separated_gl_value_grad(&model)] {
            let eta = 1e-3;
            let next = step(&model, &grads, eta);
            let after_oicsr = oicsr_gl_value_grad(&next).unwrap().0;
            let after_sep = separated_gl_value_grad(&next).0;
            prop_assert!(after_oicsr < oicsr_gl_value_grad(&model).unwrap().0);
            prop_assert!(after_sep <= separated_gl_value_grad(&model).0 + 1e-12);
            prop_assert!(value > 0.0);
        }
    }

    #[test]
    fn scores_cover_every_group_once_and_rank_by_norm(seed in any::<u64>()) {
        let mut r = rng(seed);
        let arch = random_architecture(&mut r, 4);
        let model = random_model(&mut r, &arch);
        for criterion in [Criterion::OutChannel, Criterion::OutInChannel] {
            let mut scores = score_all(&model, criterion).unwrap();
            prop_assert_eq!(scores.len(), model.group_count());
            let mut keys: Vec<_> = scores.iter().map(|g| (g.pair_id, g.channel)).collect();
            keys.sort();
            keys.dedup();
            prop_assert_eq!(keys.len(), model.group_count());
            for g in &scores {
                let want = match criterion {
                    Criterion::OutInChannel => concat_norm(&model, g.pair_id, g.channel).powi(2),
                    _ => model
                        .out_channel_slice(g.pair_id, g.channel)
                        .unwrap()
                        .iter()
                        .map(|x| x * x)
                        .sum(),
                };
                prop_assert!((g.energy - want).abs() <= 1e-12 * want.max(1.0));
            }
            sort_ascending(&mut scores);
            prop_assert!(scores.windows(2).all(|w| w[0].energy <= w[1].energy));
            let k = groups_holding_fraction(&scores, 0.95);
            prop_assert!(k >= 1 && k <= scores.len());
            prop_assert_eq!(groups_holding_fraction(&scores, 1.0), scores.iter().filter(|g| g.energy > 0.0).count());
        }
    }
}
