use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use oicsr::data::gen_synthetic;
use oicsr::graph::Graph;
use oicsr::importance::score_all;
use oicsr::pruner::{apply_surgery, count_flops, select_prune_set};
use oicsr::regularizers::oicsr_gl_value_grad;
use oicsr::{Architecture, LayerSpec, Model, SyntheticTask};

fn striped_net(channels: usize) -> Architecture {
    let conv = LayerSpec::Conv2d {
        channels,
        kernel: 3,
        stride: 1,
        padding: 1,
        bias: true,
    };
    Architecture {
        input: vec![1, 8, 8],
        layers: vec![
            conv.clone(),
            LayerSpec::Relu,
            conv.clone(),
            LayerSpec::Relu,
            LayerSpec::Maxpool { kernel: 2 },
            conv,
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                channels: 4,
                bias: true,
            },
        ],
    }
}

fn training_step(c: &mut Criterion) {
    let model = Model::from_architecture(&striped_net(16), 0).unwrap();
    let task = SyntheticTask::StripedImages {
        channels: 1,
        side: 8,
        noise: 0.5,
    };
    let data = gen_synthetic(task, 32, 0).unwrap();
    let (x, y) = data.batch(&(0..32).collect::<Vec<_>>());
    c.bench_function("forward_backward_batch32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let params = model.bind(&mut g, true);
            let input = g.constant(x.clone());
            let logits = model.forward(&mut g, &params, input).unwrap();
            let loss = g.softmax_cross_entropy(logits, &y).unwrap();
            g.backward(loss).unwrap();
            black_box(g.value(loss).data()[0])
        })
    });
}

fn regularizer(c: &mut Criterion) {
    let model = Model::from_architecture(&striped_net(32), 0).unwrap();
    c.bench_function("oicsr_gl_value_grad", |b| {
        b.iter(|| black_box(oicsr_gl_value_grad(&model).unwrap()))
    });
}

fn pruning(c: &mut Criterion) {
    let model = Model::from_architecture(&striped_net(32), 0).unwrap();
    let scores = score_all(&model, oicsr::Criterion::OutInChannel).unwrap();
    let original = count_flops(&model).total_flops;
    c.bench_function("select_prune_set_50pct", |b| {
        b.iter(|| black_box(select_prune_set(&model, &scores, 0.5, original).unwrap()))
    });
    let plan = select_prune_set(&model, &scores, 0.5, original).unwrap();
    c.bench_function("apply_surgery_50pct", |b| {
        b.iter(|| black_box(apply_surgery(&model, &plan).unwrap()))
    });
}

criterion_group!(benches, training_step, regularizer, pruning);
criterion_main!(benches);
