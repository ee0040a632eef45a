use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pagescribe::ctc::ctc_loss;
use pagescribe::tensor::log_softmax_rows;
use pagescribe::tensor::nn::{multi_head_attention, AttentionParams};
use pagescribe::{Backend, Graph, Mode, Model, ModelConfig, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    for (cin, cout, h, w) in [(1, 16, 64, 256), (16, 32, 32, 128), (32, 64, 16, 64)] {
        let x = Tensor::uniform(&[cin, h, w], 1.0, &mut rng);
        let k = Tensor::uniform(&[cout, cin, 3, 3], 0.1, &mut rng);
        let b = Tensor::zeros(&[cout]);
        group.bench_function(BenchmarkId::from_parameter(format!("{cin}x{h}x{w}->{cout}")), |bench| {
            bench.iter(|| {
                let mut g = Graph::new(Mode::Train, 0);
                let (x, k, b) = (
                    g.leaf(x.clone(), true),
                    g.leaf(k.clone(), true),
                    g.leaf(b.clone(), true),
                );
                let y = g.conv2d(x, k, b, (1, 1), (1, 1)).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 64;
    let mut group = c.benchmark_group("attention_fwd_bwd");
    for t in [64, 256, 512] {
        let x = Tensor::uniform(&[t, d], 1.0, &mut rng);
        let ws: Vec<Tensor> = (0..4)
            .flat_map(|_| [Tensor::uniform(&[d, d], 0.1, &mut rng), Tensor::zeros(&[d])])
            .collect();
        group.bench_function(BenchmarkId::from_parameter(t), |bench| {
            bench.iter(|| {
                let mut g = Graph::new(Mode::Train, 0);
                let x = g.leaf(x.clone(), true);
                let v: Vec<_> = ws.iter().map(|w| g.leaf(w.clone(), true)).collect();
                let p = AttentionParams {
                    wq: v[0],
                    bq: v[1],
                    wk: v[2],
                    bk: v[3],
                    wv: v[4],
                    bv: v[5],
                    wo: v[6],
                    bo: v[7],
                };
                let y = multi_head_attention(&mut g, x, &p, 4).unwrap().output;
                let s = g.sum(y);
                g.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn ctc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 12;
    let mut group = c.benchmark_group("ctc_loss");
    for (t, u) in [(96, 30), (384, 120), (1536, 480)] {
        let raw = Tensor::uniform(&[t, k], 3.0, &mut rng);
        let lp = Tensor::new(vec![t, k], log_softmax_rows(raw.data(), k)).unwrap();
        let target: Vec<usize> = (0..u).map(|_| rng.gen_range(0..k - 1)).collect();
        group.bench_function(BenchmarkId::from_parameter(format!("T{t}_U{u}")), |bench| {
            bench.iter(|| ctc_loss(&lp, &target, k - 1).unwrap())
        });
    }
    group.finish();
}

fn model_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("toy_model_fwd_bwd");
    group.sample_size(10);
    for backend in [Backend::Transformer, Backend::Blstm] {
        let model = Model::new(ModelConfig::toy(backend, 12).with_oversample(4), 0).unwrap();
        let x = Tensor::uniform(&[1, 256, 176], 1.0, &mut rng);
        let target: Vec<usize> = (0..35).map(|i| i % 11).collect();
        group.bench_function(BenchmarkId::from_parameter(format!("{backend:?}")), |bench| {
            bench.iter(|| {
                let mut g = Graph::new(Mode::Train, 0);
                let f = model.forward(&mut g, &x).unwrap();
                let lp = g.log_softmax(f.logits).unwrap();
                let loss = pagescribe::ctc::ctc_loss_node(&mut g, lp, &target, 11).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, attention, ctc, model_step);
criterion_main!(benches);
