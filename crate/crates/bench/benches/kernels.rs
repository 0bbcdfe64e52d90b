use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use symclone_bench::{normal, BATCH, CHANNELS, GRID};
use symclone_core::agnostic::{BlockMlpLayer, Combiner};
use symclone_core::layers::{conv2d, group_conv, lifting_conv, Classifier, ClassifierSpec, ConvClassifier, Family};
use symclone_core::{PaddingMode, Parameter, SeededRng, Tape};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 196, 256] {
        let a = normal(&[BATCH, n], 1);
        let b = normal(&[n, n], 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
                black_box(y.value());
            })
        });
    }
    g.finish();
}

fn convolutions(c: &mut Criterion) {
    let x = normal(&[BATCH, CHANNELS, GRID, GRID], 3);
    let w = Parameter::new("w", normal(&[CHANNELS, CHANNELS, 9], 4));
    let lifted = normal(&[BATCH, CHANNELS, 4, GRID / 2, GRID / 2], 5);
    let psi = Parameter::new("psi", normal(&[CHANNELS, CHANNELS, 4, 9], 6));
    let mut g = c.benchmark_group("conv_forward_backward");
    g.sample_size(20);
    g.bench_function("conv2d", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let wv = tape.param(&w);
            let y = conv2d(tape.constant(x.clone()), wv, None, PaddingMode::ZeroFill).unwrap();
            black_box(tape.backward(y.sum()).unwrap());
        })
    });
    g.bench_function("lifting", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let wv = tape.param(&w);
            let y = lifting_conv(tape.constant(x.clone()), wv, None, PaddingMode::ZeroFill).unwrap();
            black_box(tape.backward(y.sum()).unwrap());
        })
    });
    g.bench_function("group_conv", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let wv = tape.param(&psi);
            let y = group_conv(tape.constant(lifted.clone()), wv, None, PaddingMode::ZeroFill).unwrap();
            black_box(tape.backward(y.sum()).unwrap());
        })
    });
    g.finish();
}

fn block_apply(c: &mut Criterion) {
    let mut g = c.benchmark_group("block_mlp_apply");
    g.sample_size(20);
    for combiner in [Combiner::Direct, Combiner::EmbedProject] {
        let layer = BlockMlpLayer::<f32>::new("bench", GRID, 9, combiner, &mut SeededRng::new(7)).unwrap();
        let x = normal(&[BATCH, CHANNELS, GRID * GRID], 8);
        let tau = Parameter::new("tau", normal(&[CHANNELS, CHANNELS, 9], 9));
        g.bench_function(format!("{combiner:?}"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let y = layer.apply(&tape, tape.constant(x.clone()), tape.param(&tau)).unwrap();
                black_box(tape.backward(y.sum()).unwrap());
            })
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let x = normal(&[BATCH, 1, GRID, GRID], 10);
    let labels: Vec<usize> = (0..BATCH).map(|i| i % 10).collect();
    let mut g = c.benchmark_group("classifier_step");
    g.sample_size(10);
    for family in [Family::Cnn, Family::Gcnn] {
        let spec = ClassifierSpec {
            family,
            grid: GRID,
            channels: vec![CHANNELS; 3],
            pool_between: true,
            padding: PaddingMode::ZeroFill,
            classes: 10,
        };
        let model = ConvClassifier::<f32>::new(spec, &mut SeededRng::new(11)).unwrap();
        g.bench_function(format!("{family:?}"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let loss = model.logits(&tape, tape.constant(x.clone())).unwrap().cross_entropy(&labels).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    g.finish();
}

criterion_group!(benches, gemm, convolutions, block_apply, training_step);
criterion_main!(benches);
