use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fer_bench::{random_label_pairs, random_logits, random_probs};
use fer_core::inference::{ensemble_combine, EnsembleConfig};
use fer_core::metrics::{report, ConfusionMatrix};
use fer_core::models::{Architecture, BackboneConfig, HeadKind, ModelBundle, TemporalHeadConfig};
use fer_core::nn::pe::positional_encoding;
use ndarray::Array4;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_softmax(c: &mut Criterion) {
    let logits = random_logits(1024, 7);
    c.bench_function("softmax_1024", |b| {
        b.iter(|| {
            for l in &logits {
                black_box(fer_core::math::softmax(black_box(l)).unwrap());
            }
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let (y_true, y_pred) = random_label_pairs(10_000, 11);
    c.bench_function("metric_report_10k", |b| {
        b.iter(|| {
            let cm = ConfusionMatrix::from_pairs(black_box(&y_true), black_box(&y_pred)).unwrap();
            black_box(report(cm).unwrap());
        })
    });
}

fn bench_positional_encoding(c: &mut Criterion) {
    c.bench_function("positional_encoding_50x512", |b| {
        b.iter(|| black_box(positional_encoding(black_box(50), black_box(512)).unwrap()))
    });
}

fn bench_ensemble(c: &mut Criterion) {
    let probs = random_probs(3 * 256, 13);
    let cfg = EnsembleConfig::new([0.5, 0.3, 0.2]).unwrap();
    c.bench_function("ensemble_combine_256", |b| {
        b.iter(|| {
            for chunk in probs.chunks_exact(3) {
                let trio = [chunk[0].clone(), chunk[1].clone(), chunk[2].clone()];
                black_box(ensemble_combine(black_box(&trio), &cfg).unwrap());
            }
        })
    });
}

fn bench_transformer_forward(c: &mut Criterion) {
    // One 9-frame window through the tiny backbone + transformer head.
    let head = TemporalHeadConfig {
        kind: HeadKind::Transformer,
        ..TemporalHeadConfig::default()
    };
    let bundle = ModelBundle::new(
        BackboneConfig {
            architecture: Architecture::Tiny,
            pretrained_weights_path: None,
        },
        head,
        17,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let frames = Array4::from_shape_fn((9, 3, 112, 112), |_| rng.gen_range(-1.0..1.0));
    c.bench_function("transformer_window_forward", |b| {
        b.iter(|| black_box(bundle.forward(black_box(&frames), 1, 9).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_softmax,
        bench_metrics,
        bench_positional_encoding,
        bench_ensemble,
        bench_transformer_forward
}
criterion_main!(benches);
