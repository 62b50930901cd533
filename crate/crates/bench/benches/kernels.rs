//! Criterion benchmarks for the hot paths: dense matmul and one full
//! forward/backward step of the dual model.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deatt_core::config::{ExperimentConfig, VariantKind};
use deatt_core::feature::Example;
use deatt_core::matrix::Matrix;
use deatt_core::model::{build_forward, build_variant, ThresholdPlan};
use deatt_core::tape::Tape;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(m, k, n) in &[(256usize, 16usize, 16usize), (3072, 16, 16), (256, 192, 64)] {
        let a = random_matrix(m, k, &mut rng);
        let b = random_matrix(k, n, &mut rng);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            &(a, b),
            |bench, (a, b)| bench.iter(|| a.matmul(b).unwrap()),
        );
    }
    group.finish();
}

fn bench_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "seed": 1,
            "data": {
                "train_path": "unused",
                "test_path": "unused",
                "n_fields": 12,
                "embedding_buckets": [1024]
            },
            "model": { "variant": "dual", "d": 16 },
            "codebook": { "size": 32768, "k_siamese": 2 }
        }"#,
    )
    .unwrap()
}

fn bench_forward_backward(c: &mut Criterion) {
    let cfg = bench_config();
    let model = build_variant(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<Example> = (0..256)
        .map(|i| Example {
            feature_ids: (0..12).map(|_| rng.gen_range(0..100000)).collect(),
            label: (i % 2) as u8,
            session_id: i / 8,
        })
        .collect();
    let labels: Vec<f64> = batch.iter().map(|ex| ex.label as f64).collect();

    c.bench_function("dual_forward_backward_b256", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let mut thresholds = model.thresholds.clone();
            let result = build_forward(
                &mut tape,
                &model.spec,
                &model.params,
                &mut thresholds,
                &batch,
                Some(&labels),
                ThresholdPlan::Train,
            )
            .unwrap();
            tape.backward(result.loss.unwrap()).unwrap()
        })
    });

    let transformer = {
        let mut c2 = cfg.clone();
        c2.model.variant = VariantKind::Transformer;
        build_variant(&c2).unwrap()
    };
    c.bench_function("transformer_forward_backward_b256", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let mut thresholds = transformer.thresholds.clone();
            let result = build_forward(
                &mut tape,
                &transformer.spec,
                &transformer.params,
                &mut thresholds,
                &batch,
                Some(&labels),
                ThresholdPlan::Train,
            )
            .unwrap();
            tape.backward(result.loss.unwrap()).unwrap()
        })
    });
}

criterion_group!(benches, bench_matmul, bench_forward_backward);
criterion_main!(benches);
