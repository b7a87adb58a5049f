//! Parallel-vs-sequential throughput of the data-parallel inner loops.
//!
//! With the default `parallel` feature one side runs on the rayon pool and
//! the other on the calling thread; built with `--no-default-features` both
//! sides coincide.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mkwm_core::batch::{detect_batch, detect_batch_seq, generate_batch, generate_batch_seq};
use mkwm_core::lm::{GenParams, LmSpec, TokenSequence, Vocabulary};
use mkwm_core::multikey::{calibrate_analytic, Ensemble, KeySet};
use mkwm_core::scheme::{SchemeConfig, Variant};
use mkwm_core::theory::{simulate_detector_model, DetectorModel, TrialCondition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    spec: LmSpec,
    ensemble: Ensemble,
    params: GenParams,
    texts: Vec<TokenSequence>,
}

fn fixture() -> Fixture {
    let spec = LmSpec::hash_synthetic(Vocabulary::new(512).unwrap(), 1.0, 2, 7).unwrap();
    let keys = KeySet::generate(4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let ensemble = Ensemble::uniform(SchemeConfig::default_for(Variant::Soft), &keys);
    let params = GenParams {
        length: 128,
        prompt_len: 8,
        temperature: 1.0,
    };
    let texts = generate_batch_seq(&spec, &ensemble, 64, &params, 3)
        .unwrap()
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    Fixture {
        spec,
        ensemble,
        params,
        texts,
    }
}

fn bench_generate(c: &mut Criterion) {
    let f = fixture();
    let mut group = c.benchmark_group("generate_batch");
    group.sample_size(10);
    for n in [16usize, 64] {
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| generate_batch(&f.spec, &f.ensemble, n, &f.params, 9).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| generate_batch_seq(&f.spec, &f.ensemble, n, &f.params, 9).unwrap())
        });
    }
    group.finish();
}

fn bench_detect(c: &mut Criterion) {
    let f = fixture();
    let calib = calibrate_analytic(0.01, 4).unwrap();
    let mut group = c.benchmark_group("detect_batch");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| detect_batch(&f.ensemble, &calib, &f.texts).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| detect_batch_seq(&f.ensemble, &calib, &f.texts).unwrap())
    });
    group.finish();
}

fn bench_detector_sim(c: &mut Criterion) {
    let model = DetectorModel::new(4, 0.25, 1.0).unwrap();
    let mut group = c.benchmark_group("detector_model_sim");
    group.sample_size(20);
    group.bench_function("100k_trials", |b| {
        b.iter(|| simulate_detector_model(&model, TrialCondition::Null, 100_000, 7).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_generate, bench_detect, bench_detector_sim);
criterion_main!(benches);
