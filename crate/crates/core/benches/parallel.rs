use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use relia_core::dataset::{make_synthetic_task_with, SyntheticSpec};
use relia_core::dsp::{log_mel, DspConfig};
use relia_core::model::{build_model, ModelConfig, StageConfig};
use relia_core::parallel;
use relia_core::trainer::{predict_probs, FeatureSet};

fn dsp() -> DspConfig {
    DspConfig {
        sample_rate: 8000,
        window_len: 512,
        hop_len: 256,
        n_mels: 16,
        clip_seconds: 1.0,
        fmin: 50.0,
        fmax: 4000.0,
    }
}

fn featurization(c: &mut Criterion) {
    let spec = SyntheticSpec {
        sample_rate: 8000,
        seconds: 1.0,
        ..SyntheticSpec::default()
    };
    let examples = make_synthetic_task_with(&spec, 16, 48, -10.0, 1).unwrap();
    let dsp = dsp();
    let mut group = c.benchmark_group("featurize_64_clips");
    group.bench_function("sequential", |b| {
        b.iter(|| parallel::map_sequential(&examples, |_, e| log_mel(&e.clip, &dsp).unwrap()))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        b.iter(|| parallel::map_parallel(&examples, |_, e| log_mel(&e.clip, &dsp).unwrap()))
    });
    group.finish();
}

fn ensemble_inference(c: &mut Criterion) {
    let d = dsp();
    let cfg = ModelConfig {
        stem_channels: 8,
        stages: vec![StageConfig::new(1, 8, 1), StageConfig::new(1, 16, 2)],
        num_classes: 2,
        input_shape: (d.n_frames(), d.n_mels),
        stem_pool: false,
    };
    let model = build_model(&cfg).unwrap();
    let mut set = FeatureSet::new(d.n_frames(), d.n_mels);
    let spec = SyntheticSpec {
        sample_rate: 8000,
        seconds: 1.0,
        ..SyntheticSpec::default()
    };
    for ex in make_synthetic_task_with(&spec, 8, 24, -10.0, 2).unwrap() {
        set.push(ex.name(), &log_mel(&ex.clip, &d).unwrap(), ex.label).unwrap();
    }
    let mut group = c.benchmark_group("ensemble_predict_32_examples");
    for members in [1usize, 5] {
        let weights: Vec<_> = (0..members as u64).map(|s| model.init_random(s)).collect();
        group.bench_with_input(BenchmarkId::new("sequential", members), &weights, |b, w| {
            b.iter(|| parallel::map_sequential(w, |_, ws| predict_probs(&model, ws, &set).unwrap()))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", members), &weights, |b, w| {
            b.iter(|| parallel::map_parallel(w, |_, ws| predict_probs(&model, ws, &set).unwrap()))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = featurization, ensemble_inference
}
criterion_main!(benches);
