use super::*;
use crate::model::{build_model, ModelConfig, StageConfig};
use proptest::prelude::*;
use rand::Rng;

fn tiny_model(frames: usize, mels: usize) -> Model {
    build_model(&ModelConfig {
        stem_channels: 4,
        stages: vec![StageConfig::new(1, 4, 1), StageConfig::new(1, 8, 2)],
        num_classes: 2,
        input_shape: (frames, mels),
        stem_pool: false,
    })
    .unwrap()
}

/// Positives carry a bright band in the upper half of the mel axis.
fn separable(n_pos: usize, n_neg: usize, seed: u64) -> FeatureSet {
    let (frames, mels) = (6, 6);
    let mut r = rng(seed);
    let mut set = FeatureSet::new(frames, mels);
    for i in 0..n_pos + n_neg {
        let label = u8::from(i < n_pos);
        let values = (0..frames * mels)
            .map(|k| {
                let band = if label == 1 && k % mels >= 3 { 1.5 } else { 0.0 };
                band + 0.3 * r.gen_range(-1.0..1.0)
            })
            .collect();
        let spec = MelSpectrogram::from_values(values, frames, mels).unwrap();
        set.push(format!("ex{i}"), &spec, label).unwrap();
    }
    set
}

fn quick(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

/// Scalar reference Adam, written out step by step.
fn adam_oracle(p0: f64, grads: &[f64], h: &AdamHyper) -> f64 {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (k, g) in grads.iter().enumerate() {
        let t = (k + 1) as f64;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        let mh = m / (1.0 - h.beta1.powf(t));
        let vh = v / (1.0 - h.beta2.powf(t));
        p -= h.learning_rate * mh / (vh.sqrt() + h.eps);
    }
    p
}

#[test]
fn zero_gradient_leaves_params() {
    let h = TrainConfig::default().adam();
    let mut p = vec![1.0, -2.0, 3.5];
    let mut s = AdamState::new(3);
    adam_step(&mut p, &[0.0; 3], &mut s, &h).unwrap();
    assert_eq!(p, vec![1.0, -2.0, 3.5]);
    assert_eq!(s.t, 1);
}

#[test]
fn first_step_moves_by_learning_rate() {
    let h = TrainConfig::default().adam();
    for g in [1e-3, -0.5, 7.0, -1e4] {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[g], &mut s, &h).unwrap();
        assert!((p[0].abs() - 1e-3).abs() < 1e-6 * 1e-3 / 1e-3, "{g}: {}", p[0]);
        assert_eq!(p[0].signum(), -g.signum());
    }
}

#[test]
fn adam_is_deterministic_and_checks_shapes() {
    let h = TrainConfig::default().adam();
    let run = || {
        let mut p = vec![0.3, 0.1];
        let mut s = AdamState::new(2);
        for _ in 0..3 {
            adam_step(&mut p, &[0.2, -0.7], &mut s, &h).unwrap();
        }
        (p, s)
    };
    assert_eq!(run(), run());
    let mut s = AdamState::new(2);
    assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut s, &h).is_err());
    assert!(adam_step(&mut [0.0; 2], &[0.0; 3], &mut s, &h).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    TrainConfig::default().validate().unwrap();
}

#[test]
fn feature_set_rejects_mismatches() {
    let mut set = FeatureSet::new(2, 3);
    let wrong = MelSpectrogram::from_values(vec![0.0; 6], 3, 2).unwrap();
    assert!(set.push("a", &wrong, 0).is_err());
    let ok = MelSpectrogram::from_values(vec![1.0; 6], 2, 3).unwrap();
    assert!(set.push("a", &ok, 2).is_err());
    set.push("a", &ok, 1).unwrap();
    assert_eq!(set.batch(&[0, 0]).shape(), &[2, 1, 2, 3]);
    assert_eq!(set.subset(&[0]).names, vec!["a".to_string()]);
}

#[test]
fn training_is_deterministic() {
    let model = tiny_model(6, 6);
    let (tr, va) = (separable(8, 16, 1), separable(4, 8, 2));
    let a = train(&model, model.init_random(3), &tr, &va, &quick(5, 3)).unwrap();
    let b = train(&model, model.init_random(3), &tr, &va, &quick(5, 3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.len(), 3);
    let c = train(&model, model.init_random(3), &tr, &va, &quick(6, 3)).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn validation_data_never_touches_weights() {
    let model = tiny_model(6, 6);
    let tr = separable(8, 16, 1);
    let va = separable(4, 8, 2);
    let mut other = va.clone();
    for v in &mut other.data {
        *v = -*v * 3.0;
    }
    let a = train(&model, model.init_random(3), &tr, &va, &quick(5, 2)).unwrap();
    let b = train(&model, model.init_random(3), &tr, &other, &quick(5, 2)).unwrap();
    assert_eq!(a.0, b.0);
    assert_ne!(a.1, b.1);
}

#[test]
fn separable_task_is_learned() {
    let model = tiny_model(6, 6);
    let tr = separable(16, 32, 1);
    let va = separable(8, 16, 2);
    let cfg = TrainConfig { seed: 9, ..TrainConfig::default() };
    let (_, hist) = train(&model, model.init_random(1), &tr, &va, &cfg).unwrap();
    let last = hist.epochs.last().unwrap();
    assert!(last.train_auc >= 0.99, "{hist:?}");
    let smooth: Vec<f64> = hist.epochs.windows(3).map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / 3.0).collect();
    let slack = 0.02 * smooth[0];
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0] + slack, "{smooth:?}");
    }
}

#[test]
fn empty_sets_and_bad_shapes_are_rejected() {
    let model = tiny_model(6, 6);
    let tr = separable(4, 4, 1);
    let empty = FeatureSet::new(6, 6);
    assert!(matches!(train(&model, model.init_random(0), &empty, &tr, &quick(0, 1)), Err(TrainError::EmptySet(_))));
    assert!(matches!(train(&model, model.init_random(0), &tr, &empty, &quick(0, 1)), Err(TrainError::EmptySet(_))));
    let small = tiny_model(4, 4);
    assert!(matches!(
        train(&small, small.init_random(0), &tr, &tr, &quick(0, 1)),
        Err(TrainError::FeatureShape { .. })
    ));
}

#[test]
fn history_csv_layout() {
    let hist = TrainHistory {
        epochs: vec![
            EpochRecord { epoch: 1, train_loss: 0.5, train_auc: 0.75, val_auc: f64::NAN },
            EpochRecord { epoch: 2, train_loss: 0.25, train_auc: 1.0, val_auc: 0.5 },
        ],
    };
    let mut out = Vec::new();
    hist.write_csv(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "epoch,train_loss,train_auc,val_auc\n1,0.5,0.75,NaN\n2,0.25,1.0,0.5\n");
    assert_eq!(hist.epochs_to_reach(0.5), Some(2));
    assert_eq!(hist.epochs_to_reach(0.9), None);
}

proptest! {
    #[test]
    fn adam_matches_scalar_oracle(p0 in -5.0f64..5.0, grads in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let h = TrainConfig::default().adam();
        let mut p = vec![p0];
        let mut s = AdamState::new(1);
        for g in &grads {
            adam_step(&mut p, &[*g], &mut s, &h).unwrap();
        }
        let expected = adam_oracle(p0, &grads, &h);
        prop_assert!((p[0] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn first_step_never_exceeds_learning_rate(g in -1e6f64..1e6) {
        let h = TrainConfig::default().adam();
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[g], &mut s, &h).unwrap();
        prop_assert!(p[0].abs() <= h.learning_rate * (1.0 + 1e-12));
    }
}
