//! Seeded mini-batch training with Adam.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{BalanceMode, Label};
use crate::dsp::MelSpectrogram;
use crate::losses::{loss_node, LossConfig, LossError};
use crate::metrics::roc_auc;
use crate::model::{Mode, Model, ModelError, WeightSet};
use crate::seed::{mix_seed, rng, stream};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("feature shape {got:?} does not match {expected:?}")]
    FeatureShape { expected: (usize, usize), got: (usize, usize) },
    #[error("label {0} is not binary")]
    NonBinaryLabel(Label),
    #[error("parameter has {param} values but gradient has {grad} and state has {state}")]
    ShapeMismatch { param: usize, grad: usize, state: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("history csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub balance: BalanceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            balance: BalanceMode::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<(), TrainError> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(TrainError::ShapeMismatch {
            param: param.len(),
            grad: grad.len(),
            state: state.m.len().min(state.v.len()),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Spectrograms of one shape stacked row-major, with labels and names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub frames: usize,
    pub mels: usize,
    pub data: Vec<f64>,
    pub labels: Vec<Label>,
    pub names: Vec<String>,
}

impl FeatureSet {
    pub fn new(frames: usize, mels: usize) -> Self {
        Self {
            frames,
            mels,
            ..Self::default()
        }
    }

    pub fn push(&mut self, name: impl Into<String>, spec: &MelSpectrogram, label: Label) -> Result<(), TrainError> {
        if spec.shape() != (self.frames, self.mels) {
            return Err(TrainError::FeatureShape {
                expected: (self.frames, self.mels),
                got: spec.shape(),
            });
        }
        if label > 1 {
            return Err(TrainError::NonBinaryLabel(label));
        }
        self.data.extend_from_slice(spec.values());
        self.labels.push(label);
        self.names.push(name.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.frames * self.mels;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> FeatureSet {
        let mut out = FeatureSet::new(self.frames, self.mels);
        for &i in indices {
            out.data.extend_from_slice(self.example(i));
            out.labels.push(self.labels[i]);
            out.names.push(self.names[i].clone());
        }
        out
    }

    /// `[indices.len(), 1, frames, mels]` input tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.frames * self.mels);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        Tensor::new(vec![indices.len(), 1, self.frames, self.mels], data).expect("batch shape")
    }
}

pub const PREDICT_BATCH: usize = 64;

/// Inference-mode positive-class probability for every example.
pub fn predict_positive(model: &Model, ws: &WeightSet, set: &FeatureSet) -> Result<Vec<f64>, TrainError> {
    Ok(predict_probs(model, ws, set)?.into_iter().map(|p| p[1]).collect())
}

/// Inference-mode class probabilities for every example.
pub fn predict_probs(model: &Model, ws: &WeightSet, set: &FeatureSet) -> Result<Vec<Vec<f64>>, TrainError> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(PREDICT_BATCH) {
        out.extend(model.predict_probs(ws, set.batch(chunk))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `NaN` when the epoch saw a single class.
    pub train_auc: f64,
    /// `NaN` when the validation set has a single class.
    pub val_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// First epoch (1-based) whose validation AUC reaches `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|r| r.val_auc >= target).map(|r| r.epoch)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "train_auc", "val_auc"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.train_loss),
                format!("{:?}", r.train_auc),
                format!("{:?}", r.val_auc),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn auc_or_nan(scores: &[f64], labels: &[Label]) -> f64 {
    roc_auc(scores, labels).unwrap_or(f64::NAN)
}

/// Trains from `init` and returns the final-epoch weights with per-epoch history.
///
/// Epoch `e` shuffles the training set with a generator seeded from
/// `config.seed` and `e`. The training AUC is computed from the
/// training-mode outputs seen during the epoch.
pub fn train(
    model: &Model,
    init: WeightSet,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    config: &TrainConfig,
) -> Result<(WeightSet, TrainHistory), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let expected = model.config().input_shape;
    for set in [train_set, val_set] {
        if (set.frames, set.mels) != expected {
            return Err(TrainError::FeatureShape {
                expected,
                got: (set.frames, set.mels),
            });
        }
    }
    model.check_weights(&init)?;

    let mut ws = init;
    let names: Vec<String> = model.trainable().map(|s| s.name.clone()).collect();
    let mut states: Vec<AdamState> = names.iter().map(|n| AdamState::new(ws.tensors[n].len())).collect();
    let hyper = config.adam();
    let epoch_base = mix_seed(config.seed, stream::EPOCH);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng(mix_seed(epoch_base, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut scores = Vec::with_capacity(order.len());
        let mut seen = Vec::with_capacity(order.len());
        for chunk in order.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i] as usize).collect();
            let mut fwd = model.forward(&ws, train_set.batch(chunk), Mode::Train)?;
            let (loss, probs) = loss_node(&mut fwd.graph, fwd.logits, &labels, &config.loss)?;
            let value = fwd.graph.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            loss_sum += value * chunk.len() as f64;
            scores.extend(fwd.graph.value(probs).data().chunks(2).map(|p| p[1]));
            seen.extend(chunk.iter().map(|&i| train_set.labels[i]));
            let grads = fwd.graph.backward(loss).map_err(ModelError::from)?;
            for (name, state) in names.iter().zip(&mut states) {
                let g = grads.get(fwd.params[name]);
                let p = ws.tensors.get_mut(name).expect("trainable tensor");
                adam_step(p.data_mut(), g.data(), state, &hyper)?;
            }
            ws.apply_bn_stats(&fwd.bn_stats)?;
        }
        let val_scores = predict_positive(model, &ws, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_auc: auc_or_nan(&scores, &seen),
            val_auc: auc_or_nan(&val_scores, &val_set.labels),
        });
    }
    Ok((ws, history))
}

#[cfg(test)]
mod tests;
