//! Cross-entropy and focal loss over predicted class probabilities.
//!
//! Both come in two forms: plain functions over probability vectors, and
//! graph builders over logits used during training. Reductions are means
//! over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Var};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("label {label} of example {index} is out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("probability vector {0} is not on the simplex")]
    NotOnSimplex(usize),
    #[error("{probs} probability vectors but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focusing parameter; `0` disables the modulating factor.
    pub gamma: f64,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::focal()
    }
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            gamma: 0.0,
            alpha_pos: 1.0,
            alpha_neg: 1.0,
        }
    }

    pub fn focal() -> Self {
        Self {
            kind: LossKind::Focal,
            gamma: 2.0,
            alpha_pos: 0.25,
            alpha_neg: 0.75,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::InvalidConfig(format!("gamma {} must be >= 0", self.gamma)));
        }
        for (name, a) in [("alpha_pos", self.alpha_pos), ("alpha_neg", self.alpha_neg)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(LossError::InvalidConfig(format!("{name} {a} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn alpha(&self, label: usize) -> f64 {
        match self.kind {
            LossKind::CrossEntropy => 1.0,
            LossKind::Focal if label == 1 => self.alpha_pos,
            LossKind::Focal => self.alpha_neg,
        }
    }
}

fn true_class_probs<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<Vec<f64>, LossError> {
    if probs.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    probs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, &y))| {
            let p = p.as_ref();
            if y >= p.len() {
                return Err(LossError::LabelOutOfRange {
                    index: i,
                    label: y,
                    classes: p.len(),
                });
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|v| !(*v >= -SIMPLEX_TOL)) {
                return Err(LossError::NotOnSimplex(i));
            }
            Ok(p[y].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
        })
        .collect()
}

/// Mean of `-ln p_true` over the batch.
pub fn cross_entropy<P: AsRef<[f64]>>(probs: &[P], labels: &[usize]) -> Result<f64, LossError> {
    let pt = true_class_probs(probs, labels)?;
    Ok(pt.iter().map(|p| -p.ln()).sum::<f64>() / pt.len() as f64)
}

/// Mean of `-alpha_y (1 - p_true)^gamma ln p_true` over the batch.
pub fn focal_loss<P: AsRef<[f64]>>(probs: &[P], labels: &[usize], config: &LossConfig) -> Result<f64, LossError> {
    config.validate()?;
    let pt = true_class_probs(probs, labels)?;
    let total: f64 = pt
        .iter()
        .zip(labels)
        .map(|(p, &y)| -config.alpha(y) * (1.0 - p).powf(config.gamma) * p.ln())
        .sum();
    Ok(total / pt.len() as f64)
}

/// Dispatches on `config.kind`.
pub fn loss<P: AsRef<[f64]>>(probs: &[P], labels: &[usize], config: &LossConfig) -> Result<f64, LossError> {
    match config.kind {
        LossKind::CrossEntropy => cross_entropy(probs, labels),
        LossKind::Focal => focal_loss(probs, labels, config),
    }
}

/// Records the configured loss of `logits` (`[batch, classes]`) on `g`.
/// Returns the scalar loss node and the softmax node.
pub fn loss_node(g: &mut Graph, logits: Var, labels: &[usize], config: &LossConfig) -> Result<(Var, Var), LossError> {
    config.validate()?;
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::LengthMismatch {
            probs: shape.first().copied().unwrap_or(0),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, y)| **y >= shape[1]) {
        return Err(LossError::LabelOutOfRange {
            index: i,
            label: y,
            classes: shape[1],
        });
    }
    let probs = g.softmax(logits)?;
    let picked = g.gather(probs, labels)?;
    let pt = g.clamp(picked, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut per_example = g.log(pt);
    if config.kind == LossKind::Focal {
        let one_minus = g.affine(pt, -1.0, 1.0);
        let modulating = g.powf(one_minus, config.gamma);
        per_example = g.mul(per_example, modulating)?;
        let alphas: Vec<f64> = labels.iter().map(|&y| config.alpha(y)).collect();
        let alphas = g.input(crate::autodiff::Tensor::new(vec![labels.len()], alphas)?);
        per_example = g.mul(per_example, alphas)?;
    }
    let mean = g.mean(per_example);
    Ok((g.scale(mean, -1.0), probs))
}
