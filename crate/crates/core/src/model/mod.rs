//! Residual convolutional classifier over `[batch, 1, frames, mels]` inputs.
//!
//! The network is a stem convolution, a sequence of stages of basic
//! residual blocks (conv-bn-relu-conv-bn plus identity or projection
//! shortcut, relu after the sum), global average pooling and a linear head.

mod weights;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{softmax_in_place, AutodiffError, BatchNormMode, ChannelStats, Graph, RunningStats, Tensor, Var, Window, BN_MOMENTUM};
use crate::seed::{mix_seed, rng, stream};

pub use weights::{load_weights, save_weights, weights_from_bytes, weights_to_bytes, WEIGHT_FORMAT_VERSION, WEIGHT_MAGIC};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {frames}x{mels} is too small for the stride schedule")]
    InputTooSmall { frames: usize, mels: usize },
    #[error("expected input [batch, 1, {frames}, {mels}], got {got:?}")]
    InputShape { frames: usize, mels: usize, got: Vec<usize> },
    #[error("config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("weight set is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("weight set has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("weight file: {0}")]
    Format(String),
    #[error("weight file io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

impl StageConfig {
    pub const fn new(blocks: usize, channels: usize, stride: usize) -> Self {
        Self { blocks, channels, stride }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub num_classes: usize,
    /// `(frames, mels)` of one input spectrogram.
    pub input_shape: (usize, usize),
    /// 3x3 stride-2 max pool after the stem.
    #[serde(default)]
    pub stem_pool: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stages: vec![StageConfig::new(2, 16, 1), StageConfig::new(2, 32, 2), StageConfig::new(2, 64, 2)],
            num_classes: 2,
            input_shape: (94, 64),
            stem_pool: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.num_classes != 2 {
            return bad("num_classes must be 2");
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required");
        }
        if self.stem_channels == 0 {
            return bad("stem_channels must be positive");
        }
        for s in &self.stages {
            if s.blocks == 0 || s.channels == 0 {
                return bad("stage blocks and channels must be positive");
            }
            if s.stride != 1 && s.stride != 2 {
                return bad("stage stride must be 1 or 2");
            }
        }
        Ok(())
    }

    /// First 8 bytes of SHA-256 over the canonical JSON encoding.
    pub fn fingerprint(&self) -> [u8; 8] {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }
}

/// Roles determine initialization and whether a tensor is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight { fan_in: usize },
    LinearWeight { fan_in: usize },
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, Self::BnRunningMean | Self::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Clone, Debug)]
struct ConvBn {
    prefix: String,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    projection: Option<ConvBn>,
}

/// A built network: the config plus its parameter layout.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Vec<ParamSpec>,
    stem: ConvBn,
    blocks: Vec<Block>,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

fn conv_bn(layout: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
    layout.push(ParamSpec {
        name: format!("{prefix}.conv.weight"),
        shape: vec![cout, cin, k, k],
        role: ParamRole::ConvWeight { fan_in: cin * k * k },
    });
    for (suffix, role) in [
        ("weight", ParamRole::BnScale),
        ("bias", ParamRole::BnShift),
        ("running_mean", ParamRole::BnRunningMean),
        ("running_var", ParamRole::BnRunningVar),
    ] {
        layout.push(ParamSpec {
            name: format!("{prefix}.bn.{suffix}"),
            shape: vec![cout],
            role,
        });
    }
    ConvBn {
        prefix: prefix.to_string(),
        stride,
        pad: k / 2,
    }
}

fn halve(len: usize) -> usize {
    len.div_ceil(2)
}

pub fn build_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let (frames, mels) = config.input_shape;
    let too_small = || ModelError::InputTooSmall { frames, mels };
    if frames == 0 || mels == 0 {
        return Err(too_small());
    }
    let (mut h, mut w) = (frames, mels);
    let reduce = |h: &mut usize, w: &mut usize| {
        if *h < 2 || *w < 2 {
            return Err(too_small());
        }
        *h = halve(*h);
        *w = halve(*w);
        Ok(())
    };
    let mut layout = Vec::new();
    let stem = conv_bn(&mut layout, "stem", 1, config.stem_channels, 3, 1);
    if config.stem_pool {
        reduce(&mut h, &mut w)?;
    }
    let mut blocks = Vec::new();
    let mut cin = config.stem_channels;
    for (si, stage) in config.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            if stride == 2 {
                reduce(&mut h, &mut w)?;
            }
            let p = format!("stages.{si}.{bi}");
            let conv1 = conv_bn(&mut layout, &format!("{p}.conv1"), cin, stage.channels, 3, stride);
            let conv2 = conv_bn(&mut layout, &format!("{p}.conv2"), stage.channels, stage.channels, 3, 1);
            let projection = (stride != 1 || cin != stage.channels)
                .then(|| conv_bn(&mut layout, &format!("{p}.proj"), cin, stage.channels, 1, stride));
            blocks.push(Block { conv1, conv2, projection });
            cin = stage.channels;
        }
    }
    layout.push(ParamSpec {
        name: HEAD_WEIGHT.into(),
        shape: vec![cin, config.num_classes],
        role: ParamRole::LinearWeight { fan_in: cin },
    });
    layout.push(ParamSpec {
        name: HEAD_BIAS.into(),
        shape: vec![config.num_classes],
        role: ParamRole::Bias,
    });
    Ok(Model {
        config: config.clone(),
        layout,
        stem,
        blocks,
    })
}

/// Named tensors for one model, tagged with the config fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub tensors: BTreeMap<String, Tensor>,
    pub fingerprint: [u8; 8],
}

impl WeightSet {
    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    fn stats_of(&self, prefix: &str) -> Result<RunningStats, ModelError> {
        Ok(RunningStats {
            mean: self.get(&format!("{prefix}.bn.running_mean"))?.data().to_vec(),
            var: self.get(&format!("{prefix}.bn.running_var"))?.data().to_vec(),
        })
    }

    /// Folds batch statistics from a training forward pass into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[(String, ChannelStats)]) -> Result<(), ModelError> {
        for (prefix, batch) in stats {
            let mut running = self.stats_of(prefix)?;
            running.update(batch, BN_MOMENTUM);
            for (suffix, values) in [("running_mean", running.mean), ("running_var", running.var)] {
                let name = format!("{prefix}.bn.{suffix}");
                let t = self.tensors.get_mut(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
                t.data_mut().copy_from_slice(&values);
            }
        }
        Ok(())
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Result of a forward pass recorded on a fresh graph.
pub struct Forward {
    pub graph: Graph,
    pub logits: Var,
    /// Graph variables of trainable parameters, by name. Empty in inference mode.
    pub params: BTreeMap<String, Var>,
    /// Batch statistics per batchnorm prefix (training mode only).
    pub bn_stats: Vec<(String, ChannelStats)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn fingerprint(&self) -> [u8; 8] {
        self.config.fingerprint()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.layout
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Checks names, shapes and fingerprint of `ws` against this model.
    pub fn check_weights(&self, ws: &WeightSet) -> Result<(), ModelError> {
        if ws.fingerprint != self.fingerprint() {
            return Err(ModelError::FingerprintMismatch {
                expected: hex(&self.fingerprint()),
                found: hex(&ws.fingerprint),
            });
        }
        for spec in &self.layout {
            let t = ws.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = ws.tensors.keys().find(|k| !self.layout.iter().any(|s| &s.name == *k)) {
            return Err(ModelError::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    /// He-normal conv/linear weights, zero biases, unit scale and zero shift
    /// for batchnorm, running stats at (0, 1).
    pub fn init_random(&self, seed: u64) -> WeightSet {
        let base = mix_seed(seed, stream::INIT);
        let tensors = self
            .layout
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.role {
                    ParamRole::ConvWeight { fan_in } | ParamRole::LinearWeight { fan_in } => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        let mut r = rng(mix_seed(base, i as u64));
                        (0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect()
                    }
                    ParamRole::Bias | ParamRole::BnShift | ParamRole::BnRunningMean => vec![0.0; n],
                    ParamRole::BnScale | ParamRole::BnRunningVar => vec![1.0; n],
                };
                (spec.name.clone(), Tensor::new(spec.shape.clone(), data).expect("layout shape"))
            })
            .collect();
        WeightSet {
            tensors,
            fingerprint: self.fingerprint(),
        }
    }

    /// Replaces the classifier head with the values `init_random(seed)` would give.
    pub fn reset_head(&self, ws: &mut WeightSet, seed: u64) {
        let fresh = self.init_random(seed);
        for name in [HEAD_WEIGHT, HEAD_BIAS] {
            ws.tensors.insert(name.to_string(), fresh.tensors[name].clone());
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<(), ModelError> {
        let (frames, mels) = self.config.input_shape;
        let s = input.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != 1 || s[2] != frames || s[3] != mels {
            return Err(ModelError::InputShape {
                frames,
                mels,
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Records a forward pass of `input` (`[batch, 1, frames, mels]`).
    pub fn forward(&self, ws: &WeightSet, input: Tensor, mode: Mode) -> Result<Forward, ModelError> {
        self.check_input(&input)?;
        let mut graph = Graph::new();
        let mut vars = BTreeMap::new();
        for spec in self.trainable() {
            let t = ws.get(&spec.name)?.clone();
            let v = match mode {
                Mode::Train => graph.param(t),
                Mode::Inference => graph.input(t),
            };
            vars.insert(spec.name.clone(), v);
        }
        let x = graph.input(input);
        let (logits, bn_stats) = self.record(&mut graph, &vars, ws, x, mode)?;
        let params = if mode == Mode::Train { vars } else { BTreeMap::new() };
        Ok(Forward {
            graph,
            logits,
            params,
            bn_stats,
        })
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamSpec> {
        self.layout.iter().filter(|s| s.role.trainable())
    }

    /// Records the network on `g` given variables for every trainable tensor.
    /// Running statistics are read from `ws` in inference mode.
    pub fn record(
        &self,
        g: &mut Graph,
        vars: &BTreeMap<String, Var>,
        ws: &WeightSet,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<(String, ChannelStats)>), ModelError> {
        let var = |name: String| vars.get(&name).copied().ok_or(ModelError::MissingTensor(name));
        let mut bn_stats = Vec::new();
        let mut apply = |g: &mut Graph, x: Var, cb: &ConvBn| -> Result<Var, ModelError> {
            let w = var(format!("{}.conv.weight", cb.prefix))?;
            let y = g.conv2d(x, w, Window::new(cb.stride, cb.pad))?;
            let gamma = var(format!("{}.bn.weight", cb.prefix))?;
            let beta = var(format!("{}.bn.bias", cb.prefix))?;
            let (out, stats) = match mode {
                Mode::Train => g.batch_norm2d(y, gamma, beta, BatchNormMode::Train)?,
                Mode::Inference => {
                    let running = ws.stats_of(&cb.prefix)?;
                    let mode = BatchNormMode::Eval {
                        mean: &running.mean,
                        var: &running.var,
                    };
                    g.batch_norm2d(y, gamma, beta, mode)?
                }
            };
            if let Some(s) = stats {
                bn_stats.push((cb.prefix.clone(), s));
            }
            Ok(out)
        };
        let y = apply(g, x, &self.stem)?;
        let mut y = g.relu(y);
        if self.config.stem_pool {
            y = g.max_pool2d(y, 3, Window::new(2, 1))?;
        }
        for block in &self.blocks {
            let h = apply(g, y, &block.conv1)?;
            let h = g.relu(h);
            let h = apply(g, h, &block.conv2)?;
            let shortcut = match &block.projection {
                Some(p) => apply(g, y, p)?,
                None => y,
            };
            let sum = g.add(h, shortcut)?;
            y = g.relu(sum);
        }
        let pooled = g.global_avg_pool(y)?;
        let logits = g.matmul(pooled, var(HEAD_WEIGHT.into())?)?;
        let logits = g.add_bias(logits, var(HEAD_BIAS.into())?)?;
        Ok((logits, bn_stats))
    }

    /// Inference-mode class probabilities, one row per batch item.
    pub fn predict_probs(&self, ws: &WeightSet, input: Tensor) -> Result<Vec<Vec<f64>>, ModelError> {
        let fwd = self.forward(ws, input, Mode::Inference)?;
        let logits = fwd.graph.value(fwd.logits);
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .map(|row| {
                let mut row = row.to_vec();
                softmax_in_place(&mut row);
                row
            })
            .collect())
    }
}
