//! Flat JSON run configuration. Every field has a default; command-line
//! flags are applied on top of the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use relia_core::dataset::BalanceMode;
use relia_core::dsp::DspConfig;
use relia_core::losses::{LossConfig, LossKind};
use relia_core::model::{ModelConfig, StageConfig};
use relia_core::pipeline::CvConfig;
use relia_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossChoice {
    Ce,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BalanceChoice {
    None,
    Dup,
    Gauss,
}

impl LossChoice {
    pub const ALL: [LossChoice; 2] = [LossChoice::Ce, LossChoice::Focal];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Focal => "focal",
        }
    }
}

impl BalanceChoice {
    pub const ALL: [BalanceChoice; 3] = [BalanceChoice::None, BalanceChoice::Dup, BalanceChoice::Gauss];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Dup => "dup",
            Self::Gauss => "gauss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop_len: usize,
    pub n_mels: usize,
    pub clip_seconds: f64,
    pub fmin: f64,
    pub fmax: f64,

    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub stem_pool: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossChoice,
    pub gamma: f64,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub balance: BalanceChoice,
    /// Signal-to-noise ratio of noise-augmented copies.
    pub augment_snr_db: f64,

    pub members: usize,
    pub folds: usize,
    pub quantile: f64,

    pub synth_pos: usize,
    pub synth_neg: usize,
    /// Chirp-to-noise ratio of generated corpora.
    pub synth_snr_db: f64,

    pub manifest: Option<PathBuf>,
    pub audio_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dsp = DspConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let focal = LossConfig::default();
        Self {
            sample_rate: dsp.sample_rate,
            window_len: dsp.window_len,
            hop_len: dsp.hop_len,
            n_mels: dsp.n_mels,
            clip_seconds: dsp.clip_seconds,
            fmin: dsp.fmin,
            fmax: dsp.fmax,
            stem_channels: model.stem_channels,
            stages: model.stages,
            stem_pool: model.stem_pool,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            seed: train.seed,
            loss: LossChoice::Focal,
            gamma: focal.gamma,
            alpha_pos: focal.alpha_pos,
            alpha_neg: focal.alpha_neg,
            balance: BalanceChoice::Gauss,
            augment_snr_db: 20.0,
            members: 5,
            folds: 5,
            quantile: 0.5,
            synth_pos: 50,
            synth_neg: 500,
            synth_snr_db: 0.0,
            manifest: None,
            audio_root: None,
            out_dir: None,
            workers: None,
        }
    }
}

/// Values given on the command line; `None` leaves the config untouched.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub members: Option<usize>,
    pub folds: Option<usize>,
    pub loss: Option<LossChoice>,
    pub balance: Option<BalanceChoice>,
    pub snr_db: Option<f64>,
    pub quantile: Option<f64>,
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies flags. `--snr-db` sets the corpus SNR for `synthetic` and the
    /// augmentation SNR everywhere else.
    pub fn apply(&mut self, o: &Overrides, synthetic: bool) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = Some(v.clone());
        }
        if let Some(v) = o.members {
            self.members = v;
        }
        if let Some(v) = o.folds {
            self.folds = v;
        }
        if let Some(v) = o.loss {
            self.loss = v;
        }
        if let Some(v) = o.balance {
            self.balance = v;
        }
        if let Some(v) = o.snr_db {
            if synthetic {
                self.synth_snr_db = v;
            } else {
                self.augment_snr_db = v;
            }
        }
        if let Some(v) = o.quantile {
            self.quantile = v;
        }
        if let Some(v) = &o.manifest {
            self.manifest = Some(v.clone());
        }
    }

    pub fn dsp(&self) -> DspConfig {
        DspConfig {
            sample_rate: self.sample_rate,
            window_len: self.window_len,
            hop_len: self.hop_len,
            n_mels: self.n_mels,
            clip_seconds: self.clip_seconds,
            fmin: self.fmin,
            fmax: self.fmax,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let dsp = self.dsp();
        ModelConfig {
            stem_channels: self.stem_channels,
            stages: self.stages.clone(),
            num_classes: 2,
            input_shape: (dsp.n_frames(), dsp.n_mels),
            stem_pool: self.stem_pool,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: match self.loss {
                LossChoice::Ce => LossKind::CrossEntropy,
                LossChoice::Focal => LossKind::Focal,
            },
            gamma: self.gamma,
            alpha_pos: self.alpha_pos,
            alpha_neg: self.alpha_neg,
        }
    }

    pub fn balance_mode(&self) -> BalanceMode {
        match self.balance {
            BalanceChoice::None => BalanceMode::None,
            BalanceChoice::Dup => BalanceMode::Duplicate,
            BalanceChoice::Gauss => BalanceMode::GaussianNoise {
                snr_db: self.augment_snr_db,
            },
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed: self.seed,
            loss: self.loss_config(),
            balance: self.balance_mode(),
        }
    }

    pub fn cv(&self) -> CvConfig {
        CvConfig {
            dsp: self.dsp(),
            model: self.model(),
            train: self.train(),
            members: self.members,
            folds: self.folds,
            quantile: self.quantile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp().validate()?;
        self.model().validate()?;
        self.train().validate()?;
        if self.members == 0 {
            bail!("members must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.quantile) {
            bail!("quantile must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().context("an output directory is required (--out or out_dir)")
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().context("a manifest is required (--manifest or manifest)")
    }
}
