//! Featurization and stratified cross-validation of deep ensembles.

use serde::{Deserialize, Serialize};

use crate::dataset::{balance, stratified_kfold, DatasetError, FoldPlan, LabeledExample};
use crate::dsp::{log_mel, resample, AudioClip, DspConfig, DspError, MelSpectrogram};
use crate::ensemble::{calibrate_threshold, train_ensemble, EnsembleError, EnsembleModel, Init, Prediction};
use crate::metrics::{fold_aggregate, roc_auc, selective_report, EvalReport, MetricsError};
use crate::model::ModelConfig;
use crate::parallel;
use crate::seed::{mix_seed, stream};
use crate::trainer::{FeatureSet, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{name}: {source}")]
    Featurize { name: String, source: DspError },
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<PipelineError> },
    #[error("model input {model:?} does not match features {features:?}")]
    InputMismatch { model: (usize, usize), features: (usize, usize) },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Resamples to the configured rate when needed, then computes the
/// standardized log-mel spectrogram.
pub fn featurize_clip(clip: &AudioClip, dsp: &DspConfig) -> Result<MelSpectrogram, DspError> {
    if clip.sample_rate() == dsp.sample_rate {
        log_mel(clip, dsp)
    } else {
        log_mel(&resample(clip, dsp.sample_rate)?, dsp)
    }
}

pub fn featurize(examples: &[LabeledExample], dsp: &DspConfig) -> Result<FeatureSet, PipelineError> {
    dsp.validate().map_err(|source| PipelineError::Featurize {
        name: "config".into(),
        source,
    })?;
    let specs = parallel::try_map(examples, |_, ex| {
        featurize_clip(&ex.clip, dsp).map_err(|source| PipelineError::Featurize {
            name: ex.name().to_string(),
            source,
        })
    })?;
    let mut set = FeatureSet::new(dsp.n_frames(), dsp.n_mels);
    for (ex, spec) in examples.iter().zip(&specs) {
        set.push(ex.name(), spec, ex.label)?;
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub dsp: DspConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub members: usize,
    pub folds: usize,
    /// Uncertainty quantile used as the triage threshold.
    pub quantile: f64,
}

pub struct FoldResult {
    pub fold: usize,
    pub ensemble: EnsembleModel,
    pub histories: Vec<TrainHistory>,
    pub val_indices: Vec<usize>,
    pub predictions: Vec<Prediction>,
    pub auc: f64,
}

pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    /// Out-of-fold predictions in example order.
    pub predictions: Vec<Prediction>,
    pub labels: Vec<u8>,
    pub names: Vec<String>,
    pub report: EvalReport,
}

/// Master seed of fold `fold`'s training runs.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    mix_seed(seed, stream::FOLD ^ fold as u64)
}

fn run_fold(examples: &[LabeledExample], originals: &FeatureSet, plan: &FoldPlan, fold: usize, cfg: &CvConfig) -> Result<FoldResult, PipelineError> {
    let train_idx = plan.training_indices(fold);
    let val_idx = plan.validation_indices(fold);
    let seed = fold_seed(cfg.train.seed, fold);
    let train_examples: Vec<LabeledExample> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let balanced = balance(&train_examples, cfg.train.balance, seed)?;
    let mut train_set = originals.subset(&train_idx);
    let extra = featurize(&balanced[train_examples.len()..], &cfg.dsp)?;
    train_set.data.extend_from_slice(&extra.data);
    train_set.labels.extend_from_slice(&extra.labels);
    train_set.names.extend(extra.names);
    let val_set = originals.subset(&val_idx);
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let run = train_ensemble(&cfg.model, &Init::Random, &train_set, &val_set, &tc, cfg.members)?;
    let predictions = run.ensemble.predict_set(&val_set)?;
    let scores: Vec<f64> = predictions.iter().map(Prediction::prob_positive).collect();
    let auc = roc_auc(&scores, &val_set.labels)?;
    Ok(FoldResult {
        fold,
        ensemble: run.ensemble,
        histories: run.histories,
        val_indices: val_idx,
        predictions,
        auc,
    })
}

/// Stratified k-fold evaluation. Balancing touches training folds only;
/// the report pools out-of-fold predictions and thresholds uncertainty at
/// `cfg.quantile` of the pooled values.
pub fn cross_validate(examples: &[LabeledExample], cfg: &CvConfig) -> Result<CvResult, PipelineError> {
    cfg.train.validate()?;
    let features = (cfg.dsp.n_frames(), cfg.dsp.n_mels);
    if cfg.model.input_shape != features {
        return Err(PipelineError::InputMismatch {
            model: cfg.model.input_shape,
            features,
        });
    }
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    let plan = stratified_kfold(&labels, cfg.folds, cfg.train.seed)?;
    let originals = featurize(examples, &cfg.dsp)?;
    let fold_ids: Vec<usize> = (0..cfg.folds).collect();
    let folds = parallel::try_map(&fold_ids, |_, &fold| {
        run_fold(examples, &originals, &plan, fold, cfg).map_err(|e| PipelineError::Fold {
            fold,
            source: Box::new(e),
        })
    })?;

    let mut pooled: Vec<Option<Prediction>> = vec![None; examples.len()];
    for f in &folds {
        for (&i, p) in f.val_indices.iter().zip(&f.predictions) {
            pooled[i] = Some(p.clone());
        }
    }
    let predictions: Vec<Prediction> = pooled.into_iter().map(|p| p.expect("every example is validated once")).collect();
    let scores: Vec<f64> = predictions.iter().map(Prediction::prob_positive).collect();
    let fold_aucs: Vec<f64> = folds.iter().map(|f| f.auc).collect();
    let (fold_mean, fold_std) = fold_aggregate(&fold_aucs)?;
    let threshold = calibrate_threshold(&predictions, cfg.quantile)?;
    let report = EvalReport {
        auc: roc_auc(&scores, &labels)?,
        fold_aucs,
        fold_mean: Some(fold_mean),
        fold_std: Some(fold_std),
        selective: selective_report(&predictions, &labels, threshold)?,
        threshold_used: threshold,
    };
    Ok(CvResult {
        plan,
        folds,
        predictions,
        labels,
        names: originals.names,
        report,
    })
}
