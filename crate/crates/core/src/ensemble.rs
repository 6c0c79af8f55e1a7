//! Deep ensembles: independently seeded members, softmax averaging,
//! disagreement as uncertainty, and threshold triage.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{build_model, load_weights, save_weights, Model, ModelConfig, ModelError, WeightSet};
use crate::parallel;
use crate::seed::{mix_seed, stream};
use crate::trainer::{predict_probs, train, FeatureSet, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("an ensemble needs at least one member")]
    NoMembers,
    #[error("member {member}: {source}")]
    Member { member: usize, source: Box<EnsembleError> },
    #[error("cannot calibrate a threshold from an empty prediction list")]
    EmptyPredictions,
    #[error("quantile {0} is outside [0, 1]")]
    BadQuantile(f64),
    #[error("member probability vectors disagree in length")]
    Ragged,
    #[error("ensemble manifest: {0}")]
    Manifest(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Averaged class probabilities plus member disagreement for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean_probs: Vec<f64>,
    /// Population standard deviation of member positive-class probabilities.
    pub uncertainty: f64,
    pub member_probs: Vec<Vec<f64>>,
}

/// Sum in ascending order so the result does not depend on member order.
fn sorted_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

impl Prediction {
    pub fn from_member_probs(member_probs: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        let first = member_probs.first().ok_or(EnsembleError::NoMembers)?;
        let classes = first.len();
        if classes < 2 || member_probs.iter().any(|p| p.len() != classes) {
            return Err(EnsembleError::Ragged);
        }
        let mean_probs: Vec<f64> = (0..classes)
            .map(|c| {
                if member_probs.len() == 1 {
                    member_probs[0][c]
                } else {
                    sorted_mean(member_probs.iter().map(|p| p[c]).collect())
                }
            })
            .collect();
        let positive: Vec<f64> = member_probs.iter().map(|p| p[1]).collect();
        let mu = sorted_mean(positive.clone());
        let var = sorted_mean(positive.iter().map(|p| (p - mu) * (p - mu)).collect());
        Ok(Self {
            mean_probs,
            uncertainty: var.sqrt().clamp(0.0, 0.5),
            member_probs,
        })
    }

    pub fn prob_positive(&self) -> f64 {
        self.mean_probs[1]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triage {
    pub accepted: Vec<usize>,
    pub referred: Vec<usize>,
}

/// Accepts predictions whose uncertainty is at most `threshold`.
pub fn triage(predictions: &[Prediction], threshold: f64) -> Triage {
    let mut out = Triage::default();
    for (i, p) in predictions.iter().enumerate() {
        if p.uncertainty <= threshold {
            out.accepted.push(i);
        } else {
            out.referred.push(i);
        }
    }
    out
}

/// Empirical `quantile` of the uncertainties, linearly interpolated
/// between order statistics at position `(n - 1) * quantile`.
pub fn calibrate_threshold(predictions: &[Prediction], quantile: f64) -> Result<f64, EnsembleError> {
    if predictions.is_empty() {
        return Err(EnsembleError::EmptyPredictions);
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(EnsembleError::BadQuantile(quantile));
    }
    let mut u: Vec<f64> = predictions.iter().map(|p| p.uncertainty).collect();
    u.sort_by(f64::total_cmp);
    let h = (u.len() - 1) as f64 * quantile;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(u[lo] + (h - lo as f64) * (u[hi] - u[lo]))
}

/// Where member weights come from before training.
#[derive(Clone, Debug)]
pub enum Init {
    /// Fresh He initialization seeded per member.
    Random,
    /// Every member starts from the same weights.
    From(WeightSet),
}

#[derive(Clone, Debug)]
pub struct EnsembleModel {
    pub config: ModelConfig,
    pub members: Vec<WeightSet>,
    pub member_seeds: Vec<u64>,
}

pub fn member_seed(master: u64, member: usize) -> u64 {
    mix_seed(master, stream::MEMBER ^ member as u64)
}

/// A trained ensemble and each member's history.
pub struct EnsembleRun {
    pub ensemble: EnsembleModel,
    pub histories: Vec<TrainHistory>,
}

/// Trains `members` copies of the architecture, member `i` seeded from
/// `tc.seed` and `i`. Members run concurrently when parallelism is enabled.
pub fn train_ensemble(
    config: &ModelConfig,
    init: &Init,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    tc: &TrainConfig,
    members: usize,
) -> Result<EnsembleRun, EnsembleError> {
    if members == 0 {
        return Err(EnsembleError::NoMembers);
    }
    let model = build_model(config)?;
    let seeds: Vec<u64> = (0..members).map(|i| member_seed(tc.seed, i)).collect();
    let runs = parallel::try_map(&seeds, |i, &seed| {
        let start = match init {
            Init::Random => model.init_random(seed),
            Init::From(ws) => ws.clone(),
        };
        let member_tc = TrainConfig { seed, ..tc.clone() };
        train(&model, start, train_set, val_set, &member_tc).map_err(|e| EnsembleError::Member {
            member: i,
            source: Box::new(e.into()),
        })
    })?;
    let (weights, histories) = runs.into_iter().unzip();
    Ok(EnsembleRun {
        ensemble: EnsembleModel {
            config: config.clone(),
            members: weights,
            member_seeds: seeds,
        },
        histories,
    })
}

pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleManifest {
    config: ModelConfig,
    member_seeds: Vec<u64>,
    files: Vec<String>,
    fingerprint: String,
}

impl EnsembleModel {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn model(&self) -> Result<Model, EnsembleError> {
        Ok(build_model(&self.config)?)
    }

    /// Predictions for every example in `set`.
    pub fn predict_set(&self, set: &FeatureSet) -> Result<Vec<Prediction>, EnsembleError> {
        if self.members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        let model = self.model()?;
        let per_member = parallel::try_map(&self.members, |_, ws| predict_probs(&model, ws, set))?;
        (0..set.len())
            .map(|j| Prediction::from_member_probs(per_member.iter().map(|m| m[j].clone()).collect()))
            .collect()
    }

    /// Prediction for a single spectrogram.
    pub fn predict(&self, spec: &crate::dsp::MelSpectrogram) -> Result<Prediction, EnsembleError> {
        let (frames, mels) = spec.shape();
        let mut set = FeatureSet::new(frames, mels);
        set.push("input", spec, 0)?;
        Ok(self.predict_set(&set)?.remove(0))
    }

    /// Writes `ensemble.json` and one `member{i}.nnwt` file per member.
    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        std::fs::create_dir_all(dir)?;
        let model = self.model()?;
        let mut files = Vec::new();
        for (i, ws) in self.members.iter().enumerate() {
            model.check_weights(ws)?;
            let name = format!("member{i}.nnwt");
            save_weights(&dir.join(&name), ws)?;
            files.push(name);
        }
        let manifest = EnsembleManifest {
            config: self.config.clone(),
            member_seeds: self.member_seeds.clone(),
            files,
            fingerprint: crate::model::hex(&model.fingerprint()),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| EnsembleError::Manifest(e.to_string()))?;
        std::fs::write(dir.join(ENSEMBLE_MANIFEST), json + "\n")?;
        Ok(())
    }

    /// Loads an ensemble directory, rejecting members whose fingerprint
    /// differs from the recorded config.
    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let text = std::fs::read_to_string(dir.join(ENSEMBLE_MANIFEST))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text).map_err(|e| EnsembleError::Manifest(e.to_string()))?;
        if manifest.files.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        if manifest.files.len() != manifest.member_seeds.len() {
            return Err(EnsembleError::Manifest("files and member_seeds differ in length".into()));
        }
        let model = build_model(&manifest.config)?;
        if crate::model::hex(&model.fingerprint()) != manifest.fingerprint {
            return Err(EnsembleError::Manifest("recorded fingerprint does not match config".into()));
        }
        let members = manifest
            .files
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let path: PathBuf = dir.join(f);
                load_weights(&path, &model, None).map_err(|e| EnsembleError::Member {
                    member: i,
                    source: Box::new(e.into()),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            config: manifest.config,
            members,
            member_seeds: manifest.member_seeds,
        })
    }
}

pub fn decision(p: &Prediction, threshold: f64) -> &'static str {
    if p.uncertainty <= threshold {
        "accept"
    } else {
        "refer"
    }
}

/// CSV with columns `file_name,prob_positive,uncertainty,decision`.
pub fn write_predictions_csv<W: Write>(out: W, names: &[String], preds: &[Prediction], threshold: f64) -> Result<(), EnsembleError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["file_name", "prob_positive", "uncertainty", "decision"])?;
    for (name, p) in names.iter().zip(preds) {
        w.write_record([
            name.as_str(),
            &format!("{:?}", p.prob_positive()),
            &format!("{:?}", p.uncertainty),
            decision(p, threshold),
        ])?;
    }
    w.flush()?;
    Ok(())
}
