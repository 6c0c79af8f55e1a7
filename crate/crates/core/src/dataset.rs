//! Manifests, stratified folds, class balancing and the synthetic task.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{rms, AudioClip, DspError};
use crate::parallel;
use crate::seed::{mix_seed, rng, stream};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest header must be `file_name,label`, found `{0}`")]
    BadHeader(String),
    #[error("row {row}: unknown label token `{token}` (expected p/n or 1/0)")]
    UnknownLabel { row: u64, token: String },
    #[error("row {row}: duplicate file_name `{name}`")]
    DuplicateFileName { row: u64, name: String },
    #[error("row {row}: expected 2 fields")]
    BadRow { row: u64 },
    #[error("manifest csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("class {label} has {count} examples, fewer than k = {k}")]
    ClassTooSmall { label: u8, count: usize, k: usize },
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("class {0} is empty")]
    EmptyClass(u8),
    #[error("clip `{0}` is silent; cannot target an SNR")]
    SilentClip(String),
    #[error("SNR must be finite, got {0}")]
    NonFiniteSnr(f64),
    #[error("label {0} is not binary")]
    NonBinaryLabel(u8),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Binary class label: 0 = negative, 1 = positive.
pub type Label = u8;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub clip: AudioClip,
    pub label: Label,
}

impl LabeledExample {
    pub fn name(&self) -> &str {
        self.clip.source_id()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file_name: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn parse_label(token: &str) -> Option<Label> {
    match token.trim() {
        "p" | "1" => Some(1),
        "n" | "0" => Some(0),
        _ => None,
    }
}

impl Manifest {
    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.file_name.clone()).collect()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label == 1).count()
    }

    pub fn path_of(&self, entry: &ManifestEntry) -> PathBuf {
        self.root_dir.join(&entry.file_name)
    }

    /// Parses manifest CSV text. Row numbers in errors count the header as row 1.
    pub fn parse(text: &[u8], root_dir: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text);
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "file_name" || &headers[1] != "label" {
            return Err(DatasetError::BadHeader(headers.iter().collect::<Vec<_>>().join(",")));
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for record in reader.records() {
            let record = record?;
            let row = record.position().map_or(0, |p| p.line());
            if record.len() != 2 {
                return Err(DatasetError::BadRow { row });
            }
            let label = parse_label(&record[1]).ok_or_else(|| DatasetError::UnknownLabel {
                row,
                token: record[1].to_string(),
            })?;
            let name = record[0].to_string();
            if !seen.insert(name.clone()) {
                return Err(DatasetError::DuplicateFileName { row, name });
            }
            entries.push(ManifestEntry { file_name: name, label });
        }
        Ok(Self {
            root_dir: root_dir.into(),
            entries,
        })
    }

    /// Writes `file_name,label` with `p`/`n` tokens.
    pub fn write<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["file_name", "label"])?;
        for e in &self.entries {
            w.write_record([e.file_name.as_str(), if e.label == 1 { "p" } else { "n" }])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write(std::io::BufWriter::new(file))
    }
}

/// Loads a manifest; audio paths resolve relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(&text, root)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn validation_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|i| self.assignments[*i] == fold).collect()
    }

    pub fn training_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|i| self.assignments[*i] != fold).collect()
    }

    /// `file_name,fold` rows.
    pub fn write_csv<W: Write>(&self, out: W, names: &[String]) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["file_name", "fold"])?;
        for (name, fold) in names.iter().zip(&self.assignments) {
            w.write_record([name.as_str(), &fold.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per class, a seeded permutation dealt round-robin into `k` folds.
///
/// Negatives are dealt starting where the positives stopped, so total fold
/// sizes also differ by at most one.
pub fn stratified_kfold(labels: &[Label], k: usize, seed: u64) -> Result<FoldPlan, DatasetError> {
    if k < 2 {
        return Err(DatasetError::TooFewFolds(k));
    }
    if let Some(&l) = labels.iter().find(|l| **l > 1) {
        return Err(DatasetError::NonBinaryLabel(l));
    }
    let mut assignments = vec![0; labels.len()];
    let mut offset = 0;
    for class in [1u8, 0] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        if members.len() < k {
            return Err(DatasetError::ClassTooSmall {
                label: class,
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng(mix_seed(mix_seed(seed, stream::FOLD), class as u64)));
        for (pos, idx) in members.iter().enumerate() {
            assignments[*idx] = (offset + pos) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok(FoldPlan { k, assignments, seed })
}

/// `clip + lambda * g` with `g ~ N(0, 1)` and `lambda = rms(clip) / 10^(snr_db / 20)`,
/// clamped back into `[-1, 1]`.
pub fn add_gaussian_noise(clip: &AudioClip, snr_db: f64, seed: u64) -> Result<AudioClip, DatasetError> {
    if !snr_db.is_finite() {
        return Err(DatasetError::NonFiniteSnr(snr_db));
    }
    let level = clip.rms();
    if level == 0.0 {
        return Err(DatasetError::SilentClip(clip.source_id().to_string()));
    }
    let lambda = level / 10f64.powf(snr_db / 20.0);
    let mut r = rng(mix_seed(seed, stream::NOISE));
    let samples = clip
        .samples()
        .iter()
        .map(|s| {
            let g: f64 = r.sample(StandardNormal);
            (s + lambda * g).clamp(-1.0, 1.0)
        })
        .collect();
    Ok(AudioClip::new(samples, clip.sample_rate(), clip.source_id())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BalanceMode {
    None,
    Duplicate,
    GaussianNoise { snr_db: f64 },
}

impl BalanceMode {
    pub const DEFAULT_SNR_DB: f64 = 20.0;

    pub fn gaussian() -> Self {
        Self::GaussianNoise {
            snr_db: Self::DEFAULT_SNR_DB,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Duplicate => "dup",
            Self::GaussianNoise { .. } => "gauss",
        }
    }
}

/// Oversamples the minority class to exact parity. Originals come first in
/// input order, followed by the synthetic minority copies.
pub fn balance(examples: &[LabeledExample], mode: BalanceMode, seed: u64) -> Result<Vec<LabeledExample>, DatasetError> {
    if let Some(e) = examples.iter().find(|e| e.label > 1) {
        return Err(DatasetError::NonBinaryLabel(e.label));
    }
    let pos: Vec<usize> = (0..examples.len()).filter(|i| examples[*i].label == 1).collect();
    let neg_count = examples.len() - pos.len();
    if pos.is_empty() {
        return Err(DatasetError::EmptyClass(1));
    }
    if neg_count == 0 {
        return Err(DatasetError::EmptyClass(0));
    }
    if let BalanceMode::GaussianNoise { snr_db } = mode {
        if !snr_db.is_finite() {
            return Err(DatasetError::NonFiniteSnr(snr_db));
        }
    }
    let mut out = examples.to_vec();
    if mode == BalanceMode::None || pos.len() == neg_count {
        return Ok(out);
    }
    let minority_label = u8::from(pos.len() < neg_count);
    let mut minority: Vec<usize> = (0..examples.len())
        .filter(|i| examples[*i].label == minority_label)
        .collect();
    let deficit = pos.len().max(neg_count) - minority.len();
    minority.shuffle(&mut rng(mix_seed(seed, stream::BALANCE)));
    let sources: Vec<usize> = (0..deficit).map(|j| minority[j % minority.len()]).collect();
    let extras = match mode {
        BalanceMode::None => unreachable!(),
        BalanceMode::Duplicate => sources.iter().map(|&i| examples[i].clone()).collect(),
        BalanceMode::GaussianNoise { snr_db } => parallel::try_map(&sources, |j, &i| {
            let src = &examples[i];
            let noisy = add_gaussian_noise(&src.clip, snr_db, mix_seed(seed, j as u64))?;
            Ok::<_, DatasetError>(LabeledExample {
                clip: noisy.with_source_id(format!("{}#aug{j}", src.name())),
                label: src.label,
            })
        })?,
    };
    out.extend(extras);
    Ok(out)
}

/// Parameters of the synthetic detection task: low-passed noise, with a
/// linear chirp hidden in the positives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sample_rate: u32,
    pub seconds: f64,
    pub chirp_start_hz: f64,
    pub chirp_end_hz: f64,
    pub chirp_seconds: f64,
    pub noise_rms: f64,
    /// One-pole low-pass coefficient applied to white noise.
    pub lowpass: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            seconds: 3.0,
            chirp_start_hz: 400.0,
            chirp_end_hz: 1200.0,
            chirp_seconds: 0.5,
            noise_rms: 0.1,
            lowpass: 0.9,
        }
    }
}

fn pinkish_noise(spec: &SyntheticSpec, n: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut y = 0.0;
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = r.sample(StandardNormal);
            y = spec.lowpass * y + (1.0 - spec.lowpass) * x;
            y
        })
        .collect();
    let scale = spec.noise_rms / rms(&out).max(f64::MIN_POSITIVE);
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

fn synthetic_example(spec: &SyntheticSpec, positive: bool, snr_db: f64, seed: u64, name: String) -> Result<LabeledExample, DatasetError> {
    let mut r = rng(seed);
    let n = (spec.seconds * spec.sample_rate as f64).round() as usize;
    let mut samples = pinkish_noise(spec, n, &mut r);
    if positive {
        let fs = spec.sample_rate as f64;
        let len = ((spec.chirp_seconds * fs).round() as usize).min(n);
        let start = r.gen_range(0..=n - len);
        let phase0 = r.gen_range(0.0..2.0 * PI);
        let amp = std::f64::consts::SQRT_2 * spec.noise_rms * 10f64.powf(snr_db / 20.0);
        let sweep = (spec.chirp_end_hz - spec.chirp_start_hz) / spec.chirp_seconds;
        for i in 0..len {
            let t = i as f64 / fs;
            let phase = 2.0 * PI * (spec.chirp_start_hz * t + 0.5 * sweep * t * t) + phase0;
            samples[start + i] += amp * phase.sin();
        }
    }
    samples.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(LabeledExample {
        clip: AudioClip::new(samples, spec.sample_rate, name)?,
        label: u8::from(positive),
    })
}

/// Synthetic corpus with the default [`SyntheticSpec`]. Positives come first.
pub fn make_synthetic_task(n_pos: usize, n_neg: usize, difficulty_snr_db: f64, seed: u64) -> Result<Vec<LabeledExample>, DatasetError> {
    make_synthetic_task_with(&SyntheticSpec::default(), n_pos, n_neg, difficulty_snr_db, seed)
}

/// `difficulty_snr_db` is the chirp RMS (over its duration) relative to the
/// noise RMS.
pub fn make_synthetic_task_with(
    spec: &SyntheticSpec,
    n_pos: usize,
    n_neg: usize,
    difficulty_snr_db: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>, DatasetError> {
    if n_pos == 0 {
        return Err(DatasetError::EmptyClass(1));
    }
    if n_neg == 0 {
        return Err(DatasetError::EmptyClass(0));
    }
    if !difficulty_snr_db.is_finite() {
        return Err(DatasetError::NonFiniteSnr(difficulty_snr_db));
    }
    let base = mix_seed(seed, stream::SYNTH);
    let jobs: Vec<(bool, usize)> = (0..n_pos).map(|i| (true, i)).chain((0..n_neg).map(|i| (false, i))).collect();
    parallel::try_map(&jobs, |j, &(positive, i)| {
        let name = format!("{}_{i:04}.wav", if positive { "pos" } else { "neg" });
        synthetic_example(spec, positive, difficulty_snr_db, mix_seed(base, j as u64), name)
    })
}
