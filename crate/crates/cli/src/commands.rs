//! Subcommand implementations. Every command reads its inputs from disk
//! and writes its results under the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use relia_core::dataset::{load_manifest, make_synthetic_task_with, LabeledExample, Manifest, ManifestEntry, SyntheticSpec};
use relia_core::dsp::{decode_wav, encode_wav};
use relia_core::ensemble::{calibrate_threshold, write_predictions_csv, EnsembleModel, Prediction};
use relia_core::metrics::{roc_auc, selective_report, write_example_csv, EvalReport};
use relia_core::parallel;
use relia_core::pipeline::{cross_validate, featurize, featurize_clip, CvResult};
use serde::{Deserialize, Serialize};

use crate::config::{BalanceChoice, LossChoice, RunConfig};

pub const TRIAGE_FILE: &str = "triage.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct TriageSettings {
    pub threshold: f64,
    pub quantile: f64,
}

fn read_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.manifest()?;
    let mut manifest = load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))?;
    if let Some(root) = &cfg.audio_root {
        manifest.root_dir = root.clone();
    }
    Ok(manifest)
}

fn decode_entry(manifest: &Manifest, entry: &ManifestEntry) -> Result<LabeledExample> {
    let path = manifest.path_of(entry);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let clip = decode_wav(&bytes).with_context(|| format!("decoding {}", entry.file_name))?;
    Ok(LabeledExample {
        clip: clip.with_source_id(entry.file_name.clone()),
        label: entry.label,
    })
}

/// Decodes every manifest entry; fails on the first unreadable file.
pub fn load_examples(manifest: &Manifest) -> Result<Vec<LabeledExample>> {
    parallel::map(&manifest.entries, |_, e| decode_entry(manifest, e)).into_iter().collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_file(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Spectrogram file name for a manifest entry.
pub fn feature_file_name(file_name: &str) -> String {
    format!("{}.mel", file_name.replace(['/', '\\'], "_"))
}

#[derive(Debug, Default)]
pub struct FeaturizeSummary {
    pub written: usize,
    pub failures: Vec<(String, String)>,
}

pub fn featurize_cmd(cfg: &RunConfig) -> Result<FeaturizeSummary> {
    let manifest = read_manifest(cfg)?;
    let out = cfg.out_dir()?;
    let dsp = cfg.dsp();
    dsp.validate()?;
    create_dir(out)?;
    let results = parallel::map(&manifest.entries, |_, entry| -> Result<Vec<u8>> {
        let ex = decode_entry(&manifest, entry)?;
        Ok(featurize_clip(&ex.clip, &dsp)?.to_bytes())
    });
    let mut summary = FeaturizeSummary::default();
    let mut index = csv::Writer::from_writer(Vec::new());
    index.write_record(["file_name", "label", "feature_file"])?;
    for (entry, result) in manifest.entries.iter().zip(results) {
        match result {
            Ok(bytes) => {
                let name = feature_file_name(&entry.file_name);
                write_file(&out.join(&name), bytes)?;
                index.write_record([entry.file_name.as_str(), &entry.label.to_string(), &name])?;
                summary.written += 1;
            }
            Err(e) => summary.failures.push((entry.file_name.clone(), format!("{e:#}"))),
        }
    }
    write_file(&out.join("index.csv"), index.into_inner()?)?;
    Ok(summary)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn write_cv_outputs(out: &Path, cfg: &RunConfig, result: &CvResult) -> Result<()> {
    create_dir(out)?;
    for fold in &result.folds {
        let dir = out.join(format!("fold{}", fold.fold));
        let ens_dir = dir.join("ensemble");
        fold.ensemble.save(&ens_dir)?;
        write_json(
            &ens_dir.join(TRIAGE_FILE),
            &TriageSettings {
                threshold: result.report.threshold_used,
                quantile: cfg.quantile,
            },
        )?;
        for (i, h) in fold.histories.iter().enumerate() {
            let bytes = csv_bytes(|b| Ok(h.write_csv(b)?))?;
            write_file(&dir.join(format!("history_member{i}.csv")), bytes)?;
        }
    }
    let threshold = result.report.threshold_used;
    let bytes = csv_bytes(|b| Ok(write_example_csv(b, &result.names, &result.predictions, &result.labels, threshold)?))?;
    write_file(&out.join("predictions.csv"), bytes)?;
    let bytes = csv_bytes(|b| Ok(result.plan.write_csv(b, &result.names)?))?;
    write_file(&out.join("folds.csv"), bytes)?;
    write_json(&out.join("report.json"), &result.report)
}

pub fn train_ensemble_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let examples = load_examples(&read_manifest(cfg)?)?;
    let result = cross_validate(&examples, &cfg.cv())?;
    write_cv_outputs(&out, cfg, &result)?;
    Ok(result.report)
}

struct Scored {
    names: Vec<String>,
    labels: Vec<u8>,
    predictions: Vec<Prediction>,
    threshold: f64,
}

fn score_manifest(cfg: &RunConfig, ensemble_dir: &Path) -> Result<Scored> {
    let ensemble = EnsembleModel::load(ensemble_dir).with_context(|| format!("loading ensemble {}", ensemble_dir.display()))?;
    let dsp = cfg.dsp();
    let features = (dsp.n_frames(), dsp.n_mels);
    if ensemble.config.input_shape != features {
        bail!(
            "ensemble expects {:?} spectrograms but the config produces {:?}",
            ensemble.config.input_shape,
            features
        );
    }
    let examples = load_examples(&read_manifest(cfg)?)?;
    let set = featurize(&examples, &dsp)?;
    let predictions = ensemble.predict_set(&set)?;
    let triage_path = ensemble_dir.join(TRIAGE_FILE);
    let threshold = if triage_path.exists() {
        let text = fs::read_to_string(&triage_path)?;
        serde_json::from_str::<TriageSettings>(&text)
            .with_context(|| format!("parsing {}", triage_path.display()))?
            .threshold
    } else if predictions.is_empty() {
        0.0
    } else {
        calibrate_threshold(&predictions, cfg.quantile)?
    };
    Ok(Scored {
        names: set.names,
        labels: set.labels,
        predictions,
        threshold,
    })
}

pub fn predict_cmd(cfg: &RunConfig, ensemble_dir: &Path) -> Result<usize> {
    let out = cfg.out_dir()?;
    let scored = score_manifest(cfg, ensemble_dir)?;
    create_dir(out)?;
    let bytes = csv_bytes(|b| Ok(write_predictions_csv(b, &scored.names, &scored.predictions, scored.threshold)?))?;
    write_file(&out.join("predictions.csv"), bytes)?;
    Ok(scored.predictions.len())
}

pub fn evaluate_cmd(cfg: &RunConfig, ensemble_dir: &Path) -> Result<EvalReport> {
    let out = cfg.out_dir()?;
    let scored = score_manifest(cfg, ensemble_dir)?;
    let scores: Vec<f64> = scored.predictions.iter().map(Prediction::prob_positive).collect();
    let report = EvalReport {
        auc: roc_auc(&scores, &scored.labels)?,
        fold_aucs: Vec::new(),
        fold_mean: None,
        fold_std: None,
        selective: selective_report(&scored.predictions, &scored.labels, scored.threshold)?,
        threshold_used: scored.threshold,
    };
    create_dir(out)?;
    let bytes = csv_bytes(|b| {
        Ok(write_example_csv(b, &scored.names, &scored.predictions, &scored.labels, scored.threshold)?)
    })?;
    write_file(&out.join("examples.csv"), bytes)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

pub fn synthetic_cmd(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?;
    let spec = SyntheticSpec {
        sample_rate: cfg.sample_rate,
        seconds: cfg.clip_seconds,
        ..SyntheticSpec::default()
    };
    ensure!(
        spec.chirp_end_hz < spec.sample_rate as f64 / 2.0,
        "sample rate {} cannot represent the {} Hz chirp",
        spec.sample_rate,
        spec.chirp_end_hz
    );
    let examples = make_synthetic_task_with(&spec, cfg.synth_pos, cfg.synth_neg, cfg.synth_snr_db, cfg.seed)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(examples.len());
    for ex in &examples {
        write_file(&out.join(ex.name()), encode_wav(&ex.clip))?;
        entries.push(ManifestEntry {
            file_name: ex.name().to_string(),
            label: ex.label,
        });
    }
    let manifest = Manifest {
        root_dir: out.to_path_buf(),
        entries,
    };
    let path = out.join("manifest.csv");
    manifest.save(&path)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub loss: String,
    pub balance: String,
    pub auc: f64,
    pub fold_mean: f64,
    pub fold_std: f64,
    pub n_low: usize,
    pub acc_low: Option<f64>,
    pub n_high: usize,
    pub acc_high: Option<f64>,
    pub threshold: f64,
}

/// Cross-validates every loss and balancing combination.
pub fn grid_cmd(cfg: &RunConfig) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let examples = load_examples(&read_manifest(cfg)?)?;
    create_dir(&out)?;
    let mut rows = Vec::new();
    for loss in LossChoice::ALL {
        for balance in BalanceChoice::ALL {
            let run = RunConfig {
                loss,
                balance,
                ..cfg.clone()
            };
            let tag = format!("{}_{}", loss.name(), balance.name());
            let result = cross_validate(&examples, &run.cv()).with_context(|| format!("grid cell {tag}"))?;
            let dir = out.join(&tag);
            create_dir(&dir)?;
            write_json(&dir.join("report.json"), &result.report)?;
            let r = &result.report;
            rows.push(GridRow {
                loss: loss.name().into(),
                balance: balance.name().into(),
                auc: r.auc,
                fold_mean: r.fold_mean.unwrap_or(f64::NAN),
                fold_std: r.fold_std.unwrap_or(f64::NAN),
                n_low: r.selective.n_low,
                acc_low: r.selective.acc_low,
                n_high: r.selective.n_high,
                acc_high: r.selective.acc_high,
                threshold: r.threshold_used,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    write_file(&out.join("grid.csv"), w.into_inner()?)?;
    Ok(rows)
}
