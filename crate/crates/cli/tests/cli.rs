use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relia::commands::{self, feature_file_name};
use relia::config::{BalanceChoice, LossChoice, Overrides, RunConfig};
use relia_core::dsp::MelSpectrogram;
use relia_core::model::StageConfig;

fn small_config(dir: &Path) -> RunConfig {
    RunConfig {
        sample_rate: 8000,
        window_len: 512,
        hop_len: 256,
        n_mels: 16,
        clip_seconds: 1.0,
        fmin: 50.0,
        fmax: 4000.0,
        stem_channels: 2,
        stages: vec![StageConfig::new(1, 4, 2)],
        epochs: 2,
        synth_pos: 4,
        synth_neg: 6,
        synth_snr_db: -3.0,
        members: 2,
        folds: 2,
        out_dir: Some(dir.join("out")),
        ..RunConfig::default()
    }
}

fn synth(cfg: &RunConfig, dir: &Path) -> PathBuf {
    let c = RunConfig {
        out_dir: Some(dir.join("data")),
        ..cfg.clone()
    };
    commands::synthetic_cmd(&c).unwrap()
}

fn relia(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relia")).args(args).output().unwrap()
}

fn write_config(cfg: &RunConfig, path: &Path) {
    fs::write(path, serde_json::to_string(cfg).unwrap()).unwrap();
}

#[test]
fn synthetic_writes_wavs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let manifest = synth(&cfg, dir.path());
    let text = fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("file_name,label\npos_0000.wav,p\n"));
    assert!(dir.path().join("data/neg_0005.wav").exists());
}

#[test]
fn featurize_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.csv"), "file_name,label\n").unwrap();
    let cfg_path = dir.path().join("cfg.json");
    write_config(&small_config(dir.path()), &cfg_path);
    let out = dir.path().join("feats");
    let o = relia(&[
        "featurize",
        "--config",
        cfg_path.to_str().unwrap(),
        "--manifest",
        dir.path().join("m.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    assert_eq!(fs::read_to_string(out.join("index.csv")).unwrap(), "file_name,label,feature_file\n");
}

#[test]
fn featurize_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.synth_pos = 2;
    cfg.synth_neg = 3;
    cfg.manifest = Some(synth(&cfg, dir.path()));
    let first = commands::featurize_cmd(&cfg).unwrap();
    assert_eq!(first.written, 5);
    assert!(first.failures.is_empty());
    let out = cfg.out_dir.clone().unwrap();
    let snapshot = |p: &Path| {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        files
    };
    let before = snapshot(&out);
    assert_eq!(before.len(), 6);
    commands::featurize_cmd(&cfg).unwrap();
    assert_eq!(snapshot(&out), before);
    let spec = MelSpectrogram::from_bytes(&fs::read(out.join(feature_file_name("pos_0000.wav"))).unwrap()).unwrap();
    assert_eq!(spec.shape(), (32, 16));
}

#[test]
fn featurize_reports_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.synth_pos = 2;
    cfg.synth_neg = 3;
    let manifest = synth(&cfg, dir.path());
    fs::write(dir.path().join("data/neg_0001.wav"), b"RIFFjunk").unwrap();
    let cfg_path = dir.path().join("cfg.json");
    write_config(&cfg, &cfg_path);
    let out = dir.path().join("feats");
    let o = relia(&[
        "featurize",
        "--config",
        cfg_path.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("neg_0001.wav"), "{stderr}");
    let mel_files = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "mel").count();
    assert_eq!(mel_files, 4);
    assert_eq!(fs::read_to_string(out.join("index.csv")).unwrap().lines().count(), 5);
}

#[test]
fn train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.manifest = Some(synth(&cfg, dir.path()));
    let report = commands::train_ensemble_cmd(&cfg).unwrap();
    assert_eq!(report.fold_aucs.len(), 2);
    assert!(report.fold_mean.is_some() && report.fold_std.is_some());
    let out = cfg.out_dir.clone().unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let mut keys: Vec<&String> = json.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["auc", "fold_aucs", "fold_mean", "fold_std", "selective", "threshold_used"]);
    let mut sel: Vec<&String> = json["selective"].as_object().unwrap().keys().collect();
    sel.sort();
    assert_eq!(sel, ["acc_high", "acc_low", "n_high", "n_low"]);
    for f in ["fold0/history_member1.csv", "fold1/ensemble/member0.nnwt", "predictions.csv", "folds.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(out.join("fold0/history_member0.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,train_auc,val_auc");
    assert_eq!(history.lines().count(), 3);

    let ens = out.join("fold0/ensemble");
    let pcfg = RunConfig {
        out_dir: Some(dir.path().join("pred")),
        ..cfg.clone()
    };
    assert_eq!(commands::predict_cmd(&pcfg, &ens).unwrap(), 10);
    let first = fs::read(dir.path().join("pred/predictions.csv")).unwrap();
    commands::predict_cmd(&pcfg, &ens).unwrap();
    assert_eq!(fs::read(dir.path().join("pred/predictions.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().next().unwrap(), "file_name,prob_positive,uncertainty,decision");
    assert!(text.lines().skip(1).all(|l| l.ends_with(",accept") || l.ends_with(",refer")));

    let ecfg = RunConfig {
        out_dir: Some(dir.path().join("eval")),
        ..cfg
    };
    let eval = commands::evaluate_cmd(&ecfg, &ens).unwrap();
    assert_eq!(eval.selective.n_low + eval.selective.n_high, 10);
    assert!(eval.fold_aucs.is_empty());
    assert_eq!(eval.threshold_used, report.threshold_used);
}

#[test]
fn single_member_has_no_uncertainty() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.members = 1;
    cfg.manifest = Some(synth(&cfg, dir.path()));
    commands::train_ensemble_cmd(&cfg).unwrap();
    let pcfg = RunConfig {
        out_dir: Some(dir.path().join("pred")),
        ..cfg.clone()
    };
    commands::predict_cmd(&pcfg, &cfg.out_dir.clone().unwrap().join("fold1/ensemble")).unwrap();
    let text = fs::read_to_string(dir.path().join("pred/predictions.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    for row in rows.records() {
        assert_eq!(&row.unwrap()[2], "0.0");
    }
}

#[test]
fn predict_rejects_mixed_members() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.manifest = Some(synth(&cfg, dir.path()));
    commands::train_ensemble_cmd(&cfg).unwrap();
    let out = cfg.out_dir.clone().unwrap();

    let mut other = small_config(&dir.path().join("other"));
    other.stem_channels = 3;
    other.manifest = cfg.manifest.clone();
    commands::train_ensemble_cmd(&other).unwrap();
    fs::copy(
        dir.path().join("other/out/fold0/ensemble/member1.nnwt"),
        out.join("fold0/ensemble/member1.nnwt"),
    )
    .unwrap();
    let pcfg = RunConfig {
        out_dir: Some(dir.path().join("pred")),
        ..cfg
    };
    let err = commands::predict_cmd(&pcfg, &out.join("fold0/ensemble")).unwrap_err();
    assert!(format!("{err:#}").contains("fingerprint"), "{err:#}");
}

#[test]
fn grid_has_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.epochs = 1;
    cfg.members = 1;
    cfg.manifest = Some(synth(&cfg, dir.path()));
    let rows = commands::grid_cmd(&cfg).unwrap();
    assert_eq!(rows.len(), 6);
    let text = fs::read_to_string(dir.path().join("out/grid.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "loss,balance,auc,fold_mean,fold_std,n_low,acc_low,n_high,acc_high,threshold");
    assert!(lines[1].starts_with("ce,none,"));
    assert!(lines[6].starts_with("focal,gauss,"));
    assert!(dir.path().join("out/focal_dup/report.json").exists());
}

#[test]
fn flags_override_config_file() {
    let mut cfg = RunConfig::default();
    let o = Overrides {
        seed: Some(9),
        members: Some(3),
        folds: Some(4),
        loss: Some(LossChoice::Ce),
        balance: Some(BalanceChoice::Dup),
        snr_db: Some(-5.0),
        quantile: Some(0.25),
        ..Overrides::default()
    };
    cfg.apply(&o, false);
    assert_eq!((cfg.seed, cfg.members, cfg.folds, cfg.quantile), (9, 3, 4, 0.25));
    assert_eq!((cfg.loss, cfg.balance), (LossChoice::Ce, BalanceChoice::Dup));
    assert_eq!(cfg.augment_snr_db, -5.0);
    let mut synth = RunConfig::default();
    synth.apply(&o, true);
    assert_eq!(synth.synth_snr_db, -5.0);
    assert_eq!(synth.augment_snr_db, RunConfig::default().augment_snr_db);
}

#[test]
fn config_file_round_trip_and_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let path = dir.path().join("c.json");
    write_config(&cfg, &path);
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    fs::write(&path, r#"{"epochs": 3, "loss": "ce"}"#).unwrap();
    let partial = RunConfig::load(&path).unwrap();
    assert_eq!((partial.epochs, partial.loss), (3, LossChoice::Ce));
    assert_eq!(partial.members, 5);
    fs::write(&path, r#"{"epoch": 3}"#).unwrap();
    assert!(RunConfig::load(&path).is_err());
}

#[test]
fn binary_runs_with_capped_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    write_config(&small_config(dir.path()), &cfg_path);
    let out = dir.path().join("syn");
    let o = Command::new(env!("CARGO_BIN_EXE_relia"))
        .env("RELIA_WORKERS", "1")
        .args(["synthetic", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--snr-db", "-4", "--n-pos", "2", "--n-neg", "2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("manifest.csv")).unwrap().lines().count(), 5);
}

#[test]
fn missing_manifest_is_an_error() {
    let o = relia(&["train-ensemble", "--out", "/tmp/nowhere-relia"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}
