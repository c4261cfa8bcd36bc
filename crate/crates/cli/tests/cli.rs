mod common;

use std::fs;
use std::path::Path;

use common::*;
use voxseg::data::{raw_paths, DatasetSplit};
use voxseg::metrics::{binarize, confusion, metrics_from_confusion};
use voxseg::{AdaptiveWeights, LossReport, SoftmaxField, TverskyParams};
use voxseg_cli::checkpoint::{Checkpoint, VERSION};
use voxseg_cli::dataset::{mean_metrics, pooled_metrics, VolumeEval};
use voxseg_cli::gradcheck::{self, GradcheckConfig};
use voxseg_cli::train::{CSV_HEADER, SUMMARY_FILE};

#[test]
fn synth_command_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.toml");
    fs::write(&cfg, "out = \"a\"\n[synth]\nextent = [16, 16, 16]\ncount = 10\nseed = 3\n").unwrap();
    let out = voxseg(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let b = tmp.path().join("b");
    let out = voxseg(&["synth", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&out), 0);

    let split = DatasetSplit::read(&tmp.path().join("a")).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (7, 1, 2));
    assert_eq!(DatasetSplit::read(&b).unwrap(), split);
    for id in split.train.iter().chain(&split.val).chain(&split.test) {
        for (x, y) in raw_paths(&tmp.path().join("a"), id).iter().zip(raw_paths(&b, id)) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }
}

#[test]
fn invalid_synth_config_exits_with_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.toml");
    fs::write(&cfg, "out = \"a\"\n[synth]\nfg_fraction = [0.01, 0.4]\n").unwrap();
    let out = voxseg(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("fraction"), "{}", stderr(&out));
    fs::write(&cfg, "out = \"a\"\n[synth]\ncolour = 1\n").unwrap();
    assert_eq!(code(&voxseg(&["synth", "--config", cfg.to_str().unwrap()])), 2);
}

fn train(cfg: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = voxseg(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn training_logs_follow_the_weight_law() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&data, 8, 16, 2);
    let out = tmp.path().join("run");
    let cfg = TrainSpec::tiny(&data, &out).write("train.toml");
    train(&cfg, &[]);

    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let csv = Csv::read(&out.join("metrics.csv"));
    assert_eq!(csv.rows.len(), 3);
    assert_eq!(csv.col("epoch"), vec![0.0, 1.0, 2.0]);
    assert!(weight_law_error(&csv) < 1e-6);
    for name in ["val_dsc", "val_f2", "val_sens", "val_spec", "val_prec"] {
        assert!(csv.col(name).iter().all(|v| (0.0..=1.0).contains(v)));
    }
    for f in ["last.ckpt", "best.ckpt", SUMMARY_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["epochs_completed"], 3);
    assert!(summary["test_final"]["mean"]["dsc"].is_number());
    assert!(summary["test_best"]["mean"]["dsc"].is_number());
}

#[test]
fn tversky_mode_keeps_unit_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&data, 6, 16, 4);
    let out = tmp.path().join("run");
    let spec = TrainSpec {
        mode: "tversky",
        epochs: 2,
        ..TrainSpec::tiny(&data, &out)
    };
    train(&spec.write("t.toml"), &[]);
    let csv = Csv::read(&out.join("metrics.csv"));
    assert_eq!(csv.col("w_tversky"), vec![1.0, 1.0]);
    assert_eq!(csv.col("w_bce"), vec![0.0, 0.0]);
    let total = csv.col("train_l_total");
    for (t, l) in total.iter().zip(csv.col("train_l_tversky")) {
        assert!((t - l).abs() < 1e-12);
    }
}

#[test]
fn fixed_seed_reproduces_logs_and_resume_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&data, 8, 16, 5);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let spec = TrainSpec {
        epochs: 4,
        every: 2,
        ..TrainSpec::tiny(&data, &a)
    };
    let cfg = spec.write("train.toml");
    train(&cfg, &[]);
    train(&cfg, &["--out", b.to_str().unwrap()]);
    let log_a = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(log_a, fs::read(b.join("metrics.csv")).unwrap());
    let (ck_a, ck_b) = (Checkpoint::load(&a.join("last.ckpt")).unwrap(), Checkpoint::load(&b.join("last.ckpt")).unwrap());
    assert_eq!(ck_a.params, ck_b.params);
    assert_eq!(ck_a.adam, ck_b.adam);

    // Resume after epoch 1 of 4 from the periodic checkpoint.
    let mid = a.join("epoch_0001.ckpt");
    assert_eq!(Checkpoint::load(&mid).unwrap().header.epoch, 1);
    train(&cfg, &["--out", c.to_str().unwrap(), "--resume", mid.to_str().unwrap()]);
    assert_eq!(log_a, fs::read(c.join("metrics.csv")).unwrap());
    let ck_c = Checkpoint::load(&c.join("last.ckpt")).unwrap();
    assert_eq!(ck_c.params, ck_a.params);
    assert_eq!(ck_c.adam, ck_a.adam);
    assert_eq!(ck_c.header.rng, ck_a.header.rng);

    // A different seed changes the trajectory.
    let d = tmp.path().join("d");
    train(&cfg, &["--out", d.to_str().unwrap(), "--seed", "9"]);
    assert_ne!(log_a, fs::read(d.join("metrics.csv")).unwrap());
}

#[test]
fn resume_rejects_a_different_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&data, 6, 16, 6);
    let a = tmp.path().join("a");
    let spec = TrainSpec {
        epochs: 1,
        ..TrainSpec::tiny(&data, &a)
    };
    train(&spec.write("a.toml"), &[]);
    let b = tmp.path().join("b");
    let other = TrainSpec {
        base: 4,
        ..TrainSpec::tiny(&data, &b)
    }
    .write("b.toml");
    let out = voxseg(&["train", "--config", other.to_str().unwrap(), "--resume", a.join("last.ckpt").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("differ"), "{}", stderr(&out));
}

#[test]
fn checkpoint_format_round_trips_and_detects_damage() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&data, 6, 16, 7);
    let out = tmp.path().join("run");
    let spec = TrainSpec {
        epochs: 1,
        ..TrainSpec::tiny(&data, &out)
    };
    train(&spec.write("t.toml"), &[]);
    let path = out.join("last.ckpt");
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let copy = tmp.path().join("copy.ckpt");
    ck.save(&copy).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), bytes);

    let mut tail = bytes.clone();
    let n = tail.len();
    tail[n - 20] ^= 0x40;
    let err = Checkpoint::decode(&tail, &path).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert!(Checkpoint::decode(&bytes[..n - 100], &path).is_err());

    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = Checkpoint::decode(&version, &path).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let mut magic = bytes;
    magic[0] = b'X';
    assert!(Checkpoint::decode(&magic, &path).unwrap_err().to_string().contains("magic"));

    fs::write(&copy, &tail).unwrap();
    let res = voxseg(&["info", "--ckpt", copy.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    let res = voxseg(&["info", "--ckpt", path.to_str().unwrap()]);
    assert_eq!(code(&res), 0);
    assert!(String::from_utf8_lossy(&res.stdout).contains("epoch           0"));
}

#[test]
fn eval_csv_agrees_with_training_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&data, 10, 16, 8);
    let out = tmp.path().join("run");
    let spec = TrainSpec {
        epochs: 2,
        ..TrainSpec::tiny(&data, &out)
    };
    train(&spec.write("t.toml"), &[]);
    let ckpt = out.join("last.ckpt");
    let res = voxseg(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--split", "test"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let table = String::from_utf8_lossy(&res.stdout);
    assert!(table.contains("Sens.") && table.contains("pooled"));

    let text = fs::read_to_string(out.join("eval_test.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,dsc,f2,sens,spec,prec"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let per_volume: Vec<f64> = rows.iter().filter(|r| r[0].starts_with("synth_")).map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(per_volume.len(), 2);
    let mean_row = rows.iter().find(|r| r[0] == "mean").unwrap();
    let mean: f64 = mean_row[1].parse().unwrap();
    assert!((mean - per_volume.iter().sum::<f64>() / 2.0).abs() < 1e-12);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    let final_dsc = summary["test_final"]["mean"]["dsc"].as_f64().unwrap();
    assert!((final_dsc - mean).abs() < 1e-12);

    let bad = voxseg(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--split", "holdout"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn training_rejects_bad_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_dataset(&data, 6, 16, 9);
    let out = tmp.path().join("run");
    let indivisible = TrainSpec {
        depth: 3,
        patch: 12,
        ..TrainSpec::tiny(&data, &out)
    }
    .write("a.toml");
    let res = voxseg(&["train", "--config", indivisible.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("16"), "{}", stderr(&res));

    let missing = TrainSpec::tiny(&tmp.path().join("nowhere"), &out).write("b.toml");
    assert_eq!(code(&voxseg(&["train", "--config", missing.to_str().unwrap()])), 2);
    assert!(!out.exists());
}

#[test]
fn gradcheck_passes_and_catches_a_sign_flip() {
    let res = voxseg(&["gradcheck"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stdout));

    fn flipped(
        p: &voxseg::SoftmaxField<f64>,
        g: &voxseg::BinaryField,
        params: &TverskyParams,
    ) -> Result<voxseg::Tensor64, voxseg::TensorError> {
        Ok(voxseg::losses::tversky_grad(p, g, params)?.scale(-1.0))
    }
    let report = gradcheck::run_with(&GradcheckConfig::default(), flipped).unwrap();
    assert!(!report.passed());
    assert_eq!(report.exit_code(), 1);
}

#[test]
fn labels_fed_as_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    synth_dataset(tmp.path(), 5, 16, 10);
    let split = DatasetSplit::read(tmp.path()).unwrap();
    let evals: Vec<VolumeEval> = split
        .train
        .iter()
        .map(|id| {
            let s = voxseg::data::read_raw_volume(tmp.path(), id).unwrap();
            let fg: Vec<f32> = s.label.iter().map(|&v| v as f32).collect();
            let field = SoftmaxField::from_foreground([1, 16, 16, 16], &fg).unwrap();
            let counts = confusion(binarize(&field).data(), &s.label).unwrap();
            VolumeEval {
                id: s.id,
                counts,
                metrics: metrics_from_confusion(&counts),
                loss: LossReport::from_components(0.0, 0.0, AdaptiveWeights::initial()),
            }
        })
        .collect();
    for m in [mean_metrics(&evals), pooled_metrics(&evals)] {
        assert_eq!([m.dsc, m.f2, m.sensitivity, m.specificity, m.precision], [1.0; 5]);
    }
}

#[test]
fn shipped_configs_parse() {
    use voxseg_cli::config::{ExperimentConfig, SynthFile};
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut experiments = 0;
    for dir in [root.clone(), root.join("desk")] {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                continue;
            }
            let name = path.file_name().unwrap().to_str().unwrap().to_string();
            let text = fs::read_to_string(&path).unwrap();
            match name.as_str() {
                "synth.toml" => {
                    let f = SynthFile::load(&path).unwrap();
                    f.synth.validate().unwrap();
                }
                "gradcheck.toml" => {
                    GradcheckConfig::load(&path).unwrap();
                }
                n if n.ends_with(".toml") => {
                    let cfg = ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
                    cfg.model.check_input(cfg.data.patch).unwrap_or_else(|e| panic!("{name}: {e}"));
                    experiments += 1;
                }
                _ => {}
            }
        }
    }
    assert_eq!(experiments, 8);
}
