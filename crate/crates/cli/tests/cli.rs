use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use knnseq::data::synth;
use knnseq::io::{self, TargetsFile};

fn knnseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knnseq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = knnseq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    train: PathBuf,
    test: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = synth::two_gaussians([60, 30], 3, 2.5, 11);
        let (train, test) = data.split(0.3, 1).unwrap();
        let train_path = dir.path().join("train.csv");
        let test_path = dir.path().join("test.csv");
        io::write_csv(&train_path, &train, None).unwrap();
        io::write_csv(&test_path, &test, None).unwrap();
        Fixture {
            dir,
            train: train_path,
            test: test_path,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

const SMALL: &[&str] = &["--epochs", "2", "--hidden", "8", "--memory-size", "8", "--embed-dim", "8", "--k", "3"];

#[test]
fn prepare_train_eval_pipeline_is_deterministic() {
    let f = Fixture::new();
    let targets = f.path("t.knnt");
    ok(&["prepare", "--train", s(&f.train), "--k", "3", "--out", s(&targets)]);
    let file = TargetsFile::load(&targets).unwrap();
    assert_eq!(file.targets.k(), 3);
    assert_eq!(file.targets.len(), 63);

    for model in ["v2vsls", "mnknn-vec", "v2vs"] {
        let ckpt = f.path(&format!("{model}.ckpt"));
        let mut args = vec!["train", "--train", s(&f.train), "--targets", s(&targets), "--model", model, "--out", s(&ckpt)];
        args.extend_from_slice(SMALL);
        ok(&args);
        let again = f.path(&format!("{model}-again.ckpt"));
        args[8] = s(&again);
        ok(&args);
        assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

        let m1 = f.path(&format!("{model}-1.txt"));
        let m2 = f.path(&format!("{model}-2.txt"));
        for m in [&m1, &m2] {
            let out = ok(&["eval", "--checkpoint", s(&ckpt), "--train", s(&f.train), "--test", s(&f.test), "--metrics", s(m)]);
            assert!(String::from_utf8_lossy(&out.stdout).starts_with("macro_f1: "));
        }
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    }
}

#[test]
fn ooc_prepare_writes_targets_and_is_reproducible() {
    let f = Fixture::new();
    let a = f.path("a.knnt");
    let b = f.path("b.knnt");
    for out in [&a, &b] {
        ok(&["prepare", "--train", s(&f.train), "--mode", "ooc", "--batch", "16", "--rounds", "5", "--seed", "4", "--out", s(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(TargetsFile::load(&a).unwrap().targets.k(), 5);
}

#[test]
fn train_ooc_mode_needs_no_targets() {
    let f = Fixture::new();
    let ckpt = f.path("m.ckpt");
    let mut args = vec!["train", "--train", s(&f.train), "--mode", "ooc", "--batch", "16", "--rounds", "2", "--out", s(&ckpt)];
    args.extend_from_slice(SMALL);
    ok(&args);
    assert!(io::load_checkpoint(&ckpt).is_ok());
}

#[test]
fn missing_targets_file_is_named() {
    let f = Fixture::new();
    let missing = f.path("nowhere.knnt");
    let out = knnseq(&["train", "--train", s(&f.train), "--targets", s(&missing), "--out", s(&f.path("m.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn rounds_in_full_mode_is_a_usage_error() {
    let f = Fixture::new();
    let out = knnseq(&["prepare", "--train", s(&f.train), "--mode", "full", "--rounds", "5", "--out", s(&f.path("t"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--rounds"));
}

#[test]
fn unknown_flag_is_rejected() {
    let f = Fixture::new();
    let out = knnseq(&["prepare", "--train", s(&f.train), "--bogus", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn effective_config_is_logged() {
    let f = Fixture::new();
    let out = ok(&["prepare", "--train", s(&f.train), "--out", s(&f.path("t.knnt"))]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("\"command\":\"prepare\"") && err.contains("\"k\":5"), "{err}");
}

#[test]
fn baseline_reports_metrics_in_both_modes() {
    let f = Fixture::new();
    let full = ok(&["baseline-knn", "--train", s(&f.train), "--test", s(&f.test)]);
    let ooc = ok(&["baseline-knn", "--train", s(&f.train), "--test", s(&f.test), "--mode", "ooc", "--batch", "8", "--rounds", "1"]);
    for out in [full, ooc] {
        assert!(String::from_utf8_lossy(&out.stdout).contains("confusion_1: "));
    }
}

#[test]
fn oversample_then_project() {
    let f = Fixture::new();
    let aug = f.path("aug.csv");
    ok(&["oversample", "--train", s(&f.train), "--method", "smote", "--out", s(&aug)]);
    let table = io::read_csv(&aug).unwrap();
    let origins = table.origins.clone().unwrap();
    assert!(origins.iter().any(|o| o.starts_with("smote:")));
    let counts = table.into_dataset().unwrap().class_counts();
    assert_eq!(counts[0], counts[1]);

    let xy = f.path("xy.csv");
    ok(&["project", "--data", s(&aug), "--out", s(&xy)]);
    let text = std::fs::read_to_string(&xy).unwrap();
    assert!(text.starts_with("pc1,pc2,label,origin\n"));
    assert_eq!(text.lines().count(), origins.len() + 1);
}

#[test]
fn model_oversampling_uses_checkpoint() {
    let f = Fixture::new();
    let targets = f.path("t.knnt");
    let ckpt = f.path("m.ckpt");
    ok(&["prepare", "--train", s(&f.train), "--k", "3", "--out", s(&targets)]);
    let mut args = vec!["train", "--train", s(&f.train), "--targets", s(&targets), "--out", s(&ckpt)];
    args.extend_from_slice(SMALL);
    ok(&args);
    let aug = f.path("aug.csv");
    ok(&["oversample", "--train", s(&f.train), "--method", "model", "--checkpoint", s(&ckpt), "--k", "3", "--out", s(&aug)]);
    let origins = io::read_csv(&aug).unwrap().origins.unwrap();
    assert!(origins.iter().all(|o| o == "original" || o.starts_with("model:")));
    let missing = knnseq(&["oversample", "--train", s(&f.train), "--method", "model", "--out", s(&aug)]);
    assert!(!missing.status.success());
}

#[test]
fn ablate_swap_exchanges_ranks() {
    let f = Fixture::new();
    let t = f.path("t.knnt");
    let swapped = f.path("s.knnt");
    ok(&["prepare", "--train", s(&f.train), "--out", s(&t)]);
    ok(&["ablate-swap", "--targets", s(&t), "--first", "1", "--second", "3", "--out", s(&swapped)]);
    let a = TargetsFile::load(&t).unwrap().targets;
    let b = TargetsFile::load(&swapped).unwrap().targets;
    for i in 0..a.len() {
        assert_eq!(a.distances_of(i)[0], b.distances_of(i)[2]);
        assert_eq!(a.distances_of(i)[2], b.distances_of(i)[0]);
        assert_eq!(a.labels_of(i)[1], b.labels_of(i)[1]);
    }
    let bad = knnseq(&["ablate-swap", "--targets", s(&t), "--second", "9", "--out", s(&swapped)]);
    assert!(!bad.status.success());
}
