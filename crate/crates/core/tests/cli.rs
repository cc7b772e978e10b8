use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use partreid::model::Model;
use sha2::{Digest, Sha256};

fn partreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partreid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn oracle_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle")
}

/// Digest over relative paths and contents of every file under `dir`.
fn tree_digest(dir: &Path) -> String {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

fn small_data(dir: &Path, split: &str, seed: &str) -> Output {
    partreid(&[
        "gen-data",
        "--actions",
        "2",
        "--ids-per-action",
        "3",
        "--views",
        "3",
        "--height",
        "16",
        "--width",
        "8",
        "--seed",
        seed,
        "--split",
        split,
        "--out",
        dir.to_str().unwrap(),
    ])
}

const SMALL_MODEL: [&str; 20] = [
    "--set",
    "image_height=16",
    "--set",
    "image_width=8",
    "--set",
    "app_channels=4,4",
    "--set",
    "app_strides=2,2",
    "--set",
    "backbone_channels=4,4",
    "--set",
    "backbone_strides=2,2",
    "--set",
    "paf_channels=3",
    "--set",
    "conf_channels=3",
    "--set",
    "batch_p=2",
    "--set",
    "batch_k=2",
];

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--manifest",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(&SMALL_MODEL);
    args.extend_from_slice(extra);
    partreid(&args)
}

#[test]
fn gen_data_minimal_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = small_data(&out, "eval", "3");
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert!(manifest.contains("# counts samples=18 query=6 gallery=12 train=0"));
    assert_eq!(fs::read_dir(out.join("tensors")).unwrap().count(), 18);
}

#[test]
fn gen_data_same_arguments_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(small_data(&a, "eval", "9").status.success());
    assert!(small_data(&b, "eval", "9").status.success());
    assert_eq!(tree_digest(&a), tree_digest(&b));
    let c = dir.path().join("c");
    assert!(small_data(&c, "eval", "10").status.success());
    assert_ne!(tree_digest(&a), tree_digest(&c));
}

#[test]
fn gen_data_unwritable_output_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("inside");
    let o = small_data(&target, "eval", "1");
    assert!(!o.status.success());
    assert!(stderr(&o).contains(blocker.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn gen_data_rejects_single_view() {
    let dir = tempfile::tempdir().unwrap();
    let o = partreid(&[
        "gen-data",
        "--views",
        "1",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_one_step_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(small_data(&data, "train", "1").status.success());
    let run = dir.path().join("run");
    let o = train_small(&data.join("manifest.tsv"), &run, &["--set", "steps=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("step,total,triplet,identity\n"));
    assert!(run.join("weights/config.resolved").is_file());
    assert_eq!(fs::read_to_string(run.join("config.sha256")).unwrap().trim().len(), 64);
}

#[test]
fn train_zero_learning_rate_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(small_data(&data, "train", "1").status.success());
    let run = dir.path().join("run");
    let o = train_small(
        &data.join("manifest.tsv"),
        &run,
        &["--set", "steps=3", "--set", "learning_rate=0"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trained = Model::load(&run.join("weights")).unwrap();
    let fresh = Model::init(&trained.config, 0).unwrap();
    assert_eq!(trained.params, fresh.params);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train_data, eval_data) = (dir.path().join("t"), dir.path().join("e"));
    assert!(small_data(&train_data, "train", "1").status.success());
    assert!(small_data(&eval_data, "eval", "2").status.success());
    let run = dir.path().join("run");
    let o = train_small(
        &train_data.join("manifest.tsv"),
        &run,
        &[
            "--set",
            "steps=2",
            "--eval-manifest",
            eval_data.join("manifest.tsv").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mAP="));
    assert!(run.join("eval_report.json").is_file());

    for pooling in ["exact", "compact"] {
        let out = dir.path().join(format!("eval-{pooling}"));
        let o = partreid(&[
            "eval",
            "--manifest",
            eval_data.join("manifest.tsv").to_str().unwrap(),
            "--weights",
            run.join("weights").to_str().unwrap(),
            "--pooling",
            pooling,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{pooling}: {}", stderr(&o));
        let line = stdout(&o);
        assert!(line.starts_with("mAP=") && line.contains(" rank1="), "{line}");
        let report: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join("eval_report.json")).unwrap()).unwrap();
        assert_eq!(report["num_queries"], 6);
    }
}

#[test]
fn train_unknown_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = partreid(&[
        "train",
        "--manifest",
        "x",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "stepz=1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stepz"));
}

#[test]
fn eval_oracle_descriptors_are_perfect() {
    let dir = oracle_dir();
    let o = partreid(&[
        "eval",
        "--manifest",
        dir.join("manifest.tsv").to_str().unwrap(),
        "--descriptors",
        dir.join("descriptors.tsr").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "mAP=1 rank1=1");
}

#[test]
fn eval_missing_weights_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = partreid(&[
        "eval",
        "--manifest",
        oracle_dir().join("manifest.tsv").to_str().unwrap(),
        "--weights",
        dir.path().join("nope").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn eval_requires_a_descriptor_source() {
    let o = partreid(&["eval", "--manifest", "m.tsv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_sketch_default_passes() {
    let o = partreid(&["check-sketch", "--trials", "40"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text.lines().last(), Some("PASS"));
}

#[test]
fn check_sketch_collision_free_is_exact() {
    let o = partreid(&["check-sketch", "--collision-free", "--trials", "10"]);
    assert!(o.status.success());
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let err: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-9, "{row}");
}

#[test]
fn check_sketch_fails_on_tiny_dimensions() {
    let o = partreid(&["check-sketch", "--dim-list", "2,4", "--trials", "20"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).lines().last(), Some("FAIL"));
}

#[test]
fn check_sketch_zero_trials_rejected() {
    let o = partreid(&["check-sketch", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trials"));
}

#[test]
fn help_exits_zero() {
    assert!(partreid(&["--help"]).status.success());
    assert_eq!(partreid(&["frobnicate"]).status.code(), Some(1));
}
