//! End-to-end tests of the command-line interface: exit codes, artifact
//! bytes, and output contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_phgcn")
}

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(bin());
    for a in args {
        cmd.arg(a.as_ref());
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"{
  "seed": 5,
  "synth": {"n_identities": 3, "images_per_identity": 4, "rows": 12, "cols": 4, "dim": 8, "noise_sigma": 0.1, "corrupt_prob": 0.0},
  "model": {"hidden_dim": 16},
  "train": {"epochs": 3, "lr_head": 0.5}
}"#;

fn gen_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let config = write_config(dir, "config.json", SMALL_CONFIG);
    let data = dir.join("data.phgf");
    let out = run(&[&"gen", &"--config", &config, &"--out", &data]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (config, data)
}

#[test]
fn gen_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = gen_dataset(dir.path());
    let data2 = dir.path().join("data2.phgf");
    let out = run(&[&"gen", &"--config", &config, &"--out", &data2]);
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(&data).unwrap(),
        std::fs::read(&data2).unwrap()
    );
    // The written file passes reader validation.
    phgcn::phgf::read_phgf(&data).unwrap();
    // Meta sidecar carries the config digest.
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_rejects_bad_config_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "bad.json",
        r#"{"seed": 1, "synth": {"corrupt_prob": 1.5}}"#,
    );
    let out = run(&[&"gen", &"--config", &config, &"--out", &dir.path().join("x.phgf")]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("corrupt_prob"), "{stderr}");
}

#[test]
fn unknown_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "bad.json", r#"{"sede": 1}"#);
    let out = run(&[&"gen", &"--config", &config, &"--out", &dir.path().join("x.phgf")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_with_zero_epochs_writes_the_initial_params() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "config.json",
        r#"{
          "seed": 5,
          "synth": {"n_identities": 3, "images_per_identity": 4, "rows": 12, "cols": 4, "dim": 8, "noise_sigma": 0.1, "corrupt_prob": 0.0},
          "model": {"hidden_dim": 16},
          "train": {"epochs": 0}
        }"#,
    );
    let data = dir.path().join("data.phgf");
    assert!(run(&[&"gen", &"--config", &config, &"--out", &data]).status.success());
    let ckpt = dir.path().join("model.phgm");
    let out = run(&[&"train", &"--config", &config, &"--data", &data, &"--out", &ckpt]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (params, _) = phgcn::checkpoint::load_checkpoint(&ckpt).unwrap();
    let run_config: phgcn::config::RunConfig =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    let init = phgcn::model::init_params::<f32>(
        8,
        3,
        10,
        &run_config.model,
        phgcn::rng::derive_seed(run_config.train_config().seed, 0),
    )
    .unwrap();
    assert_eq!(params, init);

    let history: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(ckpt.with_extension("history.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(history["loss"].as_array().unwrap().len(), 0);
    assert!(history["config_digest"].is_string());
}

#[test]
fn train_on_nan_features_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = gen_dataset(dir.path());
    let mut bytes = std::fs::read(&data).unwrap();
    // First float of the first image sits after the 24-byte header and the
    // 4-byte label.
    bytes[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&data, &bytes).unwrap();
    let out = run(&[&"train", &"--config", &config, &"--data", &data, &"--out", &dir.path().join("m.phgm")]);
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("non-finite") && stderr.contains("offset"), "{stderr}");
}

#[test]
fn missing_data_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = gen_dataset(dir.path());
    let out = run(&[&"train", &"--config", &config, &"--data", &dir.path().join("nope.phgf"), &"--out", &dir.path().join("m.phgm")]);
    assert_eq!(out.status.code(), Some(3));
}

fn train_checkpoint(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let (config, data) = gen_dataset(dir);
    let ckpt = dir.join("model.phgm");
    let out = run(&[&"train", &"--config", &config, &"--data", &data, &"--out", &ckpt]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (config, data, ckpt)
}

#[test]
fn eval_stdout_matches_file_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = train_checkpoint(dir.path());
    let report_path = dir.path().join("report.json");
    let out = run(&[&"eval", &"--checkpoint", &ckpt, &"--data", &data, &"--variant", &"phgcn", &"--out", &report_path]);
    assert!(out.status.success());
    let file_bytes = std::fs::read(&report_path).unwrap();
    assert_eq!(out.stdout, file_bytes, "stdout and file must be byte-identical");

    let report: serde_json::Value = serde_json::from_slice(&file_bytes).unwrap();
    for key in [
        "variant",
        "map",
        "cmc",
        "num_queries",
        "num_gallery",
        "excluded_queries",
        "seed",
        "config_digest",
    ] {
        assert!(report.get(key).is_some(), "missing report key {key}");
    }
    for rank in ["1", "5", "10"] {
        assert!(report["cmc"].get(rank).is_some(), "missing cmc rank {rank}");
    }
}

#[test]
fn eval_rejects_unknown_variant_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = train_checkpoint(dir.path());
    let out = run(&[&"eval", &"--checkpoint", &ckpt, &"--data", &data, &"--variant", &"bogus", &"--out", &dir.path().join("r.json")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_accepts_all_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = train_checkpoint(dir.path());
    for variant in ["phgcn", "pgcn", "nogcn"] {
        let report_path = dir.path().join(format!("{variant}.json"));
        let out = run(&[&"eval", &"--checkpoint", &ckpt, &"--data", &data, &"--variant", &variant, &"--out", &report_path]);
        assert!(out.status.success(), "variant {variant}");
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
        assert_eq!(report["variant"].as_str().unwrap(), variant);
    }
}

#[test]
fn sweep_rows_validation_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = gen_dataset(dir.path());
    let csv_path = dir.path().join("sweep.csv");
    let out = run(&[&"sweep", &"--config", &config, &"--param", &"eps", &"--grid", &"0.25,0.5,0.75", &"--data", &data, &"--out", &csv_path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config_digest="));
    assert_eq!(lines[1], "param_value,map,cmc1,cmc5,cmc10,seed");
    assert_eq!(lines.len(), 2 + 3, "one row per grid point");
    assert_eq!(out.stdout, csv.as_bytes());

    // Reproducible.
    let csv2_path = dir.path().join("sweep2.csv");
    let out2 = run(&[&"sweep", &"--config", &config, &"--param", &"eps", &"--grid", &"0.25,0.5,0.75", &"--data", &data, &"--out", &csv2_path]);
    assert!(out2.status.success());
    assert_eq!(csv, std::fs::read_to_string(&csv2_path).unwrap());

    // eps outside the open interval is rejected.
    let out = run(&[&"sweep", &"--config", &config, &"--param", &"eps", &"--grid", &"0.0,0.5", &"--data", &data]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[&"sweep", &"--config", &config, &"--param", &"eps", &"--grid", &"0.5,1.0", &"--data", &data]);
    assert_eq!(out.status.code(), Some(2));
    // negative beta rejected too
    let out = run(&[&"sweep", &"--config", &config, &"--param", &"beta", &"--grid", &"-0.1", &"--data", &data]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn graph_dump_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (config, data) = gen_dataset(dir.path());
    let out = run(&[&"graph-dump", &"--config", &config, &"--data", &data, &"--image", &"0"]);
    assert!(out.status.success());
    let dump: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(dump["nodes"].as_array().unwrap().len(), 10);
    assert_eq!(dump["edges"].as_array().unwrap().len(), 27);
    let rows = dump["row_normalized"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    for row in rows {
        let sum: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-9, "row sums to {sum}");
    }
    // Every edge weight lies in (0, 1].
    for edge in dump["edges"].as_array().unwrap() {
        let w = edge["weight"].as_f64().unwrap();
        assert!(w > 0.0 && w <= 1.0, "weight {w}");
    }

    // Out-of-range image index.
    let out = run(&[&"graph-dump", &"--config", &config, &"--data", &data, &"--image", &"999"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_rejects_bad_step_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = gen_dataset(dir.path());
    let out = run(&[&"gradcheck", &"--config", &config, &"--step", &"-1.0"]);
    assert_eq!(out.status.code(), Some(2));
}
