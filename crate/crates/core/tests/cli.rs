use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uota::harness::{parse_config, Config, RunManifest, RunStatus, MANIFEST_FILE, OUTPUT_DIR_ENV};

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn uota(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uota"))
        .args(args)
        .env_remove(OUTPUT_DIR_ENV)
        .output()
        .expect("spawn uota")
}

fn quick() -> String {
    repo_file("configs/quick.toml").display().to_string()
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let text = fs::read_to_string(repo_file("configs/default.toml")).unwrap();
    assert_eq!(parse_config(&text).unwrap(), Config::with_seed(1));
    parse_config(&fs::read_to_string(repo_file("configs/quick.toml")).unwrap()).unwrap();
}

#[test]
fn train_twice_gives_identical_history() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = uota(&["train", "--config", &quick(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        bytes.push(fs::read(out.join("history.csv")).unwrap());
        assert_eq!(csv_rows(&out.join("history.csv")), 6);
        assert!(out.join("encoder.json").exists());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn manifest_lists_existing_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    assert!(uota(&["gen-data", "--config", &quick(), "--out", out.to_str().unwrap()]).status.success());
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.command, "gen-data");
    assert_eq!(m.seed, 7);
    assert!(m.started_at <= m.finished_at);
    assert!(m.outputs.len() >= 4);
    for f in &m.outputs {
        assert!(out.join(f).exists(), "{}", f.display());
    }
    // The snapshot alone reproduces the run.
    let again = tmp.path().join("again");
    let snapshot = out.join("config.toml");
    assert!(uota(&["gen-data", "--config", snapshot.to_str().unwrap(), "--out", again.to_str().unwrap()]).status.success());
    for f in ["views.csv", "originals.csv", "dataset.json"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_reads_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(uota(&["gen-data", "--config", &quick(), "--out", data.to_str().unwrap()]).status.success());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(uota(&["train", "--config", &quick(), "--out", a.to_str().unwrap()]).status.success());
    let o = uota(&["train", "--config", &quick(), "--data", data.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
}

#[test]
fn sweep_row_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = uota(&["sweep", "--config", &quick(), "--axis", "views", "--grid", "2,4,8", "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&out.join("probe.csv")), 2 * 3 * 2);
    assert_eq!(csv_rows(&out.join("auroc.csv")), 2 * 3 * 2);
    let head = fs::read_to_string(out.join("probe.csv")).unwrap();
    assert!(head.starts_with("axis_value,seed,method,train_acc,test_acc\n"));
}

#[test]
fn mse_lab_summary_has_win_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("mse");
    assert!(uota(&["mse-lab", "--config", &quick(), "--out", out.to_str().unwrap()]).status.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let wf = summary["win_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&wf));
    assert_eq!(csv_rows(&out.join("comparison.csv")), 20);
}

#[test]
fn probe_and_ood_eval_accept_a_saved_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    assert!(uota(&["train", "--config", &quick(), "--out", train.to_str().unwrap()]).status.success());
    let enc = train.join("encoder.json");
    let probe = tmp.path().join("probe");
    let o = uota(&["probe", "--config", &quick(), "--encoder", enc.to_str().unwrap(), "--out", probe.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&probe.join("probe.csv")), 1);
    let ood = tmp.path().join("ood");
    let o = uota(&["ood-eval", "--config", &quick(), "--encoder", enc.to_str().unwrap(), "--out", ood.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&ood.join("groups.csv")), 6);
    // The table scored by ood-eval is the one train wrote.
    assert_eq!(fs::read(train.join("weights.csv")).unwrap(), fs::read(ood.join("weights.csv")).unwrap());
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_uota"))
        .args(["gen-data", "--config", &quick(), "--seed", "9"])
        .env(OUTPUT_DIR_ENV, tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("gen-data-seed9").join("views.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(uota(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(uota(&["train"]).status.code(), Some(1));
    assert_eq!(uota(&["train", "--config", "/no/such/file.toml"]).status.code(), Some(1));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[train.weights]\ntau = -1.0\n").unwrap();
    let o = uota(&["train", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));
    fs::write(&bad, "seed = 1\nunknown = 3\n").unwrap();
    assert_eq!(uota(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&bad, "seed = 1\n[train]\nlearning_rate = 1e300\nepochs = 2\n").unwrap();
    let out = tmp.path().join("blowup");
    let o = uota(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.status, RunStatus::Failed);
    assert!(m.error.is_some());
}
