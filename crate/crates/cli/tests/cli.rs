use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn models() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn met(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_met")).args(args).output().expect("binary runs")
}

fn met_env(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_met"))
        .args(args)
        .env("MET_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn bd() -> String {
    models().join("birth_death.cme").to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn solve_exact_writes_probabilities_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bd");
    let o = met(&["solve-exact", "--model", &bd(), "--t", "10", "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("probabilities_t10.csv")).unwrap();
    assert!(csv.starts_with("index,X,probability"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "solve-exact");
    assert!(manifest["config_sha256"].as_str().unwrap().len() == 64);
    assert!(manifest["outputs"]["probabilities_t10.csv"].is_string());
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(!out.join(".lock").exists());
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |o: &Path| vec!["simulate".to_string(), "--model".into(), bd(), "--n".into(), "10000".into(), "--seed".into(), "7".into(), "--out".into(), s(o)];
    let oa = met_env(&args(&a).iter().map(String::as_str).collect::<Vec<_>>(), "1");
    let ob = met_env(&args(&b).iter().map(String::as_str).collect::<Vec<_>>(), "4");
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert_eq!(code(&ob), 0, "{}", stderr(&ob));
    assert_eq!(fs::read(a.join("ensemble.bin")).unwrap(), fs::read(b.join("ensemble.bin")).unwrap());
    assert_eq!(fs::read(a.join("summary.csv")).unwrap(), fs::read(b.join("summary.csv")).unwrap());
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_set");
    let o = met(&["train-met", "--model", &bd(), "--seed", "1", "--reward-set", &s(&missing), "--out", &s(&dir.path().join("t"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&s(&missing)), "{}", stderr(&o));

    // a directory without set.json names the expected file
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = met(&["train-met", "--model", &bd(), "--seed", "1", "--reward-set", &s(&empty), "--out", &s(&dir.path().join("t2"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("set.json"), "{}", stderr(&o));

    let o = met(&["simulate", "--model", &bd(), "--out", &s(&dir.path().join("u"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("seed"));

    let o = met(&["simulate", "--model", &bd(), "--seed", "1", "--rate", "nope=1", "--out", &s(&dir.path().join("v"))]);
    assert_eq!(code(&o), 2);

    let o = met(&["solve-exact", "--model", &s(&dir.path().join("missing.cme")), "--out", &s(&dir.path().join("w"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unstable_step_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = met(&[
        "train-reward", "--model", &bd(), "--seed", "1", "--dt", "2", "--t-final", "2", "--save-times", "2", "--width", "4",
        "--batch", "10", "--epochs", "1", "--out", &s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("unstable"), "{}", stderr(&o));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let json = serde_json::json!({
        "version": 1,
        "model": bd(),
        "seed": 3,
        "rates": {"kd": 0.2},
        "params": {"n": 50, "times": "0,1,2"}
    });
    fs::write(&cfg, json.to_string()).unwrap();
    let out = dir.path().join("o");
    let o = met(&["simulate", "--config", &s(&cfg), "--n", "20", "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eff: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(eff["params"]["n"], 20);
    assert_eq!(eff["params"]["times"], "0,1,2");
    assert_eq!(eff["rates"]["kd"], 0.2);
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 4);

    fs::write(&cfg, serde_json::json!({"version": 9, "model": bd()}).to_string()).unwrap();
    let o = met(&["simulate", "--config", &s(&cfg), "--seed", "1", "--out", &s(&dir.path().join("p"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("version"));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("busy");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let o = met(&["solve-exact", "--model", &bd(), "--out", &s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let model = s(&models().join("toggle_switch.cme"));
    let o = met(&["gradcheck", "--model", &model, "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.contains("met_logprob"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with("true")));
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    let model = s(&models().join("birth_death_ensemble.cme"));
    let run = |args: &[&str]| {
        let o = met(args);
        assert_eq!(code(&o), 0, "{:?}: {}", args, stderr(&o));
    };
    run(&[
        "train-reward", "--model", &model, "--seed", "1", "--rate-grid", "kd=0.1,0.2", "--init-states", "0;3",
        "--dt", "0.05", "--t-final", "1", "--save-times", "0.5,0.95", "--width", "8", "--batch", "100", "--epochs", "5",
        "--out", &p("rs"),
    ]);
    let manifest = fs::read_to_string(dir.path().join("rs/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
    run(&[
        "train-met", "--model", &model, "--seed", "2", "--reward-set", &p("rs"), "--d-emb", "8", "--d-ff", "16", "--d-l", "1",
        "--heads", "2", "--d-p", "4", "--s-batch", "50", "--m-acc", "4", "--epochs", "2", "--out", &p("met"),
    ]);
    let trace = fs::read_to_string(dir.path().join("met/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 2 * 8);
    let ckpt = p("met/met.ckpt");
    run(&["sample", "--model", &model, "--seed", "3", "--checkpoint", &ckpt, "--t", "1", "--n", "100", "--out", &p("sample")]);
    run(&[
        "trajectories", "--model", &model, "--seed", "4", "--checkpoint", &ckpt, "--dt", "1", "--steps", "3", "--n", "50",
        "--csv", "--out", &p("traj"),
    ]);
    run(&["simulate", "--model", &model, "--seed", "5", "--n", "50", "--times", "0,0.5,1", "--out", &p("data")]);
    run(&[
        "analyze", "--model", &model, "--ensemble", &p("traj/ensemble.bin"), "--exact", "--out", &p("an"),
    ]);
    run(&[
        "infer", "--model", &model, "--seed", "6", "--checkpoint", &ckpt, "--data", &p("data/ensemble.bin"), "--free", "kd",
        "--steps", "5", "--batch", "20", "--out", &p("inf"),
    ]);
    let chain = fs::read_to_string(dir.path().join("inf/chain.csv")).unwrap();
    assert_eq!(chain.lines().count(), 1 + 6);
    run(&[
        "sweep", "--model", &model, "--seed", "7", "--checkpoint", &ckpt, "--axis-a", "kb=0.5,1", "--axis-b", "kd=0.1,0.2",
        "--t", "1", "--n", "50", "--out", &p("sw"),
    ]);
    assert_eq!(fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap().lines().count(), 5);
}
