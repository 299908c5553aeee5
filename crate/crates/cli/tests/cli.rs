use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
tasks_per_family = 2
demos_per_task = 6
validation_demos_per_task = 2

[stage1]
steps = 150
hidden = [32]

[stage2]
steps = 80

[stage3]
steps = 20
batch_size = 8

[lcm]
feature_dim = 8
state_dim = 8
"#;

fn dualmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmem")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_ok(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let config = dir.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--seed", "7", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = dualmem(&args);
    assert!(out.status.success(), "{cmd} failed: {}", stderr(&out));
    out
}

fn manifest(dir: &Path, cmd: &str) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join(format!("manifest-{cmd}.json"))).unwrap()).unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = dualmem(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    assert_eq!(dualmem(&["train-everything"]).status.code(), Some(2));
    assert_eq!(dualmem(&["gen-data", "--frobnicate"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_ok(a.path(), "gen-data", &[]);
    run_ok(b.path(), "gen-data", &[]);
    let fa = manifest(a.path(), "gen-data")["results"]["dataset_fingerprint"].clone();
    assert!(fa.is_string());
    assert_eq!(fa, manifest(b.path(), "gen-data")["results"]["dataset_fingerprint"]);
    for f in ["manifest.json", "trajectories.bin"] {
        assert_eq!(std::fs::read(a.path().join("data").join(f)).unwrap(), std::fs::read(b.path().join("data").join(f)).unwrap());
    }
}

#[test]
fn eval_before_training_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), "gen-data", &[]);
    let out = dualmem(&["eval", "--out-dir", dir.path().to_str().unwrap(), "--mode", "gaussian-init"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("policy.ckpt"), "{}", stderr(&out));
    assert!(!dir.path().join("manifest-eval.json").exists());
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[stage1]\nhidden = [0]\n").unwrap();
    let out = dualmem(&["gen-data", "--config", config.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("hidden"));
}

#[test]
fn full_pipeline_through_sweep_and_bank_inspection() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["gen-data", "train-policy", "train-prior-head", "build-memory", "train-lcm"] {
        run_ok(d, cmd, &[]);
        let m = manifest(d, cmd);
        assert_eq!(m["command"], cmd);
        assert_eq!(m["seed"], 7);
        assert!(m["timestamp"].as_u64().unwrap() > 0);
        assert_eq!(m["config"]["stage1"]["steps"], 150);
    }
    assert!(manifest(d, "train-lcm")["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("bank.bin")));

    let trace = d.join("trace.jsonl");
    let out = run_ok(d, "eval", &["--mode", "gpm+lcm", "--episodes", "6", "--trace", trace.to_str().unwrap()]);
    assert!(stdout(&out).contains("median error"));
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 6);
    assert_eq!(manifest(d, "eval")["config"]["eval"]["episodes"], 6);
    run_ok(d, "eval", &["--mode", "gaussian-init", "--nfe", "2", "--episodes", "4", "--split", "unseen"]);

    run_ok(d, "sweep", &["--episodes", "4"]);
    let first = std::fs::read(d.join("sweep.csv")).unwrap();
    run_ok(d, "sweep", &["--episodes", "4"]);
    assert_eq!(first, std::fs::read(d.join("sweep.csv")).unwrap());

    let out = run_ok(d, "inspect-bank", &[]);
    let text = stdout(&out);
    assert!(text.contains("key norms: all unit"), "{text}");
    assert!(text.contains("(match)"), "{text}");
    let entries = manifest(d, "build-memory")["results"]["entries"].as_u64().unwrap();
    assert!(text.contains(&format!("entries: {entries}")));

    let bank = std::fs::read(d.join("bank.bin")).unwrap();
    let cut = d.join("cut.bin");
    std::fs::write(&cut, &bank[..bank.len() - 9]).unwrap();
    let out = dualmem(&["inspect-bank", cut.to_str().unwrap(), "--out-dir", d.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("corrupt"), "{}", stderr(&out));
}
