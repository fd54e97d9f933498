use std::path::Path;
use std::process::{Command, Output};

fn factornet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factornet"))
        .args(args)
        .output()
        .unwrap()
}

fn run_with(dir: &Path, task: &str, config: &str) -> (Output, std::path::PathBuf) {
    let cfg = dir.join(format!("{task}.json"));
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join(format!("{task}_out"));
    let o = factornet(&[task, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    (o, out)
}

const SMALL: &str = r#""seed":1,"sim":{"n_train":100,"n_valid":40,"n_test":60,"p":20,"k":3},"n_seeds":1,"search":{"budget":0},"train":{"max_epochs":5},"checkpoints":true"#;

#[test]
fn benchmark_succeeds_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_with(
        dir.path(),
        "benchmark",
        &format!(r#"{{{SMALL},"models":["PCA_NN_PCA_ADD","lasso"]}}"#),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "trials.csv", "table3.csv", "rank.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(out.join("checkpoints/PCA_NN_PCA_ADD_p20.json").exists());
    assert!(out.join("plots/PCA_NN_PCA_ADD_p20_loss.svg").exists());
    assert!(out.join("plots/PCA_NN_PCA_ADD_p20_loss.csv").exists());
}

#[test]
fn simulate_exports_splits() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_with(dir.path(), "simulate", &format!("{{{SMALL}}}"));
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("sim_train.csv")).unwrap();
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn bad_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = run_with(dir.path(), "benchmark", r#"{"models": ["nope"]}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    assert!(!out.join("results.csv").exists());
    let (o, _) = run_with(dir.path(), "tune", r#"{"seed": "x"}"#);
    assert_eq!(o.status.code(), Some(2));
    let (o, _) = run_with(dir.path(), "sweep", r#"{"task": "backtest"}"#);
    assert_eq!(o.status.code(), Some(2));
    let missing = factornet(&["tune", "--config", "/nonexistent/cfg.json", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn partial_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // A learning rate this large overflows the first batch.
    let cfg = format!(r#"{{{SMALL},"models":["vanillaNN","lasso"],"hyper":{{"lr":1e300}}}}"#);
    let (o, out) = run_with(dir.path(), "benchmark", &cfg);
    assert_eq!(o.status.code(), Some(3));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let lasso = results.lines().find(|l| l.contains(",lasso,")).unwrap();
    assert!(lasso.split(',').nth(5).unwrap().parse::<f64>().is_ok());
    assert!(results.contains("non-finite"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, format!(r#"{{{SMALL},"models":["lasso"]}}"#)).unwrap();
    let out = dir.path().join("o");
    let o = factornet(&[
        "benchmark",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(results.lines().nth(1).unwrap().contains(",lasso,11,"));
}
