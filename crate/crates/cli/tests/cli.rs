use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[environment]
num_queries = 20
num_items = 200
match_min = 5
match_max = 15
w = 0.5

[experiment]
num_trials = 2
timesteps = 200
window = 50
"#;

fn bayescns(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayescns"))
        .args(args)
        .env_remove("BAYESCNS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_help_exits_zero() {
    let out = bayescns(&["run", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--config"));
    assert!(text.contains("--variant"));
}

#[test]
fn missing_config_names_the_path() {
    let out = bayescns(&["run", "--config", "/no/such/dir/experiment.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/no/such/dir/experiment.toml"), "{}", stderr(&out));
}

#[test]
fn unknown_flags_and_subcommands_are_usage_errors() {
    let out = bayescns(&["run", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(bayescns(&["plot"]).status.code(), Some(2));
    assert_eq!(bayescns(&["run", "--config", "x.toml", "--variant", "oracle"]).status.code(), Some(2));
}

#[test]
fn invalid_config_reports_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[experiment]\nnum_trials = 0\n").unwrap();
    let out = bayescns(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bad.toml"), "{}", stderr(&out));
}

#[test]
fn identical_seed_reproduces_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let res = bayescns(&["run", "--config", &config, "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    let read = |d: &Path, v: &str| std::fs::read(d.join(format!("{v}.csv"))).unwrap();
    for v in ["non_behavioral", "behavioral", "bayes_stationary", "bayescns"] {
        let first = read(&a, v);
        assert_eq!(first, read(&b, v), "{v}");
        assert_ne!(first, read(&c, v), "{v}");
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("trial,timestep,clicks,exposures,ctr_window\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 200);
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["base_seed"], 7);
    assert_eq!(summary["variants"].as_array().unwrap().len(), 4);
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let target = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_bayescns"))
        .args(["run", "--config", &config, "--variant", "non_behavioral", "--no-summary"])
        .env("BAYESCNS_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(target.join("non_behavioral.csv").exists());
    assert!(!target.join("summary.json").exists());
}

#[test]
fn aggregate_matches_run_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    let run = bayescns(&[
        "run", "--config", &config, "--variant", "bayescns", "--variant", "behavioral", "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let json = dir.path().join("agg.json");
    let agg = bayescns(&[
        "aggregate",
        run_dir.join("bayescns.csv").to_str().unwrap(),
        run_dir.join("behavioral.csv").to_str().unwrap(),
        "--window", "50",
        "--out", json.to_str().unwrap(),
    ]);
    assert!(agg.status.success(), "{}", stderr(&agg));
    let from_run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("summary.json")).unwrap()).unwrap();
    let from_agg: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    // run orders variants as configured, aggregate in canonical order
    let find = |doc: &serde_json::Value, v: &str| {
        doc.as_array().unwrap().iter().find(|e| e["variant"] == v).unwrap().clone()
    };
    for v in ["bayescns", "behavioral"] {
        assert_eq!(find(&from_run["variants"], v), find(&from_agg, v));
    }
}

#[test]
fn aggregate_needs_a_variant_for_unrecognized_names() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    std::fs::write(&path, "trial,timestep,clicks,exposures,ctr_window\n0,1,1,2,0.5\n").unwrap();
    let out = bayescns(&["aggregate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--variant"));
    let out = bayescns(&["aggregate", path.to_str().unwrap(), "--variant", "bayescns"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn model_and_snapshot_artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("models");
    let out = out_dir.to_str().unwrap();
    for cmd in ["train-prior", "train-ranker"] {
        let res = bayescns(&[cmd, "--config", &config, "--out", out]);
        assert!(res.status.success(), "{cmd}: {}", stderr(&res));
    }
    for name in ["prior.ckpt", "ranker_contextual.ckpt", "ranker_interaction.ckpt"] {
        assert!(std::fs::read(out_dir.join(name)).unwrap().starts_with(b"BCNSCKPT"), "{name}");
    }

    let snap = dir.path().join("store.bin");
    let snap_again = dir.path().join("store2.bin");
    for path in [&snap, &snap_again] {
        let res = bayescns(&["snapshot", "--config", &config, "--out", path.to_str().unwrap()]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    let bytes = std::fs::read(&snap).unwrap();
    assert!(bytes.starts_with(b"BCNSPOST"));
    assert_eq!(bytes, std::fs::read(&snap_again).unwrap());

    let res = bayescns(&["snapshot", "--config", &config, "--variant", "non_behavioral"]);
    assert_eq!(res.status.code(), Some(1));
    let res = bayescns(&["train-prior", "--config", &config, "--trial", "5", "--out", out]);
    assert_eq!(res.status.code(), Some(1));
}
