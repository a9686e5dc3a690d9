use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_neuron-lca");

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("NEURON_LCA_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fixture(dir: &Path) {
    ok(&run(&[
        "make-fixture",
        "--out",
        dir.to_str().unwrap(),
        "--layers",
        "4",
        "--hidden",
        "10",
        "--tags",
        "4",
        "--planted",
        "4",
        "--train-tokens",
        "2000",
        "--dev-tokens",
        "400",
        "--test-tokens",
        "400",
    ]));
}

fn probe_seed(path: &Path) -> u64 {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["seed"].as_u64().unwrap()
}

#[test]
fn pipeline_writes_full_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    fixture(&data);
    let stdout = ok(&run(&[
        "pipeline",
        "--data-dir",
        data.to_str().unwrap(),
        "--lambdas",
        "0,1e-4",
        "--step-percent",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("Bottom"));
    for name in [
        "run.json",
        "tables.txt",
        "ranking.csv",
        "ranking.json",
        "probe.json",
        "selection.json",
        "search.csv",
        "ablation.csv",
        "redundancy.csv",
        "layers.csv",
        "spread.csv",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    check_run_json(&out.join("run.json"));

    let cmp = ok(&run(&["compare", "--base", out.to_str().unwrap(), "--other", out.to_str().unwrap()]));
    assert!(cmp.contains("1.000"), "{cmp}");
}

fn check_run_json(path: &Path) {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert!(v["ranking"]["ordering"].as_array().is_some_and(|a| a.len() == 40));
}

#[test]
fn rank_without_probe_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["rank", "--probe", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing probe"));
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["ablate", "--percent", "20"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unwritable_output_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = run(&["make-fixture", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_rank_ablate_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fixture(&data);
    let d = data.to_str().unwrap();
    let probe = tmp.path().join("probe.json");
    let ranking = tmp.path().join("ranking.json");
    ok(&run(&["train", "--data-dir", d, "--lambda1", "1e-4", "--lambda2", "1e-4", "--out", probe.to_str().unwrap()]));
    ok(&run(&["rank", "--probe", probe.to_str().unwrap(), "--out", ranking.to_str().unwrap()]));

    let common = [
        "ablate",
        "--data-dir",
        d,
        "--ranking",
        ranking.to_str().unwrap(),
        "--probe",
        probe.to_str().unwrap(),
        "--strategy",
        "top",
        "--percent",
        "20",
    ];
    let masked = ok(&run(&common));
    assert!(masked.contains("others zeroed"), "{masked}");
    let mut retrain = common.to_vec();
    retrain.push("--retrain");
    let retrained = ok(&run(&retrain));
    assert!(retrained.contains("retrained"), "{retrained}");

    let html_dir = tmp.path().join("html");
    ok(&run(&[
        "visualize",
        "--activations",
        data.join("test.activations.jsonl").to_str().unwrap(),
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--neuron",
        "23",
        "--sentences",
        "0,1",
        "--out",
        html_dir.to_str().unwrap(),
    ]));
    let html = std::fs::read_to_string(html_dir.join("neuron_2_3.html")).unwrap();
    assert!(html.starts_with("<!DOCTYPE html>"));
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fixture(&data);
    let d = data.to_str().unwrap();
    let cfg = tmp.path().join("run.conf");
    std::fs::write(&cfg, "# quick\nseed = 11\nepochs = 1\n").unwrap();
    let probe = tmp.path().join("p.json");
    let p = probe.to_str().unwrap();
    let c = cfg.to_str().unwrap();
    let train = ["train", "--data-dir", d, "--out", p];

    ok(&run_env(&train, &[("NEURON_LCA_SEED", "5")]));
    assert_eq!(probe_seed(&probe), 5);

    let mut with_cfg = vec!["--config", c];
    with_cfg.extend(train);
    ok(&run_env(&with_cfg, &[("NEURON_LCA_SEED", "5")]));
    assert_eq!(probe_seed(&probe), 11);

    with_cfg.extend(["--seed", "3"]);
    ok(&run_env(&with_cfg, &[("NEURON_LCA_SEED", "5")]));
    assert_eq!(probe_seed(&probe), 3);

    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let bad = run(&["--config", c, "train", "--data-dir", d, "--out", p]);
    assert_eq!(bad.status.code(), Some(1));
}
