use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_graphflow"));
    c.env_remove("FLOWGRAPH_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.trim()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.trim().lines().last().unwrap()).unwrap()
}

fn core_data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_on_chain_fixture() {
    let m = ok(&["gradcheck", "--fixture", "chain-3"]);
    assert_eq!(m["command"], "gradcheck");
    assert_eq!(m["summary"]["passed"], true);
    let checks = m["summary"]["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 5);
    for c in checks {
        assert!(c["max_rel_err"].as_f64().unwrap() <= 1e-4, "{c}");
        assert!(c["checked"].as_u64().unwrap() >= 100);
    }
}

#[test]
fn gradcheck_fails_loudly_with_an_impossible_tolerance() {
    let out = run(&["gradcheck", "--objective", "tb", "--tol", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "check_failed");
}

#[test]
fn gen_train_retrieve_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bench = d.join("bench");
    let g = ok(&[
        "gen", "--out", s(&bench), "--seed", "4", "--num_queries", "6", "--num_papers", "60", "--num_authors", "20",
        "--num_venues", "4",
    ]);
    assert_eq!(g["seed"], 4);
    let graph = bench.join("graph.jsonl");
    let queries = bench.join("queries.jsonl");
    assert!(bench.join("manifest.json").is_file());

    let model = d.join("model.json");
    let t = ok(&[
        "train", "--graph", s(&graph), "--queries", s(&queries), "--out", s(&model), "--epochs", "1", "--dim", "256",
        "--hidden", "16", "--depth_cutoff", "2", "--eval_ratio", "1.0",
    ]);
    assert!(t["digests"].as_object().unwrap().contains_key(s(&model)));
    assert!(d.join("model.json.log.csv").is_file());

    let results = d.join("results.jsonl");
    ok(&[
        "retrieve", "--graph", s(&graph), "--queries", s(&queries), "--model", s(&model), "--out", s(&results), "--n",
        "7", "--jobs", "3",
    ]);
    let lines: Vec<Value> = std::fs::read_to_string(&results)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for l in &lines {
        assert_eq!(l["samples"].as_array().unwrap().len(), 7);
        assert!(l["samples"].as_array().unwrap().iter().all(|x| x["path"].as_array().unwrap().len() <= 3));
    }

    let report = d.join("report.csv");
    let e = ok(&["eval", "--results", s(&results), "--queries", s(&queries), "--out", s(&report)]);
    let dr = e["summary"]["dr20"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dr));
    assert!(std::fs::read_to_string(&report).unwrap().starts_with("qid,num_targets,bin,"));

    let dense = d.join("dense.jsonl");
    ok(&["baseline-dense", "--graph", s(&graph), "--queries", s(&queries), "--out", s(&dense), "--k", "5"]);
    ok(&["eval", "--results", s(&dense), "--queries", s(&queries), "--out", s(&d.join("dense.csv"))]);
}

#[test]
fn eval_reproduces_the_three_query_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    ok(&[
        "eval",
        "--results",
        s(&core_data("metrics-3q/results.jsonl")),
        "--queries",
        s(&core_data("metrics-3q/queries.jsonl")),
        "--out",
        s(&out),
        "--jobs",
        "2",
    ]);
    let got = std::fs::read_to_string(&out).unwrap();
    let want = std::fs::read_to_string(core_data("metrics-3q/report.csv")).unwrap();
    for (g, w) in got.lines().zip(want.lines()) {
        let (g, w): (Vec<&str>, Vec<&str>) = (g.split(',').collect(), w.split(',').collect());
        assert_eq!(g.len(), w.len());
        for (a, b) in g.iter().zip(&w) {
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!((x - y).abs() <= 1e-9, "{a} vs {b}"),
                _ => assert_eq!(a, b),
            }
        }
    }
    assert_eq!(got.lines().count(), want.lines().count());
}

#[test]
fn oracle_on_graded_star() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.json");
    let m = ok(&["oracle", "--fixture", "star-3-graded", "--out", s(&out)]);
    assert_eq!(m["summary"]["z"].as_f64().unwrap(), 6.0);
    assert!(m["summary"]["max_conservation_residual"].as_f64().unwrap() <= 1e-12);
    let dump: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!((dump["terminal_distribution"]["l3"].as_f64().unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn seed_from_environment_matches_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let args = |out: &Path| {
        vec!["train".to_string(), "--fixture".into(), "star-2-targets".into(), "--out".into(), s(out).into(),
             "--epochs".into(), "3".into(), "--dim".into(), "64".into(), "--hidden".into(), "8".into()]
    };
    let st = bin().args(args(&a)).args(["--seed", "17"]).output().unwrap();
    assert!(st.status.success());
    let st = bin().args(args(&b)).env("FLOWGRAPH_SEED", "17").output().unwrap();
    assert!(st.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["train", "--fixture", "chain-3", "--out", "x", "--no_such_flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
    assert!(out.stdout.is_empty());
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--results",
        s(&dir.path().join("absent.jsonl")),
        "--queries",
        s(&core_data("metrics-3q/queries.jsonl")),
        "--out",
        s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let e = error_json(&out);
    assert!(e["error"]["message"].as_str().unwrap().contains("absent.jsonl"));
}

#[test]
fn unknown_fixture_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["oracle", "--fixture", "pentagon", "--out", s(&dir.path().join("o.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("pentagon"));
}
