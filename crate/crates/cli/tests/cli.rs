use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faultloc_core::RankingFile;
use serde_json::Value;

fn faultloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faultloc"))
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("FL_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A fresh synthetic corpus in a temp dir.
fn corpus(extra: &[&str]) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    let mut args = vec!["synth", "--out", s(&root)];
    args.extend_from_slice(extra);
    let out = faultloc(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    (dir, root)
}

#[test]
fn localize_writes_ranking_and_transcripts() {
    let (tmp, root) = corpus(&[]);
    let out_dir = tmp.path().join("out");
    let out = faultloc(&["localize", "--bundle", s(&root.join("Synth-1")), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let file = RankingFile::from_json(&std::fs::read_to_string(out_dir.join("ranking.json")).unwrap()).unwrap();
    assert_eq!(file.fault_id, "Synth-1");
    assert!(file.ranking.iter().all(|e| e.fix.is_some()));
    for agent in ["context", "debugger", "reviewer"] {
        assert!(out_dir.join("transcripts").join(format!("{agent}.json")).is_file(), "{agent}");
    }
    assert!(stdout(&out).contains("1. "));
}

#[test]
fn ablation_flags_show_in_the_config_block() {
    let (tmp, root) = corpus(&[]);
    let out_dir = tmp.path().join("out");
    let out = faultloc(&[
        "localize",
        "--bundle",
        s(&root.join("Synth-2")),
        "--out",
        s(&out_dir),
        "--no-division",
        "--no-reflexion",
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["config"]["enable_division"], false);
    assert_eq!(v["config"]["enable_reflexion"], false);
    assert_eq!(v["config"]["enable_navigation"], true);
    assert!(!out_dir.join("transcripts/reviewer.json").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let (tmp, root) = corpus(&[]);
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, "enable_navigation = false\nreflexion_max_iters = 2\n[budget]\nlimit = 64000\ncounter_id = \"chars4\"\n").unwrap();
    let out = faultloc(&[
        "localize",
        "--bundle",
        s(&root.join("Synth-1")),
        "--out",
        s(&tmp.path().join("out")),
        "--config",
        s(&config),
        "--reflexion-iters",
        "1",
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["config"]["enable_navigation"], false);
    assert_eq!(v["config"]["reflexion_max_iters"], 1);
    assert_eq!(v["config"]["budget"]["limit"], 64000);
    assert_eq!(v["stats"]["tool_calls"], 0);
}

#[test]
fn missing_matrix_is_an_input_error() {
    let (tmp, root) = corpus(&[]);
    let bundle = root.join("Synth-1");
    std::fs::remove_file(bundle.join("matrix")).unwrap();
    let out = faultloc(&["localize", "--bundle", s(&bundle), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains(s(&bundle.join("matrix"))), "{}", stderr(&out));
}

#[test]
fn exhausted_mock_script_is_a_pipeline_error() {
    let (tmp, root) = corpus(&[]);
    let script = tmp.path().join("empty.json");
    std::fs::write(&script, r#"{"mode":"sequential","steps":[{"reply":{"content":"nothing useful"}}]}"#).unwrap();
    let out = faultloc(&[
        "localize",
        "--bundle",
        s(&root.join("Synth-1")),
        "--out",
        s(&tmp.path().join("out")),
        "--mock-script",
        s(&script),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("Synth-1"));
    assert!(!tmp.path().join("out/ranking.json").exists());
}

#[test]
fn remote_backend_without_key_is_refused() {
    let (tmp, root) = corpus(&[]);
    let out = faultloc(&[
        "localize",
        "--bundle",
        s(&root.join("Synth-1")),
        "--out",
        s(&tmp.path().join("out")),
        "--backend",
        "remote",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("FL_API_KEY"));
}

#[test]
fn evaluate_counts_top_n() {
    let (tmp, root) = corpus(&[]);
    let rankings = tmp.path().join("rankings");
    let bundles: Vec<String> = (1..=3).map(|i| s(&root.join(format!("Synth-{i}"))).to_string()).collect();
    let mut args = vec!["localize", "--out", s(&rankings), "--jobs", "2"];
    for b in &bundles {
        args.extend(["--bundle", b.as_str()]);
    }
    let out = faultloc(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(rankings.join("Synth-3/ranking.json").is_file());

    let report = tmp.path().join("report.json");
    let truth = root.join("truth.json");
    let out = faultloc(&["evaluate", "--rankings", s(&rankings), "--truth", s(&truth), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for n in [1, 3, 5, 10] {
        assert!(text.contains(&format!("Top-{n}")), "{text}");
    }
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["top_n_counts"]["1"], 3);
    assert_eq!(v["missing"].as_array().unwrap().len(), 2);

    let out = faultloc(&["evaluate", "--rankings", s(&rankings), "--truth", s(&truth), "--format", "json"]);
    let v: Value = serde_json::from_str(&stdout(&out)).expect("json only");
    assert_eq!(v["top_n_counts"]["10"], 3);
}

#[test]
fn evaluate_empty_dir_reports_zero() {
    let (tmp, root) = corpus(&[]);
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_faultloc"))
        .args(["evaluate", "--rankings", s(&empty), "--truth", s(&root.join("truth.json")), "--format", "json"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["top_n_counts"].as_object().unwrap().values().all(|c| c == 0));
    assert!(stderr(&out).contains("no ranking files"), "{}", stderr(&out));

    let out = faultloc(&["evaluate", "--rankings", s(&tmp.path().join("nope")), "--truth", s(&root.join("truth.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inspect_previews_without_a_backend() {
    let (tmp, root) = corpus(&[]);
    let bundle = root.join("Synth-1");
    // Without a mock script a backend call would fail; inspect must not need one.
    std::fs::remove_file(bundle.join("mock.json")).unwrap();
    let manifest = bundle.join("bundle.json");
    let mut m: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m.as_object_mut().unwrap().remove("mock_script");
    std::fs::write(&manifest, m.to_string()).unwrap();

    let out = faultloc(&["inspect", s(&bundle), "--token-limit", "400", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let limit = v["effective_token_limit"].as_u64().unwrap();
    assert!(v["plan"]["k"].as_u64().unwrap() > 1);
    for tokens in v["plan"]["per_group_tokens"].as_array().unwrap() {
        assert!(tokens.as_u64().unwrap() <= limit);
    }

    let scores = tmp.path().join("scores.json");
    let order: Vec<String> = v["order"].as_array().unwrap().iter().map(|m| m.as_str().unwrap().to_string()).collect();
    let reversed: serde_json::Map<String, Value> =
        order.iter().enumerate().map(|(i, m)| (m.clone(), Value::from(i as f64))).collect();
    std::fs::write(&scores, Value::Object(reversed).to_string()).unwrap();
    let out = faultloc(&["inspect", s(&bundle), "--order", "external", "--external-scores", s(&scores), "--format", "json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let got: Vec<String> = v["order"].as_array().unwrap().iter().map(|m| m.as_str().unwrap().to_string()).collect();
    let mut want = order.clone();
    want.reverse();
    assert_eq!(got, want);

    let out = faultloc(&["inspect", s(&bundle)]);
    assert!(stdout(&out).contains("ochiai top"), "{}", stdout(&out));
}

#[test]
fn unknown_flag_prints_usage() {
    let out = faultloc(&["inspect", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn experiment_ablation_preset() {
    let (tmp, root) = corpus(&["--faults", "3"]);
    let table = tmp.path().join("table.json");
    let out = faultloc(&["experiment", "--corpus", s(&root), "--out", s(&table), "--jobs", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("w/o-navigation") && text.contains("w/o-reflexion"), "{text}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
}
