use std::path::{Path, PathBuf};

use clap::Parser;
use metacog_cli::{execute, read_queries, Cli, EXIT_BACKEND, EXIT_INPUT, EXIT_MISMATCH, EXIT_OK};
use metacog_core::calibration::CalibrationFile;
use metacog_core::memory::load_store;
use metacog_core::testing::{self, ScenarioFiles};
use metacog_core::trajectory::{deserialize_trajectory, serialize_trajectory, RunHeader};
use metacog_core::{
    Action, CalibrationModel, Outcome, Query, RetrievedDocument, Session, Termination,
    Trajectory, UncertaintySignals,
};

fn run_cli(args: &[&str]) -> (i32, String) {
    let mut argv = vec!["metacog"];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(argv).expect("arguments parse");
    let mut out = Vec::new();
    let code = execute(cli, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scenario(dir: &Path, overrides: &str) -> ScenarioFiles {
    testing::write_files(dir, overrides).unwrap()
}

fn run_scenario(files: &ScenarioFiles, id: &str) -> (i32, String) {
    run_cli(&[
        "run",
        "--config",
        s(&files.config),
        "--query",
        testing::QUERY_TEXT,
        "--query-id",
        id,
        "--answer",
        testing::ANSWER,
    ])
}

fn read_log(path: &Path) -> Trajectory {
    deserialize_trajectory(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_single_query_writes_log() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let (code, out) = run_scenario(&files, "eiffel");
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("eiffel\tanswered\t1889"), "{out}");
    let t = read_log(&files.log_dir.join("eiffel.jsonl"));
    assert_eq!(t.outcome, Outcome::Success);
    assert_eq!(t.sessions.len(), 3);
    assert!(t.sessions[1].critique.as_ref().unwrap().err());
    assert_eq!(
        t.sessions[2].injected_guidance.as_deref(),
        Some(format!("[Metacognitive guidance] {}", testing::DELTA).as_str())
    );
    assert!(files.log_dir.join("batch_summary.json").exists());
}

#[test]
fn run_query_file_in_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let qfile = dir.path().join("queries.txt");
    let mut lines = String::from("# comment\n");
    for i in 0..3 {
        lines.push_str(&format!(
            "{{\"id\": \"j{i}\", \"text\": \"{}\", \"answer\": \"1889\"}}\n",
            testing::QUERY_TEXT
        ));
    }
    lines.push('\n');
    lines.push_str(testing::QUERY_TEXT);
    lines.push('\n');
    std::fs::write(&qfile, lines).unwrap();
    let (code, out) = run_cli(&[
        "run",
        "--config",
        s(&files.config),
        "--queries",
        s(&qfile),
        "--parallelism",
        "2",
    ]);
    assert_eq!(code, EXIT_OK, "{out}");
    for id in ["j0", "j1", "j2", "q6"] {
        assert!(files.log_dir.join(format!("{id}.jsonl")).exists(), "{id}");
    }
    let unjudged = read_log(&files.log_dir.join("q6.jsonl"));
    assert_eq!(unjudged.outcome, Outcome::Unknown);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(files.log_dir.join("batch_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["n"], 4);
    assert_eq!(summary["critic_calls"], 4);
}

#[test]
fn read_queries_formats() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("q.txt");
    std::fs::write(&p, "plain question\n{\"text\": \"json one\", \"answer\": \"x\"}\n").unwrap();
    let qs = read_queries(&p).unwrap();
    assert_eq!(qs.len(), 2);
    assert_eq!(qs[0].id, "q1");
    assert_eq!(qs[1].id, "q2");
    assert_eq!(qs[1].metadata.get("answer").map(String::as_str), Some("x"));

    std::fs::write(&p, "{\"text\": \n").unwrap();
    assert!(read_queries(&p).is_err());
}

#[test]
fn duplicate_query_ids_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let qfile = dir.path().join("queries.txt");
    std::fs::write(
        &qfile,
        "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n",
    )
    .unwrap();
    let (code, out) = run_cli(&["run", "--config", s(&files.config), "--queries", s(&qfile)]);
    assert_eq!(code, EXIT_INPUT);
    assert!(out.contains("duplicate query id"), "{out}");
}

#[test]
fn missing_calibration_is_config_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    std::fs::remove_file(&files.calibration).unwrap();
    let (code, out) = run_scenario(&files, "x");
    assert_eq!(code, EXIT_INPUT);
    assert!(out.contains("calibration.json"), "{out}");
    assert!(!files.log_dir.exists());
}

#[test]
fn missing_calibration_allowed_without_fast_monitor() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "fast_monitor_enabled = false");
    std::fs::remove_file(&files.calibration).unwrap();
    let (code, out) = run_scenario(&files, "x");
    assert_eq!(code, EXIT_OK, "{out}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "anomaly_kk = 3");
    let (code, out) = run_scenario(&files, "x");
    assert_eq!(code, EXIT_INPUT);
    assert!(out.contains("anomaly_kk"), "{out}");
}

#[test]
fn invalid_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let (code, _) = run_cli(&[
        "run",
        "--config",
        s(&files.config),
        "--query",
        "q",
        "--anomaly-k=-1",
    ]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn systemic_backend_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    std::fs::write(&files.script, r#"{"rules": [{"fail": "connection refused"}]}"#).unwrap();
    let (code, out) = run_scenario(&files, "down");
    assert_eq!(code, EXIT_BACKEND, "{out}");
    let t = read_log(&files.log_dir.join("down.jsonl"));
    assert_eq!(t.termination, Termination::BackendError);
}

#[test]
fn cli_overrides_reach_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let logs = dir.path().join("other-logs");
    let (code, out) = run_cli(&[
        "run",
        "--config",
        s(&files.config),
        "--query",
        testing::QUERY_TEXT,
        "--log-dir",
        s(&logs),
        "--max-steps",
        "2",
        "--no-slow-monitor",
        "--anomaly-k",
        "3",
    ]);
    assert_eq!(code, EXIT_OK, "{out}");
    let t = read_log(&logs.join("q1.jsonl"));
    let h = t.run.unwrap();
    assert_eq!(h.max_steps, 2);
    assert_eq!(h.anomaly_k, 3.0);
    assert!(!h.slow_monitor_enabled);
    assert_eq!(t.termination, Termination::MaxStepsExceeded);
    assert!(t.sessions.iter().all(|s| s.critique.is_none()));
}

#[test]
fn online_memory_saved_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let before = load_store(&files.memory).unwrap().len();
    let (code, out) = run_cli(&[
        "run",
        "--config",
        s(&files.config),
        "--query",
        testing::QUERY_TEXT,
        "--online-memory",
        "--save-memory",
    ]);
    assert_eq!(code, EXIT_OK, "{out}");
    let after = load_store(&files.memory).unwrap();
    assert!(after.len() > before);
    assert!(after.entries().any(|e| e.entry_id.ends_with("@online")));
}

#[test]
fn build_memory_then_dedup_on_second_pass() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    assert_eq!(run_scenario(&files, "eiffel").0, EXIT_OK);
    let out_store = dir.path().join("built.jsonl");
    let args = [
        "build-memory",
        "--logs",
        s(&files.log_dir),
        "--out",
        s(&out_store),
        "--config",
        s(&files.config),
    ];
    let (code, out) = run_cli(&args);
    assert_eq!(code, EXIT_OK, "{out}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["logs_read"], 1);
    assert_eq!(report["entries_built"], 3);
    let inserted = report["inserted"].as_u64().unwrap();
    assert!(inserted >= 1);
    assert_eq!(
        inserted + report["discarded_duplicates"].as_u64().unwrap(),
        3
    );
    let store = load_store(&out_store).unwrap();
    assert_eq!(store.success_pool().len() as u64, inserted);
    assert!(store.failure_pool().is_empty());

    let (code, out) = run_cli(&args);
    assert_eq!(code, EXIT_OK, "{out}");
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["inserted"], 0);
    assert_eq!(report["discarded_duplicates"], 3);
    assert_eq!(load_store(&out_store).unwrap(), store);
}

#[test]
fn build_memory_without_labels_fails() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let (code, _) = run_cli(&[
        "run",
        "--config",
        s(&files.config),
        "--query",
        testing::QUERY_TEXT,
    ]);
    assert_eq!(code, EXIT_OK);
    let (code, out) = run_cli(&[
        "build-memory",
        "--logs",
        s(&files.log_dir),
        "--out",
        s(&dir.path().join("m.jsonl")),
        "--config",
        s(&files.config),
    ]);
    assert_eq!(code, EXIT_INPUT);
    assert!(out.contains("1 unknown"), "{out}");
}

fn retrieval_session(index: u32, se: f64, re: f64) -> Session {
    let mut arguments = serde_json::Map::new();
    arguments.insert("query".into(), format!("q{index}").into());
    Session {
        index,
        reasoning_text: "r".into(),
        reasoning_token_logprobs: vec![],
        action: Action::ToolCall {
            tool_name: "search".into(),
            arguments,
        },
        documents: vec![RetrievedDocument {
            doc_id: "d".into(),
            title: String::new(),
            content: "c".into(),
            rank: 1,
        }],
        tool_observation: "obs".into(),
        signals: Some(UncertaintySignals::from_measurements(
            se,
            re,
            &CalibrationModel::new(1.0, 0.0, 1.0, 2.0),
        )),
        critique: None,
        injected_guidance: None,
    }
}

fn synthetic_log(dir: &Path, id: &str, outcome: Outcome, points: &[(f64, f64)]) -> PathBuf {
    let mut sessions: Vec<Session> = points
        .iter()
        .enumerate()
        .map(|(i, (se, re))| retrieval_session(i as u32 + 1, *se, *re))
        .collect();
    let mut answer = retrieval_session(points.len() as u32 + 1, 0.0, 0.0);
    answer.action = Action::Terminate {
        final_answer: "x".into(),
    };
    answer.documents.clear();
    answer.signals = None;
    answer.tool_observation.clear();
    sessions.push(answer);
    let t = Trajectory {
        query: Query::new(id, "question"),
        sessions,
        outcome,
        termination: Termination::Answered,
        run: None,
    };
    t.validate().unwrap();
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join(format!("{id}.jsonl"));
    std::fs::write(&path, serialize_trajectory(&t)).unwrap();
    path
}

#[test]
fn fit_calibration_exact_line() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    synthetic_log(&logs, "ok", Outcome::Success, &[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]);
    synthetic_log(&logs, "bad", Outcome::Failure, &[(0.0, 9.0), (5.0, 0.0)]);
    let out_path = dir.path().join("cal.json");
    let (code, out) = run_cli(&[
        "fit-calibration",
        "--logs",
        s(&logs),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code, EXIT_OK, "{out}");
    let file = CalibrationFile::load(&out_path).unwrap();
    assert!((file.model.a - 1.0).abs() < 1e-12);
    assert!((file.model.b - 1.0).abs() < 1e-12);
    assert!(file.model.sigma.abs() < 1e-12);
    assert_eq!(file.model.k, 2.0);
    assert_eq!(file.model.n_fit, 3);
    assert_eq!(file.source_log_paths.len(), 1);
}

#[test]
fn fit_calibration_failure_only_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("logs");
    synthetic_log(&logs, "bad", Outcome::Failure, &[(0.0, 1.0), (1.0, 2.0)]);
    let out_path = dir.path().join("cal.json");
    let (code, out) = run_cli(&[
        "fit-calibration",
        "--logs",
        s(&logs),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code, EXIT_INPUT);
    assert!(out.contains("found 0"), "{out}");
    assert!(!out_path.exists());
}

#[test]
fn fit_calibration_from_scenario_logs() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    assert_eq!(run_scenario(&files, "eiffel").0, EXIT_OK);
    let out_path = dir.path().join("refit.json");
    let (code, out) = run_cli(&[
        "fit-calibration",
        "--logs",
        s(&files.log_dir),
        "--out",
        s(&out_path),
        "--k",
        "2.5",
    ]);
    assert_eq!(code, EXIT_OK, "{out}");
    let m = CalibrationFile::load(&out_path).unwrap().model;
    // Two points fit exactly.
    assert_eq!(m.n_fit, 2);
    assert!(m.sigma < 1e-12);
    assert_eq!(m.k, 2.5);
    let se2 = 0.6_f64.mul_add(-0.6_f64.ln(), -0.4 * 0.4_f64.ln());
    assert!((m.predict(se2) - testing::SECOND_ENTROPY).abs() < 1e-9);
}

#[test]
fn inspect_memory_lists_entries_and_hits() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    let (code, out) = run_cli(&[
        "inspect-memory",
        "--store",
        s(&files.memory),
        "--config",
        s(&files.config),
        "--query",
        "Statue of Liberty",
        "--k",
        "1",
    ]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("success=1 failure=1"), "{out}");
    assert!(out.contains("past-success"));
    assert_eq!(out.lines().filter(|l| l.starts_with("hit\t")).count(), 2);
}

#[test]
fn replay_clean_and_tampered() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    assert_eq!(run_scenario(&files, "eiffel").0, EXIT_OK);
    let (code, out) = run_cli(&["replay", "--log", s(&files.log_dir), "--config", s(&files.config)]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("verified=2\tmismatches=0\tunverifiable=1"), "{out}");

    // Without a config the header names the embedder.
    let (code, out) = run_cli(&["replay", "--log", s(&files.log_dir)]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("verified=2"), "{out}");

    let log = files.log_dir.join("eiffel.jsonl");
    let mut t = read_log(&log);
    t.sessions[1].signals.as_mut().unwrap().se += 0.01;
    std::fs::write(&log, serialize_trajectory(&t)).unwrap();
    let (code, out) = run_cli(&["replay", "--log", s(&log)]);
    assert_eq!(code, EXIT_MISMATCH, "{out}");
    assert!(out.contains("mismatch session 2 se"), "{out}");
}

#[test]
fn replay_fast_disabled_logs_are_unverifiable() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "fast_monitor_enabled = false");
    assert_eq!(run_scenario(&files, "plain").0, EXIT_OK);
    let (code, out) = run_cli(&["replay", "--log", s(&files.log_dir)]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("verified=0\tmismatches=0\tunverifiable=3"), "{out}");
}

#[test]
fn replay_rejects_corrupt_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("broken.jsonl");
    std::fs::write(&log, "{not json").unwrap();
    let (code, _) = run_cli(&["replay", "--log", s(&log)]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn header_round_trips_through_cli_log() {
    let dir = tempfile::tempdir().unwrap();
    let files = scenario(dir.path(), "");
    assert_eq!(run_scenario(&files, "eiffel").0, EXIT_OK);
    let text = std::fs::read_to_string(files.log_dir.join("eiffel.jsonl")).unwrap();
    let t = deserialize_trajectory(&text).unwrap();
    assert_eq!(serialize_trajectory(&t), text);
    let h: &RunHeader = t.run.as_ref().unwrap();
    assert_eq!(h.embedding_model_id.as_deref(), Some("hash-ngram-n3-d256-s0"));
}
