use std::sync::Arc;

use super::*;
use crate::backends::{ScriptRule, ScriptedChat, ScriptedResponse};
use crate::testing;
use crate::trajectory::OutcomeLabel;

fn agent_with(cfg: RunConfig) -> (Agent, Arc<ScriptedChat>) {
    let (deps, chat) = testing::deps();
    (Agent::new(deps, cfg).unwrap(), chat)
}

fn critic_requests(chat: &ScriptedChat) -> usize {
    chat.requests()
        .iter()
        .filter(|r| r.messages.iter().any(|m| m.content.contains(testing::CRITIC_MARKER)))
        .count()
}

fn h(ps: &[f64]) -> f64 {
    -ps.iter().map(|p| p * p.ln()).sum::<f64>()
}

#[test]
fn scenario_flags_second_step_and_injects_guidance() {
    let (agent, chat) = agent_with(testing::run_config(None));
    let t = agent.run_trajectory(&testing::query("q1"));
    assert_eq!(t.termination, Termination::Answered);
    assert_eq!(t.sessions.len(), 3);
    assert_eq!(t.final_answer(), Some(testing::ANSWER));
    assert_eq!(t.outcome, Outcome::Success);

    let s1 = t.sessions[0].signals.expect("step 1 monitored");
    assert_eq!(s1.se, 0.0);
    assert!((s1.re - testing::FIRST_ENTROPY).abs() < 1e-9);
    assert!(!s1.anomaly);

    let s2 = t.sessions[1].signals.expect("step 2 monitored");
    assert!((s2.se - h(&[0.6, 0.4])).abs() < 1e-12);
    assert!((s2.se - 0.6730).abs() < 1e-4);
    assert!((s2.re - 3.0).abs() < 1e-9);
    assert!((s2.epsilon - 2.327).abs() < 1e-3);
    assert!(s2.anomaly);
    let critique = t.sessions[1].critique.as_ref().expect("critic ran");
    assert!(critique.err());
    assert_eq!(critique.delta(), Some(testing::DELTA));

    assert!(t.sessions[2].signals.is_none());
    assert_eq!(
        t.sessions[2].injected_guidance.as_deref(),
        Some(format!("[Metacognitive guidance] {}", testing::DELTA).as_str())
    );
    assert!(t.sessions[0].injected_guidance.is_none());
    assert!(t.sessions[1].injected_guidance.is_none());
    assert_eq!(critic_requests(&chat), 1);
}

#[test]
fn guidance_appears_only_in_the_following_prompt() {
    let (agent, chat) = agent_with(testing::run_config(None));
    agent.run_trajectory(&testing::query("q1"));
    let policy: Vec<_> = chat
        .requests()
        .into_iter()
        .filter(|r| !r.messages.iter().any(|m| m.content.contains(testing::CRITIC_MARKER)))
        .collect();
    assert_eq!(policy.len(), 3);
    let has_delta = |r: &ChatRequest| r.messages.iter().any(|m| m.content.contains(testing::DELTA));
    assert!(!has_delta(&policy[0]));
    assert!(!has_delta(&policy[1]));
    assert!(has_delta(&policy[2]));
    let last = policy[2].messages.last().unwrap();
    assert_eq!(last.role, crate::backends::Role::Monitor);
}

#[test]
fn slow_monitor_disabled_keeps_signals_only() {
    let cfg = RunConfig {
        slow_monitor_enabled: false,
        ..testing::run_config(None)
    };
    let (agent, chat) = agent_with(cfg);
    let t = agent.run_trajectory(&testing::query("q1"));
    assert_eq!(t.sessions.len(), 3);
    assert!(t.sessions[1].signals.unwrap().anomaly);
    assert!(t.sessions.iter().all(|s| s.critique.is_none()));
    assert!(t.sessions.iter().all(|s| s.injected_guidance.is_none()));
    assert_eq!(critic_requests(&chat), 0);

    let (full, _) = agent_with(testing::run_config(None));
    let with = full.run_trajectory(&testing::query("q1"));
    assert_eq!(t.sessions[0].signals, with.sessions[0].signals);
    assert_eq!(t.sessions[1].signals, with.sessions[1].signals);
}

#[test]
fn fast_monitor_disabled_records_no_signals() {
    let cfg = RunConfig {
        fast_monitor_enabled: false,
        ..testing::run_config(None)
    };
    let (agent, chat) = agent_with(cfg);
    let t = agent.run_trajectory(&testing::query("q1"));
    assert!(t.sessions.iter().all(|s| s.signals.is_none() && s.critique.is_none()));
    assert_eq!(critic_requests(&chat), 0);
    assert!(chat.requests().iter().all(|r| !r.want_logprobs));
}

#[test]
fn matched_entropy_means_no_intervention() {
    let se = h(&[0.6, 0.4]);
    let mut rules = testing::script_rules();
    rules[2] = ScriptRule::respond(ScriptedResponse::with_entropy(
        testing::step2_text(),
        se,
        testing::CANDIDATES,
    ))
    .on_turn(1);
    let build = |fast: bool, slow: bool| {
        let (mut deps, _) = testing::deps();
        let chat = Arc::new(ScriptedChat::new(rules.clone()));
        deps.policy = chat.clone();
        deps.critic_chat = chat.clone();
        let cfg = RunConfig {
            fast_monitor_enabled: fast,
            slow_monitor_enabled: slow,
            ..testing::run_config(None)
        };
        (Agent::new(deps, cfg).unwrap(), chat)
    };
    let (monitored, chat) = build(true, true);
    let t = monitored.run_trajectory(&testing::query("q1"));
    assert!(t.sessions[1].signals.unwrap().epsilon.abs() < 1e-9);
    assert!(t.sessions.iter().all(|s| s.signals.map_or(true, |x| !x.anomaly)));
    assert_eq!(critic_requests(&chat), 0);

    let (plain, _) = build(false, false);
    let p = plain.run_trajectory(&testing::query("q1"));
    let strip = |mut s: Session| {
        s.signals = None;
        s
    };
    let a: Vec<_> = t.sessions.into_iter().map(strip).collect();
    assert_eq!(a, p.sessions);
}

#[test]
fn step_budget_of_one() {
    let cfg = RunConfig {
        max_steps: 1,
        ..testing::run_config(None)
    };
    let (agent, _) = agent_with(cfg);
    let q = testing::query("q1");
    let step = agent.run_step(&q, &[], None).unwrap();
    assert!(step.terminal);
    let t = agent.run_trajectory(&q);
    assert_eq!(t.sessions.len(), 1);
    assert_eq!(t.termination, Termination::MaxStepsExceeded);
    assert_eq!(t.outcome, Outcome::Failure);
}

#[test]
fn terminal_anomaly_is_recorded_not_injected() {
    let cfg = RunConfig {
        max_steps: 2,
        ..testing::run_config(None)
    };
    let (agent, _) = agent_with(cfg.clone());
    let t = agent.run_trajectory(&testing::query("q1"));
    assert_eq!(t.sessions.len(), 2);
    assert!(t.sessions[1].critique.as_ref().unwrap().err());
    assert_eq!(t.termination, Termination::MaxStepsExceeded);

    let (agent, _) = agent_with(RunConfig {
        extra_step_on_terminal_anomaly: true,
        ..cfg
    });
    let t = agent.run_trajectory(&testing::query("q1"));
    assert_eq!(t.sessions.len(), 3);
    assert!(t.sessions[2].injected_guidance.is_some());
    assert_eq!(t.termination, Termination::Answered);
}

#[test]
fn policy_failure_ends_with_backend_error() {
    let (mut deps, _) = testing::deps();
    deps.policy = Arc::new(ScriptedChat::new(vec![ScriptRule {
        fail: Some("connection reset".into()),
        ..Default::default()
    }]));
    let agent = Agent::new(deps, testing::run_config(None)).unwrap();
    let t = agent.run_trajectory(&testing::query("q1"));
    assert_eq!(t.termination, Termination::BackendError);
    assert!(t.sessions.is_empty());
}

#[test]
fn tool_errors_become_observations() {
    let (mut deps, _) = testing::deps();
    deps.policy = Arc::new(ScriptedChat::new(vec![
        ScriptRule::respond(ScriptedResponse::text(
            "<think>x</think><tool_call>{\"name\": \"browse\", \"arguments\": {}}</tool_call>",
        ))
        .on_turn(0),
        ScriptRule::respond(ScriptedResponse::text("<think>y</think><tool_call>{bad</tool_call>"))
            .on_turn(1),
        ScriptRule::respond(ScriptedResponse::text("no action at all")).on_turn(2),
        ScriptRule::respond(ScriptedResponse::text("<answer>done</answer>")),
    ]));
    let cfg = RunConfig {
        fast_monitor_enabled: false,
        ..testing::run_config(None)
    };
    let agent = Agent::new(deps, cfg).unwrap();
    let t = agent.run_trajectory(&Query::new("q", "anything"));
    assert_eq!(t.sessions.len(), 4);
    for s in &t.sessions[..3] {
        assert!(s.tool_observation.starts_with("TOOL_ERROR"), "{}", s.tool_observation);
    }
    assert_eq!(t.final_answer(), Some("done"));
    assert_eq!(t.outcome, Outcome::Unknown);
}

#[test]
fn missing_calibration_is_rejected() {
    let (mut deps, _) = testing::deps();
    deps.calibration = None;
    assert!(matches!(
        Agent::new(deps, testing::run_config(None)),
        Err(OrchestratorError::MissingCalibration)
    ));
}

#[test]
fn online_memory_labels_flagged_error_as_failure() {
    let cfg = RunConfig {
        online_memory_enabled: true,
        ..testing::run_config(None)
    };
    let (deps, _) = testing::deps();
    let memory = deps.memory.clone();
    let before = memory.read().len();
    let agent = Agent::new(deps, cfg).unwrap();
    agent.run_trajectory(&testing::query("q1"));
    let store = memory.read();
    assert!(store.len() > before);
    let online: Vec<_> = store
        .entries()
        .filter(|e| e.entry_id.ends_with("@online"))
        .collect();
    assert!(online
        .iter()
        .any(|e| e.entry_id == "q1#2@online" && e.label == OutcomeLabel::Failure));
    assert!(online
        .iter()
        .filter(|e| e.entry_id != "q1#2@online")
        .all(|e| e.label == OutcomeLabel::Success));
}

#[test]
fn batch_is_schedule_independent() {
    let queries: Vec<Query> = (0..10).map(|i| testing::query(&format!("q{i}"))).collect();
    let run = |parallelism: usize| {
        let dir = tempfile::tempdir().unwrap();
        let (agent, _) = agent_with(testing::run_config(Some(dir.path().to_path_buf())));
        let report = agent.run_batch(&queries, parallelism);
        let logs: Vec<String> = queries
            .iter()
            .map(|q| std::fs::read_to_string(dir.path().join(log_file_name(&q.id))).unwrap())
            .collect();
        (report, logs)
    };
    let (r1, logs1) = run(1);
    let (r4, logs4) = run(4);
    assert_eq!(logs1, logs4);
    assert_eq!(r1.summary.n, 10);
    assert_eq!(r1.summary.answered, 10);
    assert_eq!(r1.summary.retrieval_steps, 20);
    assert_eq!(r1.summary.anomalies, 10);
    assert_eq!(r1.summary.critiques, 10);
    assert_eq!(r1.summary.critic_calls, 10);
    assert!((r1.summary.mean_steps - 3.0).abs() < 1e-12);
    assert_eq!(r4.summary.anomalies, r1.summary.anomalies);
    let ids: Vec<_> = r4.trajectories.iter().map(|t| t.query.id.clone()).collect();
    let expected: Vec<_> = queries.iter().map(|q| q.id.clone()).collect();
    assert_eq!(ids, expected);
}

#[test]
fn empty_batch() {
    let (agent, _) = agent_with(testing::run_config(None));
    let report = agent.run_batch(&[], 4);
    assert!(report.trajectories.is_empty());
    assert_eq!(report.summary.n, 0);
    assert!(report.summary.failures.is_empty());
}

#[test]
fn header_records_defaults() {
    let (agent, _) = agent_with(RunConfig::default());
    let h = agent.header();
    assert_eq!(h.doc_top_k, 5);
    assert_eq!(h.k_per_pool, 2);
    assert_eq!(h.anomaly_k, 2.0);
    assert_eq!(h.calibration.unwrap().k, 2.0);
}
