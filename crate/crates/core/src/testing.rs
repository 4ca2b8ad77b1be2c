//! Deterministic fixtures: a fully scripted three-step search scenario.
//!
//! Step 1 searches and gets five copies of one document (SE = 0) while
//! reasoning with low entropy. Step 2 searches again and gets two unrelated
//! groups of sizes 3 and 2 (SE = H(0.6, 0.4)) while its reasoning has
//! entropy 3.0, so the gate trips and the critic is consulted. Step 3 sees
//! the critic's guidance and answers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::backends::{
    write_corpus_entry, EmbeddingBackend, FixtureSearch, HashEmbedder, ScriptRule, ScriptedChat,
    ScriptedResponse,
};
use crate::calibration::{CalibrationFile, CalibrationModel, SigmaEstimate};
use crate::critic::Critic;
use crate::memory::{
    build_entry, save_store, EntryContext, MemoryStore, Origin, TemplateAbstractor,
    DEFAULT_TAU_DUP,
};
use crate::orchestrator::{Deps, RunConfig};
use crate::trajectory::{Action, Outcome, Query, RetrievedDocument, Session};

pub const QUERY_TEXT: &str = "In which year was the Eiffel Tower completed?";
pub const ANSWER: &str = "1889";
pub const FIRST_SEARCH: &str = "Eiffel Tower completion year";
pub const SECOND_SEARCH: &str = "Eiffel Tower construction history";
pub const DELTA: &str =
    "The second search mixed construction history with later antenna additions; confirm the completion date against the first result before answering.";
/// Present only in critic prompts.
pub const CRITIC_MARKER: &str = "You are the critical model supervising";

pub const FIRST_ENTROPY: f64 = 0.2;
pub const SECOND_ENTROPY: f64 = 3.0;
pub const ANSWER_ENTROPY: f64 = 0.1;
pub const CANDIDATES: usize = 25;

pub const GROUP_A: &str = "Gustave Eiffel's company designed and built the wrought-iron lattice tower as the entrance arch for the 1889 World's Fair in Paris.";
pub const GROUP_B: &str = "Radio transmission antennas mounted on the summit during the twentieth century increased its overall height to 330 metres.";
pub const FIRST_DOC: &str = "The Eiffel Tower was completed in March 1889 and opened to the public that May.";

/// a = 1, b = 0, σ = 0.3, k = 2, so τ = 0.6.
pub fn calibration() -> CalibrationModel {
    CalibrationModel::new(1.0, 0.0, 0.3, 2.0)
}

fn search_call(query: &str) -> String {
    format!(
        "<tool_call>{{\"name\": \"search\", \"arguments\": {{\"query\": \"{query}\"}}}}</tool_call>"
    )
}

pub fn step1_text() -> String {
    format!(
        "<think>I should look up when the Eiffel Tower was finished.</think>\n{}",
        search_call(FIRST_SEARCH)
    )
}

pub fn step2_text() -> String {
    format!(
        "<think>Maybe the date differs depending on which part of the structure counts, perhaps the antennas or perhaps the original arch, so I am unsure and will search more broadly.</think>\n{}",
        search_call(SECOND_SEARCH)
    )
}

pub fn answer_with_guidance() -> String {
    format!("<think>The guidance says to trust the first result, which gives March 1889.</think>\n<answer>{ANSWER}</answer>")
}

pub fn answer_without_guidance() -> String {
    format!("<think>The first result states the completion year directly.</think>\n<answer>{ANSWER}</answer>")
}

pub fn critic_reply() -> String {
    format!(
        "```json\n{{\"error\": true, \"suggestion\": \"{DELTA}\", \"rationale\": \"High reasoning uncertainty on fragmented evidence.\"}}\n```"
    )
}

/// Rules for the policy and the critic. The critic rule comes first because
/// critic requests carry no assistant turns.
pub fn script_rules() -> Vec<ScriptRule> {
    vec![
        ScriptRule::respond(ScriptedResponse::text(critic_reply())).containing(CRITIC_MARKER),
        ScriptRule::respond(ScriptedResponse::with_entropy(step1_text(), FIRST_ENTROPY, CANDIDATES))
            .on_turn(0),
        ScriptRule::respond(ScriptedResponse::with_entropy(step2_text(), SECOND_ENTROPY, CANDIDATES))
            .on_turn(1),
        ScriptRule::respond(ScriptedResponse::with_entropy(
            answer_with_guidance(),
            ANSWER_ENTROPY,
            CANDIDATES,
        ))
        .on_turn(2)
        .containing(DELTA),
        ScriptRule::respond(ScriptedResponse::with_entropy(
            answer_without_guidance(),
            ANSWER_ENTROPY,
            CANDIDATES,
        ))
        .on_turn(2),
    ]
}

pub fn chat() -> ScriptedChat {
    ScriptedChat::new(script_rules())
}

fn doc(id: &str, title: &str, content: &str) -> RetrievedDocument {
    RetrievedDocument {
        doc_id: id.into(),
        title: title.into(),
        content: content.into(),
        rank: 0,
    }
}

/// Search results for the two scripted queries.
pub fn search_results() -> Vec<(&'static str, Vec<RetrievedDocument>)> {
    let first = (1..=5)
        .map(|i| doc(&format!("tower-{i}"), "", FIRST_DOC))
        .collect();
    let second = vec![
        doc("build-1", "", GROUP_A),
        doc("antenna-1", "", GROUP_B),
        doc("build-2", "", GROUP_A),
        doc("antenna-2", "", GROUP_B),
        doc("build-3", "", GROUP_A),
    ];
    vec![(FIRST_SEARCH, first), (SECOND_SEARCH, second)]
}

pub fn search() -> FixtureSearch {
    let mut s = FixtureSearch::new();
    for (q, docs) in search_results() {
        s.add(q, docs);
    }
    s
}

pub fn embedder() -> HashEmbedder {
    HashEmbedder::default()
}

fn past_session(index: u32, query: &str, observation: &str) -> Session {
    let mut arguments = serde_json::Map::new();
    arguments.insert("query".into(), query.into());
    Session {
        index,
        reasoning_text: format!("Searching for {query}."),
        reasoning_token_logprobs: vec![],
        action: Action::ToolCall {
            tool_name: "search".into(),
            arguments,
        },
        documents: vec![],
        tool_observation: observation.into(),
        signals: None,
        critique: None,
        injected_guidance: None,
    }
}

/// A small store with one success and one failure experience.
pub fn memory(embedder: &dyn EmbeddingBackend) -> MemoryStore {
    let mut store = MemoryStore::new(embedder.dim(), DEFAULT_TAU_DUP, embedder.model_id());
    let seeds = [
        (
            "past-success",
            "When was the Statue of Liberty dedicated",
            "The statue was dedicated on October 28, 1886.",
            Outcome::Success,
        ),
        (
            "past-failure",
            "Height of the Empire State Building with antenna",
            "Sources disagree: 381 m roof, 443 m tip.",
            Outcome::Failure,
        ),
    ];
    for (id, q, obs, outcome) in seeds {
        let ctx = EntryContext {
            trajectory_id: id,
            query_text: q,
            origin: Origin::Offline,
            created_at: 0,
        };
        let entry = build_entry(
            &ctx,
            &past_session(1, q, obs),
            &[],
            outcome,
            &TemplateAbstractor,
            embedder,
        )
        .expect("seed entry builds");
        store.insert(entry).expect("seed entry inserts");
    }
    store
}

pub fn query(id: &str) -> Query {
    let mut q = Query::new(id, QUERY_TEXT);
    q.metadata.insert("answer".into(), ANSWER.into());
    q
}

pub fn run_config(log_dir: Option<PathBuf>) -> RunConfig {
    RunConfig {
        max_steps: 5,
        log_dir,
        ..RunConfig::default()
    }
}

/// Dependencies wired to fresh scripted backends. The returned chat handle
/// records every request.
pub fn deps() -> (Deps, Arc<ScriptedChat>) {
    let chat = Arc::new(chat());
    let embedder = Arc::new(embedder());
    let deps = Deps {
        policy: chat.clone(),
        critic_chat: chat.clone(),
        memory: memory(embedder.as_ref()).into_shared(),
        embedder,
        search: Arc::new(search()),
        calibration: Some(calibration()),
        critic: Critic::default(),
        abstractor: Some(Arc::new(TemplateAbstractor)),
        clock: || 0,
    };
    (deps, chat)
}

/// Paths of an on-disk copy of the scenario.
#[derive(Debug, Clone)]
pub struct ScenarioFiles {
    pub config: PathBuf,
    pub script: PathBuf,
    pub corpus: PathBuf,
    pub calibration: PathBuf,
    pub memory: PathBuf,
    pub log_dir: PathBuf,
}

/// Write script, corpus, calibration, memory store and a config file under
/// `dir`. `monitor_overrides` is appended to the `[monitor]` table.
pub fn write_files(dir: &Path, monitor_overrides: &str) -> std::io::Result<ScenarioFiles> {
    std::fs::create_dir_all(dir)?;
    let files = ScenarioFiles {
        config: dir.join("config.toml"),
        script: dir.join("script.json"),
        corpus: dir.join("corpus"),
        calibration: dir.join("calibration.json"),
        memory: dir.join("memory.jsonl"),
        log_dir: dir.join("logs"),
    };
    std::fs::write(&files.script, chat().to_json())?;
    for (q, docs) in search_results() {
        write_corpus_entry(&files.corpus, q, &docs)?;
    }
    CalibrationFile {
        model: calibration(),
        fitted_at: 0,
        source_log_paths: vec![],
        sigma_estimate: SigmaEstimate::SameSet,
    }
    .save(&files.calibration)
    .map_err(std::io::Error::other)?;
    save_store(&memory(&embedder()), &files.memory).map_err(std::io::Error::other)?;
    let config = format!(
        r#"seed = 0

[backends]
abstractor = "template"

[backends.policy]
kind = "scripted"
script = "script.json"

[backends.embedding]
kind = "hash"

[backends.search]
kind = "fixture"

[monitor]
max_steps = 5
{monitor_overrides}

[paths]
calibration = "calibration.json"
memory = "memory.jsonl"
log_dir = "logs"
fixture_corpus = "corpus"
"#
    );
    std::fs::write(&files.config, config)?;
    Ok(files)
}
