//! Command implementations behind the `metacog` binary. Each command writes
//! its human-readable output to the supplied writer and returns an exit code.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use metacog_core::backends::{EmbeddingBackend, HashEmbedder};
use metacog_core::calibration::{fit_with, CalibrationFile, CalibrationPoint, PointSource, SigmaEstimate};
use metacog_core::config::{Config, ConfigError};
use metacog_core::memory::{
    build_entry, load_store, save_store, EntryContext, InsertOutcome, MemoryStore, Origin,
};
use metacog_core::orchestrator::{unix_now, Agent};
use metacog_core::replay::{replay, ReplayReport};
use metacog_core::signals::{measure, ClusterParams};
use metacog_core::trajectory::{deserialize_trajectory, propagate_label, Outcome, Termination};
use metacog_core::{Query, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "metacog", version, about = "Deep-search agent runtime with metacognitive monitoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Answer one query or a file of queries.
    Run(RunArgs),
    /// Build or extend the experience memory from labeled trajectory logs.
    BuildMemory(BuildMemoryArgs),
    /// Fit the SE→RE calibration model from successful trajectories.
    FitCalibration(FitCalibrationArgs),
    /// Summarize a memory store, optionally retrieving for a query.
    InspectMemory(InspectMemoryArgs),
    /// Recompute signals stored in trajectory logs and report differences.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, conflicts_with = "queries", required_unless_present = "queries")]
    pub query: Option<String>,
    #[arg(long, default_value = "q1")]
    pub query_id: String,
    /// Gold answer for exact-match judging of a single query.
    #[arg(long)]
    pub answer: Option<String>,
    /// One query per line: plain text or JSON `{"id", "text", "answer"}`.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long)]
    pub anomaly_k: Option<f64>,
    #[arg(long)]
    pub no_fast_monitor: bool,
    #[arg(long)]
    pub no_slow_monitor: bool,
    #[arg(long)]
    pub online_memory: bool,
    /// Write the memory store back after the run (with online memory).
    #[arg(long)]
    pub save_memory: bool,
}

#[derive(Debug, Args)]
pub struct BuildMemoryArgs {
    #[arg(long)]
    pub logs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Start from an empty store even if `out` exists.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Debug, Args)]
pub struct FitCalibrationArgs {
    #[arg(long)]
    pub logs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = metacog_core::calibration::DEFAULT_ANOMALY_K)]
    pub k: f64,
    /// Needed only to recompute signals missing from the logs.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Estimate sigma on every n-th point, fitting the line on the rest.
    #[arg(long)]
    pub holdout_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectMemoryArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "config")]
    pub query: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A log file or a directory of `.jsonl` logs.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a, out),
        Command::BuildMemory(a) => cmd_build_memory(&a, out),
        Command::FitCalibration(a) => cmd_fit_calibration(&a, out),
        Command::InspectMemory(a) => cmd_inspect_memory(&a, out),
        Command::Replay(a) => cmd_replay(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {}", e.message);
            e.code
        }
    }
}

#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

type CmdResult = Result<i32, CmdError>;

#[derive(Debug, Deserialize)]
struct QueryLine {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    answer: Option<String>,
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::input(format!("{}: {e}", path.display())))?;
    let mut queries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let default_id = format!("q{}", i + 1);
        let q = if line.starts_with('{') {
            let parsed: QueryLine = serde_json::from_str(line).map_err(|e| {
                CmdError::input(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            let mut q = Query::new(parsed.id.unwrap_or(default_id), parsed.text);
            if let Some(a) = parsed.answer {
                q.metadata.insert("answer".into(), a);
            }
            q
        } else {
            Query::new(default_id, line)
        };
        if q.text.trim().is_empty() {
            return Err(CmdError::input(format!("{} line {}: empty query", path.display(), i + 1)));
        }
        queries.push(q);
    }
    Ok(queries)
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> CmdResult {
    let mut config = Config::load(&args.config)?;
    if let Some(dir) = &args.log_dir {
        config.paths.log_dir = Some(dir.clone());
    }
    if let Some(n) = args.max_steps {
        config.monitor.max_steps = n;
    }
    if let Some(k) = args.anomaly_k {
        config.monitor.anomaly_k = k;
    }
    if args.no_fast_monitor {
        config.monitor.fast_monitor_enabled = false;
    }
    if args.no_slow_monitor {
        config.monitor.slow_monitor_enabled = false;
    }
    if args.online_memory {
        config.monitor.online_memory_enabled = true;
    }
    config.validate()?;
    if args.parallelism == 0 {
        return Err(CmdError::input("--parallelism must be at least 1"));
    }

    let queries = match (&args.query, &args.queries) {
        (Some(text), _) => {
            let mut q = Query::new(args.query_id.clone(), text.clone());
            if let Some(a) = &args.answer {
                q.metadata.insert("answer".into(), a.clone());
            }
            vec![q]
        }
        (None, Some(path)) => read_queries(path)?,
        (None, None) => return Err(CmdError::input("either --query or --queries is required")),
    };
    let mut ids = std::collections::BTreeSet::new();
    for q in &queries {
        if !ids.insert(metacog_core::orchestrator::log_file_name(&q.id)) {
            return Err(CmdError::input(format!("duplicate query id {:?}", q.id)));
        }
    }

    let deps = config.build_deps()?;
    let memory = deps.memory.clone();
    let agent = Agent::new(deps, config.run_config()?)
        .map_err(|e| CmdError::input(e.to_string()))?;
    let report = agent.run_batch(&queries, args.parallelism);
    for t in &report.trajectories {
        writeln!(
            out,
            "{}\t{}\t{}",
            t.query.id,
            termination_name(t.termination),
            t.final_answer().unwrap_or("")
        )?;
    }
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&report.summary).expect("summary serializes")
    )?;
    if args.save_memory {
        if let Some(path) = &config.paths.memory {
            save_store(&memory.read(), path).map_err(|e| CmdError::input(e.to_string()))?;
        }
    }
    let all_failed = !report.trajectories.is_empty()
        && report
            .trajectories
            .iter()
            .all(|t| t.termination == Termination::BackendError);
    Ok(if all_failed { EXIT_BACKEND } else { EXIT_OK })
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::Answered => "answered",
        Termination::MaxStepsExceeded => "max_steps_exceeded",
        Termination::BackendError => "backend_error",
        Termination::Aborted => "aborted",
    }
}

/// Every `.jsonl` file in a directory (or the file itself), sorted.
pub fn log_files(path: &Path) -> Result<Vec<PathBuf>, CmdError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path)
        .map_err(|e| CmdError::input(format!("{}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_log(path: &Path) -> Result<Trajectory, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    deserialize_trajectory(&text).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct BuildReport {
    pub logs_read: usize,
    pub unreadable_logs: usize,
    pub skipped_unknown: usize,
    pub entries_built: usize,
    pub inserted: usize,
    pub discarded_duplicates: usize,
    pub abstraction_failures: usize,
    pub success_pool: usize,
    pub failure_pool: usize,
}

pub fn cmd_build_memory(args: &BuildMemoryArgs, out: &mut dyn Write) -> CmdResult {
    let config = Config::load(&args.config)?;
    let embedder = config.embedding_backend()?;
    let abstractor = config.abstractor(config.critic_backend()?)?;
    let mut store = if args.out.exists() && !args.fresh {
        load_store(&args.out).map_err(|e| CmdError::input(e.to_string()))?
    } else {
        MemoryStore::new(embedder.dim(), config.monitor.tau_dup, embedder.model_id())
    };
    if store.embed_dim() != embedder.dim() {
        return Err(CmdError::input(format!(
            "{} has dimension {} but the embedder produces {}",
            args.out.display(),
            store.embed_dim(),
            embedder.dim()
        )));
    }
    let created_at = unix_now();
    let mut report = BuildReport::default();
    let mut labeled = 0;
    for path in log_files(&args.logs)? {
        let trajectory = match read_log(&path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.unreadable_logs += 1;
                continue;
            }
        };
        report.logs_read += 1;
        let Some(label) = trajectory.outcome.label() else {
            report.skipped_unknown += 1;
            continue;
        };
        let Ok(pairs) = propagate_label(&trajectory, label) else {
            continue;
        };
        labeled += 1;
        let outcome = match trajectory.outcome {
            Outcome::Success => Outcome::Success,
            _ => Outcome::Failure,
        };
        let ctx = EntryContext {
            trajectory_id: &trajectory.query.id,
            query_text: &trajectory.query.text,
            origin: Origin::Offline,
            created_at,
        };
        for (i, (session, _)) in pairs.into_iter().enumerate() {
            let entry = match build_entry(
                &ctx,
                session,
                &trajectory.sessions[..i],
                outcome,
                abstractor.as_ref(),
                embedder.as_ref(),
            ) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("{} session {}: {e}", path.display(), session.index);
                    report.abstraction_failures += 1;
                    continue;
                }
            };
            report.entries_built += 1;
            match store.insert(entry) {
                Ok(InsertOutcome::Inserted) => report.inserted += 1,
                Ok(InsertOutcome::DiscardedDuplicate) => report.discarded_duplicates += 1,
                Err(e) => {
                    log::warn!("{} session {}: {e}", path.display(), session.index);
                    report.discarded_duplicates += 1;
                }
            }
        }
    }
    if labeled == 0 {
        return Err(CmdError::input(format!(
            "no Success/Failure-labeled trajectories in {} ({} logs read, {} unknown)",
            args.logs.display(),
            report.logs_read,
            report.skipped_unknown
        )));
    }
    report.success_pool = store.success_pool().len();
    report.failure_pool = store.failure_pool().len();
    save_store(&store, &args.out).map_err(|e| CmdError::input(e.to_string()))?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(EXIT_OK)
}

pub fn cmd_fit_calibration(args: &FitCalibrationArgs, out: &mut dyn Write) -> CmdResult {
    let recompute = match &args.config {
        Some(p) => {
            let c = Config::load(p)?;
            let params = ClusterParams {
                d_merge: c.monitor.d_merge,
                mass_weighting: c.monitor.mass_weighting,
            };
            Some((c.embedding_backend()?, params))
        }
        None => None,
    };
    let mut points = Vec::new();
    let mut sources = Vec::new();
    let mut skipped = 0;
    for path in log_files(&args.logs)? {
        let trajectory = match read_log(&path) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if trajectory.outcome != Outcome::Success {
            continue;
        }
        let before = points.len();
        for s in trajectory.sessions.iter().filter(|s| s.is_retrieval()) {
            let measured = match (&s.signals, &recompute) {
                (Some(sig), _) => Some((sig.se, sig.re)),
                (None, Some((embedder, params))) => measure(s, embedder.as_ref(), params).ok(),
                (None, None) => None,
            };
            match measured {
                Some((se, re)) => points.push(CalibrationPoint {
                    se,
                    re,
                    source: Some(PointSource {
                        trajectory_id: trajectory.query.id.clone(),
                        session_index: s.index,
                    }),
                }),
                None => skipped += 1,
            }
        }
        if points.len() > before {
            sources.push(path.display().to_string());
        }
    }
    if points.len() < 2 {
        return Err(CmdError::input(format!(
            "need at least 2 retrieval steps from Success trajectories, found {} ({} without signals)",
            points.len(),
            skipped
        )));
    }
    let sigma_estimate = match args.holdout_every {
        Some(every) => SigmaEstimate::HoldOut { every },
        None => SigmaEstimate::SameSet,
    };
    let model = fit_with(&points, args.k, sigma_estimate.clone())
        .map_err(|e| CmdError::input(e.to_string()))?;
    let file = CalibrationFile {
        model,
        fitted_at: unix_now(),
        source_log_paths: sources,
        sigma_estimate,
    };
    file.save(&args.out).map_err(|e| CmdError::input(e.to_string()))?;
    writeln!(
        out,
        "a={} b={} sigma={} k={} n_fit={} (skipped {skipped} steps without signals)",
        file.model.a, file.model.b, file.model.sigma, file.model.k, file.model.n_fit
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_inspect_memory(args: &InspectMemoryArgs, out: &mut dyn Write) -> CmdResult {
    let store = load_store(&args.store).map_err(|e| CmdError::input(e.to_string()))?;
    writeln!(
        out,
        "embed_dim={} tau_dup={} embedding_model_id={} success={} failure={}",
        store.embed_dim(),
        store.tau_dup(),
        store.embedding_model_id(),
        store.success_pool().len(),
        store.failure_pool().len()
    )?;
    for e in store.entries() {
        writeln!(
            out,
            "{}\t{:?}\t{}\t{}",
            e.entry_id, e.label, e.provenance.template_id, e.abstraction.behavior_pattern
        )?;
    }
    if let (Some(query), Some(config)) = (&args.query, &args.config) {
        let config = Config::load(config)?;
        let embedder = config.embedding_backend()?;
        let snapshot = metacog_core::memory::SessionSnapshot {
            query: query.clone(),
            reasoning: String::new(),
            action: String::new(),
            observation: String::new(),
        };
        let hits = store
            .retrieve(&snapshot, embedder.as_ref(), args.k)
            .map_err(|e| CmdError::input(e.to_string()))?;
        for (pool, list) in [("success", &hits.success_hits), ("failure", &hits.failure_hits)] {
            for h in list {
                writeln!(out, "hit\t{pool}\t{:.6}\t{}", h.similarity, h.entry.entry_id)?;
            }
        }
    }
    Ok(EXIT_OK)
}

/// Embedder for replay: the configured one, or the hash embedder named in the log header.
fn replay_embedder(
    config: Option<&Config>,
    trajectory: &Trajectory,
) -> Option<Box<dyn EmbeddingBackend>> {
    if let Some(c) = config {
        return c
            .embedding_backend()
            .ok()
            .map(|e| Box::new(e) as Box<dyn EmbeddingBackend>);
    }
    let id = trajectory.run.as_ref()?.embedding_model_id.as_deref()?;
    HashEmbedder::from_model_id(id).map(|e| Box::new(e) as Box<dyn EmbeddingBackend>)
}

#[derive(Debug, Clone, Serialize)]
pub struct FileReplay {
    pub path: String,
    pub report: ReplayReport,
}

/// Replay every log under `path`. Returns per-file reports.
pub fn replay_logs(path: &Path, config: Option<&Config>) -> Result<Vec<FileReplay>, CmdError> {
    let fallback_cal = match config {
        Some(c) => c.calibration(false)?,
        None => None,
    };
    let params = config
        .map(|c| ClusterParams {
            d_merge: c.monitor.d_merge,
            mass_weighting: c.monitor.mass_weighting,
        })
        .unwrap_or_default();
    let mut reports = Vec::new();
    for file in log_files(path)? {
        let trajectory = read_log(&file)
            .map_err(|e| CmdError::input(format!("{}: {e}", file.display())))?;
        let report = match replay_embedder(config, &trajectory) {
            Some(embedder) => replay(&trajectory, embedder.as_ref(), fallback_cal.as_ref(), &params),
            None => ReplayReport {
                verified: 0,
                mismatches: vec![],
                unverifiable: trajectory
                    .sessions
                    .iter()
                    .map(|s| metacog_core::replay::Unverifiable {
                        session: s.index,
                        reason: "no embedder: pass --config".into(),
                    })
                    .collect(),
            },
        };
        reports.push(FileReplay {
            path: file.display().to_string(),
            report,
        });
    }
    Ok(reports)
}

pub fn cmd_replay(args: &ReplayArgs, out: &mut dyn Write) -> CmdResult {
    let config = match &args.config {
        Some(p) => Some(Config::load(p)?),
        None => None,
    };
    let reports = replay_logs(&args.log, config.as_ref())?;
    let mut mismatches = 0;
    for r in &reports {
        mismatches += r.report.mismatches.len();
        writeln!(
            out,
            "{}\tverified={}\tmismatches={}\tunverifiable={}",
            r.path,
            r.report.verified,
            r.report.mismatches.len(),
            r.report.unverifiable.len()
        )?;
        for m in &r.report.mismatches {
            writeln!(
                out,
                "  mismatch session {} {}: stored {} recomputed {}",
                m.session, m.field, m.stored, m.recomputed
            )?;
        }
        for u in &r.report.unverifiable {
            writeln!(out, "  unverifiable session {}: {}", u.session, u.reason)?;
        }
    }
    writeln!(out, "files={} mismatches={mismatches}", reports.len())?;
    Ok(if mismatches == 0 { EXIT_OK } else { EXIT_MISMATCH })
}
