use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{write_log, Agent};
use crate::trajectory::{Query, Termination, Trajectory};

pub const BATCH_SUMMARY_FILE: &str = "batch_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BatchSummary {
    pub n: usize,
    pub answered: usize,
    pub retrieval_steps: usize,
    pub anomalies: usize,
    pub critiques: usize,
    pub critic_calls: u64,
    /// Anomalies per retrieval step.
    pub anomaly_rate: f64,
    /// Critiques per retrieval step.
    pub critic_trigger_rate: f64,
    pub mean_steps: f64,
    pub wall_time_secs: f64,
    pub failures: Vec<QueryFailure>,
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    /// In input order.
    pub trajectories: Vec<Trajectory>,
    pub summary: BatchSummary,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl BatchSummary {
    pub fn from_trajectories(trajectories: &[Trajectory], critic_calls: u64) -> Self {
        let sessions = || trajectories.iter().flat_map(|t| t.sessions.iter());
        let retrieval_steps = sessions().filter(|s| !s.documents.is_empty()).count();
        let anomalies = sessions()
            .filter(|s| s.signals.map(|x| x.anomaly).unwrap_or(false))
            .count();
        let critiques = sessions().filter(|s| s.critique.is_some()).count();
        let total_steps = sessions().count();
        Self {
            n: trajectories.len(),
            answered: trajectories
                .iter()
                .filter(|t| t.termination == Termination::Answered)
                .count(),
            retrieval_steps,
            anomalies,
            critiques,
            critic_calls,
            anomaly_rate: ratio(anomalies, retrieval_steps),
            critic_trigger_rate: ratio(critiques, retrieval_steps),
            mean_steps: ratio(total_steps, trajectories.len()),
            wall_time_secs: 0.0,
            failures: Vec::new(),
        }
    }
}

impl Agent {
    /// Run queries with at most `parallelism` in flight. Logs are written per
    /// query; memory writes go through the store's lock. Failures are reported,
    /// never propagated.
    pub fn run_batch(&self, queries: &[Query], parallelism: usize) -> BatchReport {
        let started = Instant::now();
        let parallelism = parallelism.max(1).min(queries.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<(Trajectory, u32, Option<String>)>>> =
            Mutex::new(vec![None; queries.len()]);
        std::thread::scope(|scope| {
            for _ in 0..parallelism {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(query) = queries.get(i) else { break };
                    let (trajectory, calls) = self.run_inner(query);
                    let log_error = self
                        .cfg
                        .log_dir
                        .as_ref()
                        .and_then(|dir| write_log(&trajectory, dir).err())
                        .map(|e| format!("log not written: {e}"));
                    slots.lock()[i] = Some((trajectory, calls, log_error));
                });
            }
        });
        let mut trajectories = Vec::with_capacity(queries.len());
        let mut failures = Vec::new();
        let mut critic_calls = 0u64;
        for (trajectory, calls, log_error) in slots.into_inner().into_iter().flatten() {
            critic_calls += u64::from(calls);
            if trajectory.termination == Termination::BackendError {
                failures.push(QueryFailure {
                    query_id: trajectory.query.id.clone(),
                    reason: "policy backend failure".into(),
                });
            }
            if let Some(reason) = log_error {
                failures.push(QueryFailure {
                    query_id: trajectory.query.id.clone(),
                    reason,
                });
            }
            trajectories.push(trajectory);
        }
        let mut summary = BatchSummary::from_trajectories(&trajectories, critic_calls);
        summary.failures = failures;
        summary.wall_time_secs = started.elapsed().as_secs_f64();
        if let Some(dir) = &self.cfg.log_dir {
            let path = dir.join(BATCH_SUMMARY_FILE);
            let written = std::fs::create_dir_all(dir).and_then(|_| {
                std::fs::write(
                    &path,
                    serde_json::to_string_pretty(&summary).expect("summary serializes"),
                )
            });
            if let Err(e) = written {
                log::warn!("could not write {}: {e}", path.display());
            }
        }
        BatchReport {
            trajectories,
            summary,
        }
    }
}
