//! Recompute stored signals from a log's raw documents and logprobs.

use serde::Serialize;

use crate::backends::EmbeddingBackend;
use crate::calibration::CalibrationModel;
use crate::signals::{measure, ClusterParams};
use crate::trajectory::Trajectory;

pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub session: u32,
    pub field: &'static str,
    pub stored: f64,
    pub recomputed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Unverifiable {
    pub session: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ReplayReport {
    pub verified: usize,
    pub mismatches: Vec<Mismatch>,
    pub unverifiable: Vec<Unverifiable>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REPLAY_TOLERANCE
}

/// Compare every stored signal against a fresh computation. The log
/// header's calibration and clustering settings win over `fallback_*`.
pub fn replay(
    trajectory: &Trajectory,
    embedder: &dyn EmbeddingBackend,
    fallback_calibration: Option<&CalibrationModel>,
    fallback_params: &ClusterParams,
) -> ReplayReport {
    let header = trajectory.run.as_ref();
    let calibration = header
        .and_then(|h| h.calibration.as_ref())
        .or(fallback_calibration);
    let params = header
        .map(|h| ClusterParams {
            d_merge: h.d_merge,
            mass_weighting: h.mass_weighting,
        })
        .unwrap_or(*fallback_params);
    if let Some(id) = header.and_then(|h| h.embedding_model_id.as_deref()) {
        if id != embedder.model_id() {
            log::warn!(
                "log was produced with embedder {id}, replaying with {}",
                embedder.model_id()
            );
        }
    }

    let mut report = ReplayReport::default();
    for s in &trajectory.sessions {
        let unverifiable = |reason: &str| Unverifiable {
            session: s.index,
            reason: reason.to_string(),
        };
        let Some(stored) = s.signals else {
            report.unverifiable.push(unverifiable("no stored signals"));
            continue;
        };
        let Some(calibration) = calibration else {
            report
                .unverifiable
                .push(unverifiable("no calibration model in log header or config"));
            continue;
        };
        if s.reasoning_token_logprobs.is_empty() {
            report.unverifiable.push(unverifiable("reasoning logprobs missing"));
            continue;
        }
        let (se, re) = match measure(s, embedder, &params) {
            Ok(m) => m,
            Err(e) => {
                report.unverifiable.push(unverifiable(&e.to_string()));
                continue;
            }
        };
        let re_hat = calibration.predict(se);
        let epsilon = calibration.residual(se, re);
        let anomaly = calibration.is_anomaly(epsilon);
        let mut push = |field, stored: f64, recomputed: f64| {
            if !close(stored, recomputed) {
                report.mismatches.push(Mismatch {
                    session: s.index,
                    field,
                    stored,
                    recomputed,
                });
            }
        };
        push("se", stored.se, se);
        push("re", stored.re, re);
        push("re_hat", stored.re_hat, re_hat);
        push("epsilon", stored.epsilon, epsilon);
        if stored.anomaly != anomaly {
            report.mismatches.push(Mismatch {
                session: s.index,
                field: "anomaly",
                stored: f64::from(u8::from(stored.anomaly)),
                recomputed: f64::from(u8::from(anomaly)),
            });
        }
        report.verified += 1;
    }
    report
}
