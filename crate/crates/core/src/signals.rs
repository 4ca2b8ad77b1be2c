//! Searching entropy (SE) over clustered retrieval evidence and reasoning
//! entropy (RE) over the policy's top-K token distributions. All entropies
//! are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend};
use crate::calibration::CalibrationModel;
use crate::embedding::{cosine_distance, Embedding};
use crate::trajectory::{Session, TokenCandidate};

pub const DEFAULT_D_MERGE: f64 = 0.35;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("no embeddings to cluster")]
    EmptyInput,
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embedding {0} has non-finite entries")]
    NonFinite(usize),
    #[error("reasoning segment has no token positions")]
    EmptyReasoning,
    #[error("position {0} has no candidate with finite log-probability")]
    DegenerateDistribution(usize),
    #[error("position {0} has a NaN or +inf log-probability")]
    InvalidLogprob(usize),
    #[error("session {0} has no retrieved documents")]
    NoDocuments(u32),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// How per-document mass is aggregated into cluster mass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassWeighting {
    /// Every document contributes `1/K`.
    #[default]
    Uniform,
    /// Document at rank `r` contributes proportionally to `1/r`.
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Single-linkage merge threshold on cosine distance.
    pub d_merge: f64,
    #[serde(default)]
    pub mass_weighting: MassWeighting,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            d_merge: DEFAULT_D_MERGE,
            mass_weighting: MassWeighting::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Dense cluster id per document, numbered by first appearance.
    pub labels: Vec<usize>,
    pub cluster_count: usize,
    pub masses: Vec<f64>,
}

impl ClusterAssignment {
    /// Recompute masses with `1/rank` document weights. `ranks` are 1-based
    /// and aligned with `labels`.
    pub fn with_rank_weights(mut self, ranks: &[u32]) -> Self {
        debug_assert_eq!(ranks.len(), self.labels.len());
        let weights: Vec<f64> = ranks.iter().map(|r| 1.0 / f64::from((*r).max(1))).collect();
        let total: f64 = weights.iter().sum();
        let mut masses = vec![0.0; self.cluster_count];
        for (label, w) in self.labels.iter().zip(&weights) {
            masses[*label] += w / total;
        }
        self.masses = masses;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySignals {
    pub se: f64,
    pub re: f64,
    pub re_hat: f64,
    pub epsilon: f64,
    pub anomaly: bool,
}

impl UncertaintySignals {
    pub fn from_measurements(se: f64, re: f64, calibration: &CalibrationModel) -> Self {
        let re_hat = calibration.predict(se);
        let epsilon = calibration.residual(se, re);
        Self {
            se,
            re,
            re_hat,
            epsilon,
            anomaly: calibration.is_anomaly(epsilon),
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins so the result is independent of merge order.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage agglomerative clustering over cosine distance: documents
/// whose distance is at most `d_merge` are linked, and clusters are the
/// connected components of that graph. Every document lands in a cluster.
pub fn cluster_documents(
    embeddings: &[Embedding],
    params: &ClusterParams,
) -> Result<ClusterAssignment, SignalError> {
    let first = embeddings.first().ok_or(SignalError::EmptyInput)?;
    let dim = first.dim();
    for (i, e) in embeddings.iter().enumerate() {
        if e.dim() != dim {
            return Err(SignalError::DimMismatch {
                expected: dim,
                found: e.dim(),
            });
        }
        if !e.is_finite() {
            return Err(SignalError::NonFinite(i));
        }
    }

    let n = embeddings.len();
    let mut dsu = DisjointSet::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if cosine_distance(embeddings[i].values(), embeddings[j].values()) <= params.d_merge {
                dsu.union(i, j);
            }
        }
    }

    let mut root_to_label = vec![usize::MAX; n];
    let mut labels = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..n {
        let root = dsu.find(i);
        if root_to_label[root] == usize::MAX {
            root_to_label[root] = counts.len();
            counts.push(0);
        }
        let label = root_to_label[root];
        counts[label] += 1;
        labels.push(label);
    }
    let masses = counts.iter().map(|c| *c as f64 / n as f64).collect();
    Ok(ClusterAssignment {
        labels,
        cluster_count: counts.len(),
        masses,
    })
}

/// Shannon entropy of the cluster-mass distribution.
pub fn searching_entropy(assignment: &ClusterAssignment) -> f64 {
    let h: f64 = assignment
        .masses
        .iter()
        .filter(|m| **m > 0.0)
        .map(|m| -m * m.ln())
        .sum();
    h.max(0.0)
}

/// Entropy of one position after renormalizing its top-K probabilities.
pub fn position_entropy(candidates: &[TokenCandidate]) -> Option<f64> {
    let max = candidates
        .iter()
        .map(|c| c.logprob)
        .filter(|lp| lp.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = candidates.iter().map(|c| (c.logprob - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let h: f64 = weights
        .iter()
        .filter(|w| **w > 0.0)
        .map(|w| {
            let p = w / z;
            -p * p.ln()
        })
        .sum();
    Some(h.max(0.0))
}

/// Mean per-position entropy over the reasoning segment.
pub fn reasoning_entropy(positions: &[Vec<TokenCandidate>]) -> Result<f64, SignalError> {
    if positions.is_empty() {
        return Err(SignalError::EmptyReasoning);
    }
    let mut total = 0.0;
    for (i, pos) in positions.iter().enumerate() {
        if pos
            .iter()
            .any(|c| c.logprob.is_nan() || c.logprob == f64::INFINITY)
        {
            return Err(SignalError::InvalidLogprob(i));
        }
        total += position_entropy(pos).ok_or(SignalError::DegenerateDistribution(i))?;
    }
    Ok(total / positions.len() as f64)
}

/// Raw (SE, RE) for a retrieval session, before calibration.
pub fn measure(
    session: &Session,
    embedder: &dyn EmbeddingBackend,
    params: &ClusterParams,
) -> Result<(f64, f64), SignalError> {
    if session.documents.is_empty() {
        return Err(SignalError::NoDocuments(session.index));
    }
    let re = reasoning_entropy(&session.reasoning_token_logprobs)?;
    let texts: Vec<String> = session
        .documents
        .iter()
        .map(|d| d.embedding_text())
        .collect();
    let embeddings = embedder.embed(&texts)?;
    let mut assignment = cluster_documents(&embeddings, params)?;
    if params.mass_weighting == MassWeighting::Rank {
        let ranks: Vec<u32> = session.documents.iter().map(|d| d.rank).collect();
        assignment = assignment.with_rank_weights(&ranks);
    }
    Ok((searching_entropy(&assignment), re))
}

/// Full fast-monitor evaluation of one retrieval session. Pure: the session
/// is not modified.
pub fn compute_signals(
    session: &Session,
    embedder: &dyn EmbeddingBackend,
    calibration: &CalibrationModel,
    params: &ClusterParams,
) -> Result<UncertaintySignals, SignalError> {
    let (se, re) = measure(session, embedder, params)?;
    Ok(UncertaintySignals::from_measurements(se, re, calibration))
}
