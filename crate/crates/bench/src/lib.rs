//! Synthetic inputs for the monitor benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metacog_core::memory::{Abstraction, Origin, Provenance, SessionSnapshot};
use metacog_core::{CalibrationPoint, Embedding, MemoryEntry, MemoryStore, OutcomeLabel, TokenCandidate};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` document embeddings drawn around `groups` random centers.
pub fn document_embeddings(rng: &mut ChaCha8Rng, n: usize, groups: usize, dim: usize) -> Vec<Embedding> {
    let centers: Vec<Vec<f64>> = (0..groups.max(1))
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let c = &centers[rng.gen_range(0..centers.len())];
            Embedding::new(c.iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect())
        })
        .collect()
}

/// Top-`k` logprob lists for `len` reasoning tokens.
pub fn reasoning_positions(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<Vec<TokenCandidate>> {
    (0..len)
        .map(|_| {
            (0..k)
                .map(|i| TokenCandidate::new(format!("t{i}"), rng.gen_range(-12.0..0.0)))
                .collect()
        })
        .collect()
}

pub fn calibration_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<CalibrationPoint> {
    (0..n)
        .map(|_| {
            let se = rng.gen_range(0.0..2.5);
            CalibrationPoint::new(se, 0.8 * se + 0.5 + rng.gen_range(-0.4..0.4))
        })
        .collect()
}

/// A store with up to `n` random entries split across both pools.
pub fn memory_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> MemoryStore {
    let mut store = MemoryStore::new(dim, 0.95, "bench");
    for i in 0..n {
        let label = if i % 2 == 0 {
            OutcomeLabel::Success
        } else {
            OutcomeLabel::Failure
        };
        let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let entry = MemoryEntry {
            entry_id: format!("e{i}"),
            session_snapshot: SessionSnapshot {
                query: "q".into(),
                reasoning: "r".into(),
                action: "a".into(),
                observation: "o".into(),
            },
            history_summary: "no prior steps".into(),
            abstraction: Abstraction {
                behavior_pattern: "p".into(),
                evidence: "e".into(),
                insight: "i".into(),
            },
            label,
            embedding: Embedding::new(values),
            provenance: Provenance {
                trajectory_id: format!("t{i}"),
                session_index: 1,
                created_at: 0,
                origin: Origin::Offline,
                template_id: "bench".into(),
            },
        };
        store.insert(entry).expect("bench entry is valid");
    }
    store
}

pub fn query_embedding(rng: &mut ChaCha8Rng, dim: usize) -> Embedding {
    Embedding::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}
