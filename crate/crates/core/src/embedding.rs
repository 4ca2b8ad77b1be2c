//! Dense embedding vectors and cosine helpers shared by clustering and memory.

use serde::{Deserialize, Serialize};

/// A dense embedding. All vectors compared with each other must share a dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Elementwise sum. Panics on dimension mismatch; callers check dims first.
    pub fn add(&self, other: &Embedding) -> Embedding {
        assert_eq!(self.dim(), other.dim(), "embedding dimension mismatch");
        Embedding(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Cosine similarity clamped to [-1, 1]. A zero vector has similarity 0 with everything.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine_similarity(&self.0, &other.0)
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// `1 - cosine`, in [0, 2].
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_vectors_have_unit_similarity() {
        let a = Embedding::new(vec![1.0, 2.0, 3.0]);
        let b = Embedding::new(vec![2.0, 4.0, 6.0]);
        assert!((a.cosine(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_dissimilar() {
        let a = Embedding::new(vec![0.0, 0.0]);
        let b = Embedding::new(vec![1.0, 0.0]);
        assert_eq!(a.cosine(&b), 0.0);
        assert_eq!(cosine_distance(a.values(), b.values()), 1.0);
    }

    #[test]
    fn opposite_vectors() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-3.0, 0.0]), -1.0);
    }
}
