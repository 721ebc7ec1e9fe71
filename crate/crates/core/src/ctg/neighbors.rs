use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CtgError;
use crate::services::EmbeddingVector;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, CtgError> {
    if a.dim() != b.dim() {
        return Err(CtgError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (norm(&a.values), norm(&b.values));
    if na == 0.0 || nb == 0.0 {
        return Err(CtgError::ZeroNorm(None));
    }
    Ok(cosine_from_parts(dot(&a.values, &b.values), na, nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub item_id: String,
    /// Descending by similarity, ties by item id.
    pub neighbors: Vec<(String, f64)>,
    /// Fewer than the requested `k` candidates were available.
    #[serde(default)]
    pub shortfall: bool,
}

/// Exact nearest-neighbor search by cosine similarity over a fixed set of
/// item embeddings. Every query is a full scan.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn new(entries: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Result<Self, CtgError> {
        let mut entries: Vec<(String, EmbeddingVector)> = entries.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        let dim = entries.first().map(|(_, v)| v.dim()).unwrap_or(0);
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut norms = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            if v.dim() != dim {
                return Err(CtgError::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            let n = norm(&v.values);
            if n == 0.0 || !n.is_finite() {
                return Err(CtgError::ZeroNorm(Some(id)));
            }
            ids.push(id);
            vectors.push(v.values);
            norms.push(n);
        }
        let positions = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            ids,
            vectors,
            norms,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.positions.contains_key(item_id)
    }

    /// Top `k` other items by cosine similarity; ties go to the smaller id.
    pub fn top_k(&self, item_id: &str, k: usize) -> Result<NeighborSet, CtgError> {
        let &q = self
            .positions
            .get(item_id)
            .ok_or_else(|| CtgError::MissingEmbedding(item_id.to_owned()))?;
        let query = &self.vectors[q];
        let mut scored: Vec<(f64, usize)> = (0..self.ids.len())
            .filter(|&j| j != q)
            .map(|j| {
                let s = cosine_from_parts(dot(query, &self.vectors[j]), self.norms[q], self.norms[j]);
                (s, j)
            })
            .collect();
        // ids are sorted, so a smaller index is the lexicographically smaller id.
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        };
        let shortfall = scored.len() < k;
        if scored.len() > k && k > 0 {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        } else if k == 0 {
            scored.clear();
        }
        scored.sort_by(order);
        Ok(NeighborSet {
            item_id: item_id.to_owned(),
            neighbors: scored
                .into_iter()
                .map(|(s, j)| (self.ids[j].clone(), s))
                .collect(),
            shortfall,
        })
    }

    /// [`EmbeddingIndex::top_k`] for many items in parallel, in input order.
    pub fn top_k_many(&self, item_ids: &[&str], k: usize) -> Result<Vec<NeighborSet>, CtgError> {
        item_ids.par_iter().map(|id| self.top_k(id, k)).collect()
    }
}

/// One-off neighbor query over a map of embeddings.
pub fn top_k_neighbors<'a>(
    item_id: &str,
    embeddings: impl IntoIterator<Item = (&'a String, &'a EmbeddingVector)>,
    k: usize,
) -> Result<NeighborSet, CtgError> {
    let index = EmbeddingIndex::new(embeddings.into_iter().map(|(id, v)| (id.clone(), v.clone())))?;
    index.top_k(item_id, k)
}
