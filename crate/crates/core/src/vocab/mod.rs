//! Term vocabulary statistics and semantic compression onto a fixed set of
//! core terms found by k-means over term embeddings.

mod kmeans;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeansConfig, KMeansResult};

use crate::ctg::{Term, TermIdSequence, TidMap};
use kmeans::sq_dist;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VocabError {
    #[error("identifier map is empty")]
    EmptyTidMap,
    #[error("k = {k} is invalid for {points} points")]
    InvalidK { k: usize, points: usize },
    #[error("vector dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("term {0} has no core-term assignment")]
    UncoveredTerm(String),
    #[error("{terms} terms but {vectors} vectors")]
    LengthMismatch { terms: usize, vectors: usize },
    #[error("only {core} core terms; cannot keep {needed} distinct terms per identifier")]
    TooFewCoreTerms { core: usize, needed: usize },
}

/// Unique terms with occurrence counts over all positions of all identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TermVocabulary {
    pub terms: BTreeMap<Term, usize>,
}

impl TermVocabulary {
    pub fn total_unique(&self) -> usize {
        self.terms.len()
    }

    /// Terms in sorted order.
    pub fn term_list(&self) -> Vec<Term> {
        self.terms.keys().cloned().collect()
    }
}

pub fn build_vocabulary(tids: &TidMap) -> Result<TermVocabulary, VocabError> {
    if tids.is_empty() {
        return Err(VocabError::EmptyTidMap);
    }
    let mut terms = BTreeMap::new();
    for seq in tids.values() {
        for t in seq.terms() {
            *terms.entry(t.clone()).or_insert(0) += 1;
        }
    }
    Ok(TermVocabulary { terms })
}

/// Mapping from every vocabulary term to one of K core terms. Core terms are
/// real vocabulary terms: the nearest still-unused term to each centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreTermMap {
    core_terms: Vec<Term>,
    core_vectors: Vec<Vec<f64>>,
    term_vectors: BTreeMap<Term, Vec<f64>>,
    assignment: BTreeMap<Term, usize>,
}

impl CoreTermMap {
    /// Picks core terms for `centroids` and maps every term to its nearest
    /// core term (a core term always maps to itself).
    pub fn build(
        terms: &[Term],
        vectors: &[Vec<f64>],
        centroids: &[Vec<f64>],
    ) -> Result<Self, VocabError> {
        if terms.len() != vectors.len() {
            return Err(VocabError::LengthMismatch {
                terms: terms.len(),
                vectors: vectors.len(),
            });
        }
        if centroids.is_empty() || centroids.len() > terms.len() {
            return Err(VocabError::InvalidK {
                k: centroids.len(),
                points: terms.len(),
            });
        }
        let mut taken = vec![false; terms.len()];
        let mut core_idx = Vec::with_capacity(centroids.len());
        for c in centroids {
            let best = (0..terms.len())
                .filter(|&i| !taken[i])
                .map(|i| (i, sq_dist(&vectors[i], c)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .unwrap();
            taken[best] = true;
            core_idx.push(best);
        }
        let core_terms: Vec<Term> = core_idx.iter().map(|&i| terms[i].clone()).collect();
        let core_vectors: Vec<Vec<f64>> = core_idx.iter().map(|&i| vectors[i].clone()).collect();
        let self_core: BTreeMap<usize, usize> =
            core_idx.iter().enumerate().map(|(c, &i)| (i, c)).collect();

        let assigned: Vec<usize> = (0..terms.len())
            .into_par_iter()
            .map(|i| {
                self_core
                    .get(&i)
                    .copied()
                    .unwrap_or_else(|| nearest_core(&vectors[i], &core_vectors))
            })
            .collect();
        Ok(Self {
            assignment: terms.iter().cloned().zip(assigned).collect(),
            term_vectors: terms.iter().cloned().zip(vectors.iter().cloned()).collect(),
            core_terms,
            core_vectors,
        })
    }

    pub fn core_terms(&self) -> &[Term] {
        &self.core_terms
    }

    pub fn k(&self) -> usize {
        self.core_terms.len()
    }

    pub fn core_of(&self, term: &Term) -> Option<&Term> {
        self.assignment.get(term).map(|&c| &self.core_terms[c])
    }

    /// Number of vocabulary terms mapped to each core term.
    pub fn member_counts(&self) -> Vec<(Term, usize)> {
        let mut counts = vec![0usize; self.core_terms.len()];
        for &c in self.assignment.values() {
            counts[c] += 1;
        }
        self.core_terms.iter().cloned().zip(counts).collect()
    }

    /// Core-term indices ordered by distance from `term`, its own assignment first.
    fn ranked_cores(&self, term: &Term, first: usize) -> Vec<usize> {
        let v = &self.term_vectors[term];
        let mut rest: Vec<(usize, f64)> = (0..self.core_vectors.len())
            .filter(|&c| c != first)
            .map(|c| (c, sq_dist(v, &self.core_vectors[c])))
            .collect();
        rest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        std::iter::once(first).chain(rest.into_iter().map(|(c, _)| c)).collect()
    }
}

fn nearest_core(v: &[f64], cores: &[Vec<f64>]) -> usize {
    cores
        .iter()
        .enumerate()
        .map(|(c, x)| (c, sq_dist(v, x)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(c, _)| c)
        .unwrap()
}

/// Replaces every term with its core term. When that would repeat a term
/// already used earlier in the same identifier, the next-nearest unused core
/// term is taken instead, so lengths are preserved.
pub fn compress_tids(tids: &TidMap, map: &CoreTermMap) -> Result<TidMap, VocabError> {
    let mut out = TidMap::new();
    for (item, seq) in tids {
        let mut used: Vec<usize> = Vec::with_capacity(seq.len());
        for term in seq.terms() {
            let &core = map
                .assignment
                .get(term)
                .ok_or_else(|| VocabError::UncoveredTerm(term.to_string()))?;
            let pick = if !used.contains(&core) {
                core
            } else {
                map.ranked_cores(term, core)
                    .into_iter()
                    .find(|c| !used.contains(c))
                    .ok_or(VocabError::TooFewCoreTerms {
                        core: map.k(),
                        needed: seq.len(),
                    })?
            };
            used.push(pick);
        }
        let terms = used.into_iter().map(|c| map.core_terms[c].clone()).collect();
        out.insert(
            item.clone(),
            TermIdSequence::new(terms).expect("distinct by construction"),
        );
    }
    Ok(out)
}

/// Summary written next to a compressed identifier file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionMeta {
    pub k: usize,
    pub seed: u64,
    pub iterations: usize,
    pub final_objective: f64,
    pub vocabulary_size: usize,
    pub compressed_vocabulary_size: usize,
    /// Identifier file the compression was applied to.
    pub source: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TermIdSequence {
        TermIdSequence::from_canonical(s).unwrap()
    }

    fn tids(entries: &[(&str, &str)]) -> TidMap {
        entries.iter().map(|(k, v)| (k.to_string(), seq(v))).collect()
    }

    #[test]
    fn vocabulary_counts() {
        let m = tids(&[("a", "A, B, C, D, E"), ("b", "A, B, C, F, G")]);
        let v = build_vocabulary(&m).unwrap();
        assert_eq!(v.total_unique(), 7);
        assert_eq!(v.terms[&Term::from_canonical("A").unwrap()], 2);

        let one = build_vocabulary(&tids(&[("a", "A, B, C, D, E")])).unwrap();
        assert_eq!(one.total_unique(), 5);
        assert!(one.terms.values().all(|&c| c == 1));

        assert_eq!(build_vocabulary(&TidMap::new()), Err(VocabError::EmptyTidMap));
    }

    fn terms(names: &[&str]) -> Vec<Term> {
        names.iter().map(|n| Term::from_canonical(n).unwrap()).collect()
    }

    #[test]
    fn identity_when_k_is_vocabulary_size() {
        let m = tids(&[("a", "A, B, C"), ("b", "C, D, E")]);
        let vocab = build_vocabulary(&m).unwrap();
        let list = vocab.term_list();
        let vectors: Vec<Vec<f64>> = (0..list.len()).map(|i| vec![i as f64, 1.0]).collect();
        let r = kmeans(&vectors, &KMeansConfig::new(list.len(), 5)).unwrap();
        let map = CoreTermMap::build(&list, &vectors, &r.centroids).unwrap();
        assert_eq!(compress_tids(&m, &map).unwrap(), m);
    }

    #[test]
    fn duplicate_core_takes_next_nearest() {
        let list = terms(&["Red", "Crimson", "Blue", "Navy"]);
        let vectors = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.2]];
        // Two centroids: near Red and near Blue.
        let map = CoreTermMap::build(&list, &vectors, &[vec![0.05], vec![10.1]]).unwrap();
        assert_eq!(map.core_of(&list[1]).unwrap().as_str(), "Red");
        let m = tids(&[("x", "Red, Crimson")]);
        let out = compress_tids(&m, &map).unwrap();
        assert_eq!(out["x"].canonical(), "Red, Blue");
        assert_eq!(out["x"].len(), 2);

        let three = tids(&[("x", "Red, Crimson, Blue")]);
        assert!(matches!(
            compress_tids(&three, &map),
            Err(VocabError::TooFewCoreTerms { .. })
        ));
    }

    #[test]
    fn uncovered_term_is_an_error() {
        let list = terms(&["Red"]);
        let map = CoreTermMap::build(&list, &[vec![0.0]], &[vec![0.0]]).unwrap();
        let err = compress_tids(&tids(&[("x", "Green")]), &map).unwrap_err();
        assert_eq!(err, VocabError::UncoveredTerm("Green".into()));
    }

    #[test]
    fn core_terms_are_distinct_vocabulary_members() {
        let list = terms(&["A", "B", "C"]);
        let vectors = vec![vec![0.0], vec![0.0], vec![0.0]];
        let map = CoreTermMap::build(&list, &vectors, &[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(map.core_terms(), &terms(&["A", "B"])[..]);
        let counts: usize = map.member_counts().iter().map(|(_, c)| c).sum();
        assert_eq!(counts, 3);
    }
}
