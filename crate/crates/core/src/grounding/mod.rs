//! Maps generated term sequences back to catalog items.
//!
//! Grounding tries an exact match on the canonical identifier string first.
//! On a miss it falls back to structural scoring: each position `j`
//! (1-based) where the generated term equals the item's term contributes
//! `1 / (j + 1)`, summed over the shorter of the two sequences. The best
//! item wins; ties go to the more popular item, then to the smaller id.
//!
//! Scores are accumulated as integer numerators over a common denominator so
//! that mathematically equal scores compare equal.

mod format;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use format::{read_library, read_library_bytes, write_library, write_library_jsonl, LIBRARY_MAGIC, LIBRARY_VERSION};

use crate::ctg::{parse_lenient, Term, TermIdSequence, TidMap};

/// Longest identifier the library accepts.
pub const MAX_TID_LEN: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("identifier map is empty")]
    EmptyTidMap,
    #[error("identifier for {item_id} has {len} terms; at most {MAX_TID_LEN} are supported")]
    TidTooLong { item_id: String, len: usize },
    #[error("library file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Track {
    Direct,
    Structural,
    None,
}

impl Track {
    pub fn as_str(self) -> &'static str {
        match self {
            Track::Direct => "direct",
            Track::Structural => "structural",
            Track::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub item_id: Option<String>,
    pub track: Track,
    /// Structural score; absent for the other tracks.
    pub score: Option<f64>,
}

impl GroundingResult {
    fn none() -> Self {
        Self {
            item_id: None,
            track: Track::None,
            score: None,
        }
    }
}

/// Items whose identifiers serialize to the same canonical string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collision {
    pub canonical: String,
    pub item_ids: Vec<String>,
}

/// How structural candidates are enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StructuralSearch {
    /// Only items sharing at least one positional term, via posting lists.
    #[default]
    Indexed,
    /// Every item in the library.
    Exhaustive,
}

/// Immutable index over item identifiers. Items are addressed internally by
/// their rank in id order, so a smaller index is a lexicographically smaller id.
#[derive(Debug, Clone)]
pub struct CandidateLibrary {
    item_ids: Vec<String>,
    item_tids: Vec<TermIdSequence>,
    popularity: Vec<u64>,
    direct_index: HashMap<String, Vec<u32>>,
    /// `positional_index[j][term]`: items whose term at 0-based position `j` is `term`.
    positional_index: Vec<HashMap<Term, Vec<u32>>>,
    /// Numerator of `1 / (j + 2)` (0-based `j`) over `denominator`.
    weights: Vec<u128>,
    denominator: u128,
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl CandidateLibrary {
    /// Builds both indexes and reports identifier collisions.
    pub fn build(
        tids: &TidMap,
        popularity: &BTreeMap<String, u64>,
    ) -> Result<(Self, Vec<Collision>), GroundingError> {
        if tids.is_empty() {
            return Err(GroundingError::EmptyTidMap);
        }
        if let Some((id, seq)) = tids.iter().find(|(_, s)| s.len() > MAX_TID_LEN) {
            return Err(GroundingError::TidTooLong {
                item_id: id.clone(),
                len: seq.len(),
            });
        }
        let max_len = tids.values().map(TermIdSequence::len).max().unwrap_or(0);
        let denominator = (2..=max_len as u128 + 1).fold(1u128, |acc, d| acc / gcd(acc, d) * d);
        let weights = (0..max_len).map(|j| denominator / (j as u128 + 2)).collect();

        let mut lib = CandidateLibrary {
            item_ids: Vec::with_capacity(tids.len()),
            item_tids: Vec::with_capacity(tids.len()),
            popularity: Vec::with_capacity(tids.len()),
            direct_index: HashMap::new(),
            positional_index: vec![HashMap::new(); max_len],
            weights,
            denominator,
        };
        // BTreeMap iteration is already in id order.
        for (idx, (item_id, seq)) in tids.iter().enumerate() {
            let idx = idx as u32;
            lib.direct_index.entry(seq.canonical()).or_default().push(idx);
            for (j, term) in seq.terms().iter().enumerate() {
                lib.positional_index[j]
                    .entry(term.clone())
                    .or_default()
                    .push(idx);
            }
            lib.item_ids.push(item_id.clone());
            lib.item_tids.push(seq.clone());
            lib.popularity.push(popularity.get(item_id).copied().unwrap_or(0));
        }
        let mut collisions: Vec<Collision> = lib
            .direct_index
            .iter()
            .filter(|(_, items)| items.len() > 1)
            .map(|(canonical, items)| Collision {
                canonical: canonical.clone(),
                item_ids: items.iter().map(|&i| lib.item_ids[i as usize].clone()).collect(),
            })
            .collect();
        collisions.sort_by(|a, b| a.canonical.cmp(&b.canonical));
        Ok((lib, collisions))
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// Length of the longest stored identifier.
    pub fn max_tid_len(&self) -> usize {
        self.positional_index.len()
    }

    pub fn direct_key_count(&self) -> usize {
        self.direct_index.len()
    }

    /// Number of (position, term) → item entries.
    pub fn positional_entry_count(&self) -> usize {
        self.positional_index
            .iter()
            .flat_map(|m| m.values())
            .map(Vec::len)
            .sum()
    }

    pub fn contains_canonical(&self, canonical: &str) -> bool {
        self.direct_index.contains_key(canonical)
    }

    /// `(item_id, identifier, popularity)` in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &TermIdSequence, u64)> {
        self.item_ids
            .iter()
            .zip(&self.item_tids)
            .zip(&self.popularity)
            .map(|((id, t), &p)| (id.as_str(), t, p))
    }

    pub fn tid_of(&self, item_id: &str) -> Option<&TermIdSequence> {
        self.item_ids
            .binary_search_by(|i| i.as_str().cmp(item_id))
            .ok()
            .map(|i| &self.item_tids[i])
    }

    /// Orders two items for tie-breaking: higher popularity, then smaller id.
    fn better_tiebreak(&self, a: u32, b: u32) -> bool {
        let (pa, pb) = (self.popularity[a as usize], self.popularity[b as usize]);
        pa > pb || (pa == pb && a < b)
    }

    /// Exact canonical-string lookup.
    pub fn ground_direct(&self, generated: &TermIdSequence) -> GroundingResult {
        let Some(items) = self.direct_index.get(&generated.canonical()) else {
            return GroundingResult::none();
        };
        let best = items
            .iter()
            .copied()
            .reduce(|a, b| if self.better_tiebreak(b, a) { b } else { a })
            .unwrap();
        GroundingResult {
            item_id: Some(self.item_ids[best as usize].clone()),
            track: Track::Direct,
            score: None,
        }
    }

    pub fn ground_structural(&self, generated: &TermIdSequence) -> GroundingResult {
        self.ground_structural_with(generated, StructuralSearch::Indexed)
    }

    /// Integer score numerator of one item against `generated`.
    fn score_numerator(&self, generated: &TermIdSequence, item: usize) -> u128 {
        generated
            .terms()
            .iter()
            .zip(self.item_tids[item].terms())
            .enumerate()
            .filter(|(_, (g, t))| g == t)
            .map(|(j, _)| self.weights[j])
            .sum()
    }

    pub fn ground_structural_with(
        &self,
        generated: &TermIdSequence,
        search: StructuralSearch,
    ) -> GroundingResult {
        let scored: Vec<(u32, u128)> = match search {
            StructuralSearch::Indexed => {
                let mut acc: HashMap<u32, u128> = HashMap::new();
                for (j, term) in generated.terms().iter().enumerate().take(self.max_tid_len()) {
                    if let Some(items) = self.positional_index[j].get(term) {
                        for &item in items {
                            *acc.entry(item).or_insert(0) += self.weights[j];
                        }
                    }
                }
                acc.into_iter().collect()
            }
            StructuralSearch::Exhaustive => (0..self.item_ids.len())
                .map(|i| (i as u32, self.score_numerator(generated, i)))
                .collect(),
        };
        let best = scored.into_iter().filter(|(_, s)| *s > 0).reduce(|a, b| {
            if b.1 > a.1 || (b.1 == a.1 && self.better_tiebreak(b.0, a.0)) {
                b
            } else {
                a
            }
        });
        match best {
            None => GroundingResult::none(),
            Some((item, num)) => GroundingResult {
                item_id: Some(self.item_ids[item as usize].clone()),
                track: Track::Structural,
                score: Some(num as f64 / self.denominator as f64),
            },
        }
    }

    /// Direct mapping, falling back to structural mapping on a miss.
    pub fn ground(&self, generated: &TermIdSequence) -> GroundingResult {
        let direct = self.ground_direct(generated);
        if direct.track == Track::Direct {
            direct
        } else {
            self.ground_structural(generated)
        }
    }

    /// Parses and grounds a raw candidate string. Unparseable strings ground
    /// to nothing.
    pub fn ground_raw(&self, raw: &str) -> (Option<TermIdSequence>, GroundingResult) {
        match parse_lenient(raw, self.max_tid_len().max(1)) {
            Ok(seq) => {
                let r = self.ground(&seq);
                (Some(seq), r)
            }
            Err(_) => (None, GroundingResult::none()),
        }
    }

    /// Grounds ranked decoder candidates into at most `k` distinct items,
    /// keeping each item's best-ranked occurrence.
    pub fn ground_beam(&self, candidates: &[String], k: usize) -> BeamGrounding {
        let mut items: Vec<String> = Vec::new();
        let mut outcomes = Vec::with_capacity(candidates.len());
        for raw in candidates {
            let (seq, result) = self.ground_raw(raw);
            let valid = seq
                .as_ref()
                .is_some_and(|s| self.contains_canonical(&s.canonical()));
            if let Some(id) = &result.item_id {
                if items.len() < k && !items.contains(id) {
                    items.push(id.clone());
                }
            }
            outcomes.push(CandidateOutcome {
                valid,
                track: result.track,
                item_id: result.item_id,
            });
        }
        BeamGrounding {
            items,
            candidates: outcomes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOutcome {
    /// The candidate's canonical form is some library identifier.
    pub valid: bool,
    pub track: Track,
    pub item_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamGrounding {
    /// Distinct grounded items in candidate rank order, at most `k`.
    pub items: Vec<String>,
    /// One entry per input candidate.
    pub candidates: Vec<CandidateOutcome>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TermIdSequence {
        TermIdSequence::from_canonical(s).unwrap()
    }

    fn library(entries: &[(&str, &str, u64)]) -> (CandidateLibrary, Vec<Collision>) {
        let tids: TidMap = entries.iter().map(|(id, t, _)| (id.to_string(), seq(t))).collect();
        let pop = entries.iter().map(|(id, _, p)| (id.to_string(), *p)).collect();
        CandidateLibrary::build(&tids, &pop).unwrap()
    }

    #[test]
    fn build_counts_and_collisions() {
        let (lib, coll) = library(&[("x", "A, B, C, D, E", 1), ("y", "F, G, H, I, J", 1)]);
        assert_eq!(lib.direct_key_count(), 2);
        assert_eq!(lib.positional_entry_count(), 10);
        assert!(coll.is_empty());

        let (lib, coll) = library(&[("x", "A, B, C, D, E", 1), ("y", "A, B, C, D, E", 1)]);
        assert_eq!(lib.direct_key_count(), 1);
        assert_eq!(coll.len(), 1);
        assert_eq!(coll[0].item_ids, ["x", "y"]);

        assert!(matches!(
            CandidateLibrary::build(&TidMap::new(), &BTreeMap::new()),
            Err(GroundingError::EmptyTidMap)
        ));
    }

    #[test]
    fn direct_hit_miss_and_popularity() {
        let (lib, _) = library(&[
            ("x", "A, B, C, D, E", 10),
            ("y", "A, B, C, D, E", 3),
            ("z", "F, G, H, I, J", 1),
        ]);
        let hit = lib.ground_direct(&seq("F, G, H, I, J"));
        assert_eq!(hit.item_id.as_deref(), Some("z"));
        assert_eq!(hit.track, Track::Direct);
        assert_eq!(hit.score, None);
        assert_eq!(lib.ground_direct(&seq("F, G, H, I, K")).track, Track::None);
        assert_eq!(lib.ground_direct(&seq("A, B, C, D, E")).item_id.as_deref(), Some("x"));
    }

    #[test]
    fn structural_scores() {
        let (lib, _) = library(&[("x", "A, B, C, D, E", 1), ("y", "Q, R, S, T, U", 1)]);
        let full = lib.ground_structural(&seq("A, B, C, D, E"));
        assert!((full.score.unwrap() - 1.45).abs() < 1e-12);
        let two = lib.ground_structural(&seq("A, B, X, Y, Z"));
        assert_eq!(two.item_id.as_deref(), Some("x"));
        assert!((two.score.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(lib.ground_structural(&seq("V, W, X, Y, Z")).track, Track::None);
    }

    #[test]
    fn equal_rational_scores_tie_on_popularity() {
        // Position 1 alone (1/2) equals positions 2 and 5 together (1/3 + 1/6).
        let (lib, _) = library(&[("a", "P, B, C, D, E", 1), ("b", "X, Q, C2, D2, T", 5)]);
        let r = lib.ground_structural(&seq("P, Q, Z1, Z2, T"));
        assert_eq!(r.item_id.as_deref(), Some("b"));
        assert_eq!(r.score, Some(0.5));
    }

    #[test]
    fn ground_prefers_direct_and_recovers_corruption() {
        let (lib, _) = library(&[("x", "A, B, C, D, E", 1), ("y", "A, Q, R, S, T", 1)]);
        assert_eq!(lib.ground(&seq("A, B, C, D, E")).track, Track::Direct);
        let r = lib.ground(&seq("A, B, C, D, Z"));
        assert_eq!(r.track, Track::Structural);
        assert_eq!(r.item_id.as_deref(), Some("x"));
        assert_eq!(lib.ground(&seq("M, N, O")).track, Track::None);
    }

    #[test]
    fn shorter_query_scores_over_common_prefix() {
        let (lib, _) = library(&[("x", "A, B, C, D, E", 1)]);
        let r = lib.ground_structural(&seq("A, B"));
        assert!((r.score.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let longer = lib.ground_structural(&seq("A, B, C, D, E, F, G"));
        assert!((longer.score.unwrap() - 1.45).abs() < 1e-12);
    }

    #[test]
    fn beam_dedup_and_truncation() {
        let (lib, _) = library(&[
            ("a", "A, B, C, D, E", 1),
            ("b", "F, G, H, I, J", 1),
            ("c", "K, L, M, N, O", 1),
        ]);
        let cands: Vec<String> = [
            "A, B, C, D, E",
            "a, b, c, d, x",
            "F, G, H, I, J",
            "???",
            "K, L, M, N, O",
        ]
        .map(String::from)
        .to_vec();
        let g = lib.ground_beam(&cands, 10);
        assert_eq!(g.items, ["a", "b", "c"]);
        let valid: Vec<bool> = g.candidates.iter().map(|c| c.valid).collect();
        assert_eq!(valid, [true, false, true, false, true]);
        assert_eq!(g.candidates[1].track, Track::Structural);
        assert_eq!(g.candidates[3].track, Track::None);
        assert_eq!(lib.ground_beam(&cands, 2).items, ["a", "b"]);

        let junk: Vec<String> = vec!["!!".into(); 10];
        let g = lib.ground_beam(&junk, 5);
        assert!(g.items.is_empty());
        assert_eq!(g.candidates.iter().filter(|c| !c.valid).count(), 10);
    }
}
