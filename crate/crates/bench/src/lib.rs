//! Seeded input generators shared by the benchmarks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use termid::services::EmbeddingVector;
use termid::{CandidateLibrary, Term, TermIdSequence, TidMap};

pub fn alphabet(size: usize) -> Vec<Term> {
    (0..size)
        .map(|i| Term::from_canonical(&format!("T{i}")).unwrap())
        .collect()
}

/// `len` distinct terms drawn from `alphabet`.
pub fn random_tid(rng: &mut ChaCha8Rng, alphabet: &[Term], len: usize) -> TermIdSequence {
    TermIdSequence::new(alphabet.choose_multiple(rng, len).cloned().collect()).unwrap()
}

pub fn random_library(items: usize, alphabet_size: usize, len: usize, seed: u64) -> CandidateLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms = alphabet(alphabet_size);
    let tids: TidMap = (0..items)
        .map(|i| (format!("item{i:06}"), random_tid(&mut rng, &terms, len)))
        .collect();
    let pop: BTreeMap<String, u64> = tids.keys().map(|k| (k.clone(), rng.gen_range(0..50))).collect();
    CandidateLibrary::build(&tids, &pop).unwrap().0
}

pub fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<(String, EmbeddingVector)> {
    random_points(n, dim, seed)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (format!("item{i:06}"), EmbeddingVector::new(v).unwrap()))
        .collect()
}
