//! Context-aware term generation: neighbor retrieval, prompt construction,
//! response parsing and the resumable generation driver.

mod generate;
mod neighbors;
mod prompt;
mod term;

use std::collections::BTreeMap;
use std::path::Path;

pub use generate::{
    generate_all_tids, generation_order, CtgConfig, CtgFailure, CtgOutcome, TidRecord,
};
pub use neighbors::{cosine_similarity, top_k_neighbors, EmbeddingIndex, NeighborSet};
pub use prompt::{build_ctg_prompt, prompt_target_id, PromptNeighbor};
pub use term::{
    parse_lenient, parse_tid_response, ParseError, Term, TermIdSequence, MAX_TERM_LEN,
    TERM_SEPARATOR,
};

use crate::io::{self, IoError};
use crate::services::ServiceError;

/// Item id to identifier.
pub type TidMap = BTreeMap<String, TermIdSequence>;

#[derive(Debug, thiserror::Error)]
pub enum CtgError {
    #[error("zero-norm embedding{}", .0.as_ref().map(|id| format!(" for item {id}")).unwrap_or_default())]
    ZeroNorm(Option<String>),
    #[error("embedding dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no embedding for item {0}")]
    MissingEmbedding(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub const TIDS_FILE: &str = "tids.jsonl";
pub const CHECKPOINT_FILE: &str = "ctg.ckpt.jsonl";
pub const FAILURES_FILE: &str = "ctg.failures.jsonl";

/// Writes `tids.jsonl`-format records sorted by item id.
pub fn write_tids(path: &Path, tids: &TidMap) -> Result<(), IoError> {
    let records: Vec<TidRecord> = tids
        .iter()
        .map(|(item_id, terms)| TidRecord {
            item_id: item_id.clone(),
            terms: terms.clone(),
        })
        .collect();
    io::write_jsonl(path, &records)
}

pub fn read_tids(path: &Path) -> Result<TidMap, IoError> {
    Ok(io::read_jsonl::<TidRecord>(path)?
        .into_iter()
        .map(|r| (r.item_id, r.terms))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusStats, InteractionSequence, ItemRecord, SplitMarks};
    use crate::services::{
        GenerationRequest, Generator, HashingEmbedder, Embedder, MockGenerator,
    };
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn corpus(n: usize) -> Corpus {
        let items: Vec<ItemRecord> = (0..n)
            .map(|i| ItemRecord {
                item_id: format!("item{i:04}"),
                title: format!("Title {i}"),
                metadata_text: format!("Title {i}\nbrand{} category{}", i % 7, i % 3),
                domain_tag: None,
            })
            .collect();
        // Popularity decreases with the index so generation order is item0000, item0001, ...
        let sequences = (0..n)
            .map(|u| {
                let len = 3usize;
                InteractionSequence {
                    user_id: format!("u{u:04}"),
                    items: (0..len).map(|j| format!("item{:04}", (u / 2 + j) % n)).collect(),
                    timestamps: vec![1, 2, 3],
                    split_marks: SplitMarks { valid: 1, test: 2 },
                    domains: None,
                    domain_splits: Default::default(),
                }
            })
            .collect();
        Corpus {
            items,
            sequences,
            stats: CorpusStats::default(),
        }
    }

    fn index(c: &Corpus) -> EmbeddingIndex {
        let texts: Vec<String> = c.items.iter().map(|i| i.metadata_text.clone()).collect();
        let vecs = HashingEmbedder::new(64).embed_batch(&texts).unwrap();
        EmbeddingIndex::new(c.items.iter().map(|i| i.item_id.clone()).zip(vecs)).unwrap()
    }

    fn table(c: &Corpus) -> Vec<(String, String)> {
        c.items
            .iter()
            .map(|i| {
                let id = &i.item_id;
                (id.clone(), format!("t{id} a, t{id} b, t{id} c, t{id} d, t{id} e"))
            })
            .collect()
    }

    fn mock(c: &Corpus) -> MockGenerator {
        MockGenerator::new(table(c)).with_extractor(Arc::new(|t: &str| prompt_target_id(t)))
    }

    #[test]
    fn all_valid_responses_cover_corpus() {
        let c = corpus(40);
        let out = generate_all_tids(&c, &index(&c), &CtgConfig::default(), &mock(&c), None).unwrap();
        assert_eq!(out.tids.len(), 40);
        assert!(out.failures.is_empty());
        assert_eq!(out.tids["item0007"].canonical(), "Titem0007-A, Titem0007-B, Titem0007-C, Titem0007-D, Titem0007-E");
    }

    struct Counting<G> {
        inner: G,
        calls: AtomicUsize,
    }

    impl<G: Generator> Generator for Counting<G> {
        fn generate(&self, r: &GenerationRequest) -> Result<Vec<String>, crate::services::ServiceError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.generate(r)
        }
    }

    #[test]
    fn failing_item_recorded_after_retry_budget() {
        let c = corpus(20);
        let mut t = table(&c);
        t[5].1 = "no terms here".into();
        let generator = Counting {
            inner: MockGenerator::new(t).with_extractor(Arc::new(|t: &str| prompt_target_id(t))),
            calls: AtomicUsize::new(0),
        };
        let out = generate_all_tids(&c, &index(&c), &CtgConfig::default(), &generator, None).unwrap();
        assert_eq!(out.tids.len(), 19);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].item_id, "item0005");
        assert_eq!(out.failures[0].raw, "no terms here");
        // 19 successes, plus one initial attempt and three retries.
        assert_eq!(generator.calls.load(Ordering::SeqCst), 19 + 4);
    }

    #[test]
    fn exemplar_feedback_reaches_later_prompts() {
        let c = corpus(10);
        let seen = std::sync::Mutex::new(Vec::new());
        struct Spy<'a> {
            inner: MockGenerator,
            seen: &'a std::sync::Mutex<Vec<String>>,
        }
        impl Generator for Spy<'_> {
            fn generate(&self, r: &GenerationRequest) -> Result<Vec<String>, crate::services::ServiceError> {
                self.seen.lock().unwrap().push(r.user_text.clone());
                self.inner.generate(r)
            }
        }
        let spy = Spy { inner: mock(&c), seen: &seen };
        generate_all_tids(&c, &index(&c), &CtgConfig::default(), &spy, None).unwrap();
        let prompts = seen.lock().unwrap();
        assert!(!prompts[0].contains("Assigned terms"));
        assert!(prompts.last().unwrap().contains("Assigned terms"));
        drop(prompts);

        seen.lock().unwrap().clear();
        let cfg = CtgConfig {
            exemplar_feedback: false,
            ..CtgConfig::default()
        };
        generate_all_tids(&c, &index(&c), &cfg, &spy, None).unwrap();
        assert!(seen.lock().unwrap().iter().all(|p| !p.contains("Assigned terms")));
    }

    /// Panics on the `fail_at`-th call, imitating a killed process.
    struct Crashing<G> {
        inner: G,
        calls: AtomicUsize,
        fail_at: usize,
        generated: std::sync::Mutex<Vec<String>>,
    }

    impl<G: Generator> Generator for Crashing<G> {
        fn generate(&self, r: &GenerationRequest) -> Result<Vec<String>, crate::services::ServiceError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
            if call == self.fail_at {
                panic!("simulated crash");
            }
            self.generated
                .lock()
                .unwrap()
                .push(prompt_target_id(&r.user_text).unwrap());
            self.inner.generate(r)
        }
    }

    #[test]
    fn resume_after_crash_regenerates_at_most_one_interval() {
        let c = corpus(1000);
        let idx = index(&c);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join(CHECKPOINT_FILE);
        let crashing = Crashing {
            inner: mock(&c),
            calls: AtomicUsize::new(0),
            fail_at: 601,
            generated: Default::default(),
        };
        let crashed = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            generate_all_tids(&c, &idx, &CtgConfig::default(), &crashing, Some(&ckpt))
        }));
        assert!(crashed.is_err());
        let before: HashSet<String> = crashing.generated.into_inner().unwrap().into_iter().collect();
        assert_eq!(before.len(), 600);

        let resumed = Crashing {
            inner: mock(&c),
            calls: AtomicUsize::new(0),
            fail_at: usize::MAX,
            generated: Default::default(),
        };
        let out = generate_all_tids(&c, &idx, &CtgConfig::default(), &resumed, Some(&ckpt)).unwrap();
        assert_eq!(out.resumed, 500);
        assert_eq!(out.tids.len(), 1000);
        let again = resumed.generated.into_inner().unwrap();
        let redone = again.iter().filter(|id| before.contains(*id)).count();
        assert_eq!(redone, 100);

        // The finished checkpoint restores everything with no further calls.
        let idle = Counting {
            inner: mock(&c),
            calls: AtomicUsize::new(0),
        };
        let out2 = generate_all_tids(&c, &idx, &CtgConfig::default(), &idle, Some(&ckpt)).unwrap();
        assert_eq!(idle.calls.load(Ordering::SeqCst), 0);
        assert_eq!(out2.tids, out.tids);
    }

    #[test]
    fn fatal_error_checkpoints_then_aborts() {
        let c = corpus(30);
        struct Dying(AtomicUsize, MockGenerator);
        impl Generator for Dying {
            fn generate(&self, r: &GenerationRequest) -> Result<Vec<String>, crate::services::ServiceError> {
                if self.0.fetch_add(1, Ordering::SeqCst) == 10 {
                    return Err(crate::services::ServiceError::Http { status: 401, body: "no".into() });
                }
                self.1.generate(r)
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join(CHECKPOINT_FILE);
        let err = generate_all_tids(&c, &index(&c), &CtgConfig::default(), &Dying(AtomicUsize::new(0), mock(&c)), Some(&ckpt));
        assert!(matches!(err, Err(CtgError::Service(_))));
        let lines = std::fs::read_to_string(&ckpt).unwrap().lines().count();
        assert_eq!(lines, 10);
    }

    #[test]
    fn concurrent_batches_match_sequential() {
        let c = corpus(60);
        let idx = index(&c);
        let seq = generate_all_tids(&c, &idx, &CtgConfig { batch_size: Some(8), ..Default::default() }, &mock(&c), None).unwrap();
        let par = generate_all_tids(
            &c,
            &idx,
            &CtgConfig { batch_size: Some(8), ..Default::default() },
            &mock(&c).with_max_in_flight(4),
            None,
        )
        .unwrap();
        assert_eq!(seq.tids, par.tids);
    }

    #[test]
    fn tid_file_round_trip() {
        let c = corpus(12);
        let out = generate_all_tids(&c, &index(&c), &CtgConfig::default(), &mock(&c), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TIDS_FILE);
        write_tids(&path, &out.tids).unwrap();
        assert_eq!(read_tids(&path).unwrap(), out.tids);
    }

    use std::collections::HashSet;
}
