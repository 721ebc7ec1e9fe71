//! Synthetic corpus and deterministic generators for offline runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    load_eval_samples, run_build_library, run_ctg, run_eval, run_export, run_ingest,
    PipelineConfig, PipelineError,
};
use crate::corpus::Corpus;
use crate::ctg::{prompt_target_id, Term, TermIdSequence, TIDS_FILE};
use crate::eval::MetricsReport;
use crate::grounding::CandidateLibrary;
use crate::iift::{EvalMode, EvalSample, Task, TrainSample, TRAIN_FILE};
use crate::io::{self, IoError};
use crate::services::{stable_hash, HashingEmbedder, MockGenerator};

pub const FIXTURE_ITEMS: usize = 200;
pub const FIXTURE_USERS: usize = 300;

const CATEGORIES: [&str; 8] = ["Skincare", "Haircare", "Makeup", "Fragrance", "Nails", "Bath", "Tools", "Grooming"];
const BRANDS: [&str; 5] = ["Acme", "Lumen", "Verde", "Nordic", "Solace"];
const NOUNS: [&str; 10] = ["Serum", "Cream", "Lotion", "Oil", "Mask", "Cleanser", "Toner", "Balm", "Spray", "Gel"];
const ADJECTIVES: [&str; 8] = ["Hydrating", "Gentle", "Firming", "Matte", "Radiant", "Soothing", "Daily", "Intense"];

fn write_lines(path: &Path, lines: &[String]) -> Result<(), IoError> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|source| IoError::Write {
        path: path.to_owned(),
        source,
    })
}

/// Writes `metadata.jsonl` and `reviews.jsonl` for a 200-item, 300-user
/// corpus in which every item and user survives 5-core filtering and no user
/// repeats an item. Returns the two paths.
pub fn write_fixture(dir: &Path) -> Result<(PathBuf, PathBuf), IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Write {
        path: dir.to_owned(),
        source,
    })?;
    let meta: Vec<String> = (0..FIXTURE_ITEMS)
        .map(|i| {
            let (cat, brand) = (CATEGORIES[i % 8], BRANDS[(i / 8) % 5]);
            let (noun, adj) = (NOUNS[i % 10], ADJECTIVES[(i / 3) % 8]);
            json!({
                "item_id": format!("P{i:04}"),
                "title": format!("{brand} {adj} {noun} No. {i}"),
                "description": format!("A {} {} for {} routines.", adj.to_lowercase(), noun.to_lowercase(), cat.to_lowercase()),
                "categories": [["Beauty", cat]],
                "brand": brand,
            })
            .to_string()
        })
        .collect();
    let mut reviews = Vec::new();
    for u in 0..FIXTURE_USERS {
        // 13 is coprime with the item count, so a user's items are distinct.
        for j in 0..8 + u % 5 {
            reviews.push(
                json!({
                    "user_id": format!("U{u:04}"),
                    "item_id": format!("P{:04}", (7 * u + 13 * j) % FIXTURE_ITEMS),
                    "timestamp": 1_600_000_000i64 + (j as i64) * 86_400 + u as i64,
                })
                .to_string(),
            );
        }
    }
    let (m, r) = (dir.join("metadata.jsonl"), dir.join("reviews.jsonl"));
    write_lines(&m, &meta)?;
    write_lines(&r, &reviews)?;
    Ok((m, r))
}

/// A plausible identifier response per item: distinct words from its
/// metadata followed by a term derived from the item id, so identifiers are
/// unique across items.
pub fn metadata_mock_table(corpus: &Corpus, tid_len: usize) -> Vec<(String, String)> {
    corpus
        .items
        .iter()
        .map(|item| {
            let id_term = Term::normalize(&format!("id {}", item.item_id)).ok();
            let mut terms: Vec<Term> = Vec::new();
            let words = item
                .metadata_text
                .split(|c: char| !c.is_ascii_alphabetic())
                .filter(|w| w.len() >= 3);
            for w in words {
                if terms.len() + 1 >= tid_len {
                    break;
                }
                if let Ok(t) = Term::normalize(w) {
                    if !terms.contains(&t) && Some(&t) != id_term.as_ref() {
                        terms.push(t);
                    }
                }
            }
            let mut filler = 0;
            while terms.len() + 1 < tid_len {
                filler += 1;
                let t = Term::normalize(&format!("filler {filler}")).unwrap();
                if !terms.contains(&t) {
                    terms.push(t);
                }
            }
            terms.extend(id_term);
            let text: Vec<&str> = terms.iter().map(Term::as_str).collect();
            (item.item_id.clone(), text.join(", "))
        })
        .collect()
}

/// Identifier generator that answers each term-generation prompt from
/// [`metadata_mock_table`], keyed by the prompt's target item.
pub fn metadata_mock(corpus: &Corpus, tid_len: usize) -> MockGenerator {
    MockGenerator::new(metadata_mock_table(corpus, tid_len))
        .with_extractor(Arc::new(|text: &str| prompt_target_id(text)))
        .with_max_in_flight(4)
}

/// Next-item generator that only ever emits library identifiers, chosen by a
/// hash of the prompt.
pub fn library_eval_mock(library: &CandidateLibrary) -> MockGenerator {
    MockGenerator::new(
        library
            .entries()
            .map(|(id, tid, _)| (id.to_string(), tid.canonical()))
            .collect(),
    )
    .with_max_in_flight(4)
}

/// Next-item generator that knows the answers: for each sample the target's
/// identifier comes first, followed by other library identifiers.
pub fn oracle_eval_mock(samples: &[EvalSample], library: &CandidateLibrary, beam: usize) -> MockGenerator {
    let all: Vec<String> = library.entries().map(|(_, t, _)| t.canonical()).collect();
    let mut g = MockGenerator::new(vec![]).with_max_in_flight(4);
    for s in samples {
        let target = s.target_tid.canonical();
        let start = (stable_hash(&s.user_id) % all.len() as u64) as usize;
        let mut response = vec![target.clone()];
        response.extend(
            (0..all.len())
                .map(|r| &all[(start + r) % all.len()])
                .filter(|c| **c != target)
                .take(beam.saturating_sub(1))
                .cloned(),
        );
        g.script(s.input.clone(), response);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmokeOutcome {
    pub report: MetricsReport,
    pub checks: Vec<SmokeCheck>,
    pub elapsed_secs: f64,
}

impl SmokeOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> SmokeCheck {
    SmokeCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// Export invariants: every line re-parses, the loss span is exactly the
/// output, outputs are well-formed, and no evaluation target leaks into its
/// history.
fn export_checks(workdir: &Path, tid_len: usize) -> Result<Vec<SmokeCheck>, PipelineError> {
    let train: Vec<TrainSample> = io::read_jsonl(&workdir.join(TRAIN_FILE))?;
    let mut bad = Vec::new();
    for s in &train {
        let ok = s.loss_text() == s.output
            && match s.task {
                Task::Gti => TermIdSequence::from_canonical(&s.output).is_ok_and(|t| t.len() == tid_len),
                Task::Seq => s
                    .output
                    .lines()
                    .chain(s.input.lines())
                    .all(|l| l.starts_with('[') && l.contains("] ; ")),
            };
        if !ok {
            bad.push(s.source_id.clone());
        }
    }
    let mut leaks = 0;
    let mut eval_total = 0;
    for split in [EvalMode::Valid, EvalMode::Test] {
        for s in load_eval_samples(workdir, split)? {
            eval_total += 1;
            let target_line = s.input.lines().any(|l| l.starts_with(&format!("[{}]", s.target_tid.canonical())));
            if s.history_item_ids.contains(&s.target_item_id) || target_line {
                leaks += 1;
            }
        }
    }
    Ok(vec![
        check(
            "iift_round_trip",
            bad.is_empty() && !train.is_empty(),
            format!("{} training lines, {} malformed", train.len(), bad.len()),
        ),
        check(
            "no_target_leakage",
            leaks == 0 && eval_total > 0,
            format!("{eval_total} evaluation samples, {leaks} leaking"),
        ),
    ])
}

/// Runs ingest → ctg → build-library → export-iift → eval on the synthetic
/// corpus with deterministic generators, and checks the results.
pub fn run_smoke(workdir: &Path) -> Result<SmokeOutcome, PipelineError> {
    let start = Instant::now();
    let (meta, reviews) = write_fixture(&workdir.join("fixture"))?;
    let mut cfg = PipelineConfig::default();
    cfg.corpus.metadata = Some(meta);
    cfg.corpus.reviews = Some(reviews);
    cfg.validate()?;
    super::write_effective_config(workdir, &cfg)?;

    let corpus = run_ingest(workdir, &cfg)?;
    let generator = metadata_mock(&corpus, cfg.ctg.tid_len);
    let ctg = run_ctg(workdir, &cfg, &generator, &HashingEmbedder::new(64), true)?;
    let lib_meta = run_build_library(workdir, &cfg)?;
    run_export(workdir, &cfg)?;
    let library = super::load_library(workdir)?;
    let samples = load_eval_samples(workdir, EvalMode::Test)?;
    let beam = cfg.eval.ks.iter().copied().max().unwrap_or(1);
    let (report, _) = run_eval(workdir, &cfg, EvalMode::Test, &oracle_eval_mock(&samples, &library, beam))?;

    let mut checks = vec![
        check(
            "identifiers_cover_corpus",
            ctg.tids.len() == corpus.items.len() && ctg.failures.is_empty(),
            format!("{} of {} items in {TIDS_FILE}", ctg.tids.len(), corpus.items.len()),
        ),
        check(
            "library_collision_free",
            lib_meta.collisions.is_empty(),
            format!("{} collisions", lib_meta.collisions.len()),
        ),
    ];
    checks.extend(export_checks(workdir, cfg.ctg.tid_len)?);
    let r5 = report.recall_at.get(&5).copied().unwrap_or(0.0);
    let vr = report.vr_at.get(&beam).copied().unwrap_or(0.0);
    let dhr = report.dhr_at.get(&beam).copied().unwrap_or(0.0);
    checks.push(check("oracle_recall_at_5", r5 == 1.0, format!("recall@5 = {r5}")));
    checks.push(check(
        "oracle_valid_and_direct",
        vr == 1.0 && dhr == 1.0,
        format!("VR@{beam} = {vr}, DHR@{beam} = {dhr}"),
    ));
    Ok(SmokeOutcome {
        report,
        checks,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_passes() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_smoke(dir.path()).unwrap();
        for c in &out.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
        assert!(dir.path().join("report.json").is_file());
    }

    #[test]
    fn metadata_mock_identifiers_are_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let (m, r) = write_fixture(dir.path()).unwrap();
        let corpus = Corpus::build(&crate::corpus::ingest(&m, &r, None).unwrap(), 5).unwrap();
        assert_eq!(corpus.items.len(), FIXTURE_ITEMS);
        assert_eq!(corpus.sequences.len(), FIXTURE_USERS);
        for tid_len in [1, 3, 5, 8] {
            let table = metadata_mock_table(&corpus, tid_len);
            let mut seen = std::collections::HashSet::new();
            for (_, resp) in &table {
                let t = crate::ctg::parse_tid_response(resp, tid_len).unwrap();
                assert!(seen.insert(t.canonical()));
            }
        }
    }
}
