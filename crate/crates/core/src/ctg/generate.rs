use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::neighbors::EmbeddingIndex;
use super::prompt::{build_ctg_prompt, PromptNeighbor};
use super::term::{parse_tid_response, TermIdSequence};
use super::CtgError;
use crate::corpus::{Corpus, ItemRecord};
use crate::services::{parallel_map, GenerationRequest, Generator, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtgConfig {
    /// Neighbors per prompt.
    pub k: usize,
    /// Terms per identifier.
    pub tid_len: usize,
    /// Extra generation attempts after a parse failure.
    pub parse_retries: u32,
    pub checkpoint_every: usize,
    /// Show already-assigned neighbor identifiers in later prompts.
    pub exemplar_feedback: bool,
    /// Items generated between exemplar snapshots; defaults to the
    /// generator's concurrency.
    pub batch_size: Option<usize>,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl Default for CtgConfig {
    fn default() -> Self {
        Self {
            k: 5,
            tid_len: 5,
            parse_retries: 3,
            checkpoint_every: 500,
            exemplar_feedback: true,
            batch_size: None,
            max_new_tokens: 128,
            temperature: 0.0,
        }
    }
}

/// One line of `tids.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TidRecord {
    pub item_id: String,
    pub terms: TermIdSequence,
}

/// One line of `ctg.failures.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtgFailure {
    pub item_id: String,
    pub raw: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointRecord {
    item_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terms: Option<TermIdSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failed_raw: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct CtgOutcome {
    pub tids: BTreeMap<String, TermIdSequence>,
    pub failures: Vec<CtgFailure>,
    /// Items restored from the checkpoint.
    pub resumed: usize,
    /// Items processed in this run.
    pub processed: usize,
}

enum ItemResult {
    Parsed(TermIdSequence),
    Exhausted(String),
    Fatal(ServiceError),
}

/// Popularity-first processing order: interaction count descending, then id.
pub fn generation_order<'a>(
    items: &'a [ItemRecord],
    popularity: &BTreeMap<String, u64>,
) -> Vec<&'a ItemRecord> {
    let mut order: Vec<&ItemRecord> = items.iter().collect();
    order.sort_by(|a, b| {
        let pa = popularity.get(&a.item_id).copied().unwrap_or(0);
        let pb = popularity.get(&b.item_id).copied().unwrap_or(0);
        pb.cmp(&pa).then_with(|| a.item_id.cmp(&b.item_id))
    });
    order
}

fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointRecord>, CtgError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(path).map_err(|e| CtgError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CtgError::Checkpoint(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from an interrupted write is skipped.
        match serde_json::from_str(&line) {
            Ok(rec) => out.push(rec),
            Err(e) => log::warn!("{}: skipping unreadable checkpoint line: {e}", path.display()),
        }
    }
    Ok(out)
}

fn append_checkpoint(path: &Path, records: &[CheckpointRecord]) -> Result<(), CtgError> {
    if records.is_empty() {
        return Ok(());
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| CtgError::Checkpoint(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CtgError::Checkpoint(e.to_string()))?;
    file.write_all(&buf)
        .and_then(|_| file.sync_data())
        .map_err(|e| CtgError::Checkpoint(e.to_string()))
}

fn generate_one(
    generator: &dyn Generator,
    request: &GenerationRequest,
    config: &CtgConfig,
) -> ItemResult {
    let mut last_raw = String::new();
    for _ in 0..=config.parse_retries {
        let raw = match generator.generate(request) {
            Ok(mut out) if !out.is_empty() => out.swap_remove(0),
            Ok(_) => String::new(),
            Err(e) => return ItemResult::Fatal(e),
        };
        match parse_tid_response(&raw, config.tid_len) {
            Ok(seq) => return ItemResult::Parsed(seq),
            Err(e) => log::debug!("parse failure: {e}"),
        }
        last_raw = raw;
    }
    ItemResult::Exhausted(last_raw)
}

/// Generates an identifier for every corpus item.
///
/// Items run in popularity order, in batches. Prompts within a batch see the
/// identifiers assigned before the batch started. Progress is appended to
/// `checkpoint` every `checkpoint_every` items and again before returning; an
/// existing checkpoint is loaded first and its items are skipped.
pub fn generate_all_tids(
    corpus: &Corpus,
    index: &EmbeddingIndex,
    config: &CtgConfig,
    generator: &dyn Generator,
    checkpoint: Option<&Path>,
) -> Result<CtgOutcome, CtgError> {
    if config.tid_len == 0 || config.k == 0 {
        return Err(CtgError::InvalidConfig("k and tid_len must be >= 1".into()));
    }
    if let Some(missing) = corpus.items.iter().find(|i| !index.contains(&i.item_id)) {
        return Err(CtgError::MissingEmbedding(missing.item_id.clone()));
    }

    let mut outcome = CtgOutcome::default();
    let mut done: HashSet<String> = HashSet::new();
    if let Some(path) = checkpoint {
        for rec in load_checkpoint(path)? {
            if !done.insert(rec.item_id.clone()) {
                continue;
            }
            match (rec.terms, rec.failed_raw) {
                (Some(terms), _) => {
                    outcome.tids.insert(rec.item_id, terms);
                }
                (None, raw) => outcome.failures.push(CtgFailure {
                    item_id: rec.item_id,
                    raw: raw.unwrap_or_default(),
                }),
            }
        }
        outcome.resumed = done.len();
        if outcome.resumed > 0 {
            log::info!("resumed {} items from {}", outcome.resumed, path.display());
        }
    }

    let popularity = corpus.popularity();
    let pending: Vec<&ItemRecord> = generation_order(&corpus.items, &popularity)
        .into_iter()
        .filter(|i| !done.contains(&i.item_id))
        .collect();
    let ids: Vec<&str> = pending.iter().map(|i| i.item_id.as_str()).collect();
    let neighbor_sets = index.top_k_many(&ids, config.k)?;

    let batch_size = config
        .batch_size
        .unwrap_or_else(|| generator.max_in_flight())
        .max(1);
    let workers = generator.max_in_flight();
    let mut unflushed: Vec<CheckpointRecord> = Vec::new();

    for (batch_no, batch) in pending.chunks(batch_size).enumerate() {
        let offset = batch_no * batch_size;
        let snapshot = &outcome.tids;
        let results = parallel_map(batch.len(), workers, |b| {
            let target = batch[b];
            let neighbors: Vec<PromptNeighbor<'_>> = neighbor_sets[offset + b]
                .neighbors
                .iter()
                .filter_map(|(id, _)| corpus.item(id))
                .map(|item| PromptNeighbor {
                    item,
                    tid: if config.exemplar_feedback {
                        snapshot.get(&item.item_id)
                    } else {
                        None
                    },
                })
                .collect();
            let (system_text, user_text) = build_ctg_prompt(target, &neighbors, config.tid_len);
            let request = GenerationRequest {
                system_text,
                user_text,
                max_new_tokens: config.max_new_tokens,
                num_return_sequences: 1,
                temperature: config.temperature,
            };
            generate_one(generator, &request, config)
        });

        let mut fatal = None;
        for (item, result) in batch.iter().zip(results) {
            match result {
                ItemResult::Parsed(seq) => {
                    unflushed.push(CheckpointRecord {
                        item_id: item.item_id.clone(),
                        terms: Some(seq.clone()),
                        failed_raw: None,
                    });
                    outcome.tids.insert(item.item_id.clone(), seq);
                    outcome.processed += 1;
                }
                ItemResult::Exhausted(raw) => {
                    log::warn!("item {}: no valid identifier after retries", item.item_id);
                    unflushed.push(CheckpointRecord {
                        item_id: item.item_id.clone(),
                        terms: None,
                        failed_raw: Some(raw.clone()),
                    });
                    outcome.failures.push(CtgFailure {
                        item_id: item.item_id.clone(),
                        raw,
                    });
                    outcome.processed += 1;
                }
                ItemResult::Fatal(e) => {
                    fatal.get_or_insert(e);
                }
            }
        }
        if let Some(e) = fatal {
            if let Some(path) = checkpoint {
                append_checkpoint(path, &unflushed)?;
            }
            return Err(CtgError::Service(e));
        }
        if unflushed.len() >= config.checkpoint_every {
            if let Some(path) = checkpoint {
                append_checkpoint(path, &unflushed)?;
            }
            unflushed.clear();
        }
    }
    if let Some(path) = checkpoint {
        append_checkpoint(path, &unflushed)?;
    }
    outcome.failures.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    Ok(outcome)
}
