//! Instruction-tuning samples and their JSONL export.
//!
//! Two training tasks share one file: identifier generation from metadata
//! (`gti`) and trajectory continuation from an anchor item (`seq`). Each item
//! in a trajectory renders as `[Term, Term, ...] ; title`, one per line.
//!
//! `loss_start` is a character (Unicode scalar) offset into the text
//! `instruction + "\n\n" + input + "\n\n" + output`; every character from
//! there on carries loss, which is exactly the `output` field. Converting the
//! offset to token positions is left to the trainer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, InteractionSequence};
use crate::ctg::{TermIdSequence, TidMap};
use crate::io::{self, IoError};

pub const TEMPLATE_VERSION: &str = "termid-iift-v1";
pub const DEFAULT_MAX_HISTORY: usize = 20;
pub const TRAIN_FILE: &str = "iift_train.jsonl";
pub const EVAL_VALID_FILE: &str = "eval_valid.jsonl";
pub const EVAL_TEST_FILE: &str = "eval_test.jsonl";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

/// Separator between the instruction, input and output in the joint text.
pub const SECTION_SEPARATOR: &str = "\n\n";
/// Separator between item renderings.
pub const ITEM_SEPARATOR: &str = "\n";

fn gti_instruction(tid_len: usize) -> String {
    format!(
        "Generate the identifier of the item described below: exactly {tid_len} standardized \
         keywords, separated by commas."
    )
}

const SEQ_INSTRUCTION: &str = "Each line is an item a user interacted with, written as \
[identifier keywords] ; title. Starting from the first item, continue the user's interaction \
history in chronological order, one item per line.";

const EVAL_INSTRUCTION: &str = "Each line is an item a user interacted with, in chronological \
order, written as [identifier keywords] ; title. Predict the identifier keywords of the next item.";

/// `[A, B, C] ; title`, with whitespace in the title collapsed so a rendering
/// never spans lines.
pub fn render_item(tid: &TermIdSequence, title: &str) -> String {
    let title = title.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("[{}] ; {}", tid.canonical(), title)
}

/// Character offset of `output` in the joint text.
pub fn loss_start_for(instruction: &str, input: &str) -> usize {
    instruction.chars().count() + input.chars().count() + 2 * SECTION_SEPARATOR.chars().count()
}

pub fn joint_text(instruction: &str, input: &str, output: &str) -> String {
    [instruction, input, output].join(SECTION_SEPARATOR)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Gti,
    Seq,
}

/// One training line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSample {
    pub task: Task,
    /// Item id for `gti`, user id for `seq`.
    pub source_id: String,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub loss_start: usize,
}

impl TrainSample {
    fn new(task: Task, source_id: String, instruction: String, input: String, output: String) -> Self {
        let loss_start = loss_start_for(&instruction, &input);
        Self {
            task,
            source_id,
            instruction,
            input,
            output,
            loss_start,
        }
    }

    /// The loss-bearing suffix of the joint text.
    pub fn loss_text(&self) -> String {
        joint_text(&self.instruction, &self.input, &self.output)
            .chars()
            .skip(self.loss_start)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub instruction: String,
    pub input: String,
    /// Items rendered in `input`, oldest first.
    pub history_item_ids: Vec<String>,
    pub target_tid: TermIdSequence,
    pub target_item_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Valid,
    Test,
}

/// Counts of everything left out of an export.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCounts {
    pub gti_samples: usize,
    pub gti_missing_tid: usize,
    pub seq_samples: usize,
    pub seq_short_users: usize,
    /// History items left out of seq renderings because they have no identifier.
    pub history_missing_tid: usize,
    pub eval_valid: EvalCounts,
    pub eval_test: EvalCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub samples: usize,
    pub target_missing_tid: usize,
    /// Samples dropped because the target also occurs in the history.
    pub target_in_history: usize,
    pub empty_history: usize,
    /// History items left out of renderings because they have no identifier.
    pub history_missing_tid: usize,
}

impl EvalCounts {
    pub fn dropped(&self) -> usize {
        self.target_missing_tid + self.target_in_history + self.empty_history
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IiftConfig {
    pub tid_len: usize,
    pub max_history: usize,
    /// Emit one sample per prefix length instead of one per user.
    pub per_step: bool,
    pub shuffle_seed: u64,
    pub gti_repeat: usize,
    pub seq_repeat: usize,
}

impl Default for IiftConfig {
    fn default() -> Self {
        Self {
            tid_len: 5,
            max_history: DEFAULT_MAX_HISTORY,
            per_step: false,
            shuffle_seed: 0,
            gti_repeat: 1,
            seq_repeat: 1,
        }
    }
}

pub fn build_gti_samples(corpus: &Corpus, tids: &TidMap, tid_len: usize, counts: &mut ExportCounts) -> Vec<TrainSample> {
    let instruction = gti_instruction(tid_len);
    let mut out = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let Some(tid) = tids.get(&item.item_id) else {
            counts.gti_missing_tid += 1;
            log::debug!("no identifier for {}; skipped", item.item_id);
            continue;
        };
        out.push(TrainSample::new(
            Task::Gti,
            item.item_id.clone(),
            instruction.clone(),
            item.metadata_text.clone(),
            tid.canonical(),
        ));
    }
    counts.gti_samples += out.len();
    out
}

fn title_of<'a>(corpus: &'a Corpus, id: &str) -> &'a str {
    corpus.item(id).map(|i| i.title.as_str()).unwrap_or("")
}

/// Renders the most recent `max_history` items of `history` that have an
/// identifier, returning the rendered lines and their item ids.
fn render_history(
    history: &[String],
    corpus: &Corpus,
    tids: &TidMap,
    max_history: usize,
    missing: &mut usize,
) -> (Vec<String>, Vec<String>) {
    let known: Vec<&String> = history
        .iter()
        .filter(|id| {
            let ok = tids.contains_key(*id);
            if !ok {
                *missing += 1;
            }
            ok
        })
        .collect();
    let tail = &known[known.len().saturating_sub(max_history)..];
    let lines = tail
        .iter()
        .map(|id| render_item(&tids[*id], title_of(corpus, id)))
        .collect();
    (lines, tail.iter().map(|s| s.to_string()).collect())
}

pub fn build_seq_samples(corpus: &Corpus, tids: &TidMap, config: &IiftConfig, counts: &mut ExportCounts) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for seq in &corpus.sequences {
        let (lines, _) = render_history(
            seq.train_prefix(),
            corpus,
            tids,
            config.max_history,
            &mut counts.history_missing_tid,
        );
        if lines.len() < 2 {
            counts.seq_short_users += 1;
            continue;
        }
        if config.per_step {
            for k in 1..lines.len() {
                out.push(TrainSample::new(
                    Task::Seq,
                    seq.user_id.clone(),
                    SEQ_INSTRUCTION.to_string(),
                    lines[..k].join(ITEM_SEPARATOR),
                    lines[k].clone(),
                ));
            }
        } else {
            out.push(TrainSample::new(
                Task::Seq,
                seq.user_id.clone(),
                SEQ_INSTRUCTION.to_string(),
                lines[0].clone(),
                lines[1..].join(ITEM_SEPARATOR),
            ));
        }
    }
    counts.seq_samples += out.len();
    out
}

/// Position of the target for one sequence (and domain, for merged corpora).
fn target_position(seq: &InteractionSequence, mode: EvalMode, domain: Option<&str>) -> Option<usize> {
    let marks = match domain {
        Some(d) => *seq.domain_splits.get(d)?,
        None => seq.split_marks,
    };
    Some(match mode {
        EvalMode::Valid => marks.valid,
        EvalMode::Test => marks.test,
    })
}

/// Leave-one-out evaluation samples. The history is everything before the
/// target position; for a single-domain test sample that is the train prefix
/// plus the validation item.
pub fn build_eval_samples(
    corpus: &Corpus,
    tids: &TidMap,
    mode: EvalMode,
    domain: Option<&str>,
    max_history: usize,
    counts: &mut EvalCounts,
) -> Vec<EvalSample> {
    let mut out = Vec::new();
    for seq in &corpus.sequences {
        let Some(pos) = target_position(seq, mode, domain) else {
            continue;
        };
        let target = &seq.items[pos];
        let Some(target_tid) = tids.get(target) else {
            counts.target_missing_tid += 1;
            continue;
        };
        let history = &seq.items[..pos];
        if history.contains(target) {
            counts.target_in_history += 1;
            continue;
        }
        let (lines, ids) = render_history(history, corpus, tids, max_history, &mut counts.history_missing_tid);
        if lines.is_empty() {
            counts.empty_history += 1;
            continue;
        }
        out.push(EvalSample {
            user_id: seq.user_id.clone(),
            domain: domain.map(str::to_string),
            instruction: EVAL_INSTRUCTION.to_string(),
            input: lines.join(ITEM_SEPARATOR),
            history_item_ids: ids,
            target_tid: target_tid.clone(),
            target_item_id: target.clone(),
        });
    }
    counts.samples += out.len();
    out
}

/// Repeats each task's samples and interleaves them with a seeded shuffle.
pub fn mix_samples(gti: Vec<TrainSample>, seq: Vec<TrainSample>, config: &IiftConfig) -> Vec<TrainSample> {
    let mut all = Vec::with_capacity(gti.len() * config.gti_repeat + seq.len() * config.seq_repeat);
    for _ in 0..config.gti_repeat {
        all.extend(gti.iter().cloned());
    }
    for _ in 0..config.seq_repeat {
        all.extend(seq.iter().cloned());
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(config.shuffle_seed));
    all
}

pub fn export_jsonl<T: Serialize>(samples: &[T], path: &Path) -> Result<(), IoError> {
    io::write_jsonl(path, samples)
}

/// Hyperparameters handed to an external trainer; nothing here acts on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub template_version: String,
    /// Identifier file the samples were rendered from.
    pub tid_source: String,
    pub objective: String,
    pub loss_mask: String,
    pub learning_rate: f64,
    pub lr_schedule: String,
    pub global_batch_size: usize,
    pub epochs: usize,
    pub tid_len: usize,
    pub max_history: usize,
    pub per_step: bool,
    pub shuffle_seed: u64,
    pub gti_repeat: usize,
    pub seq_repeat: usize,
    pub counts: ExportCounts,
}

impl TrainConfig {
    pub fn new(config: &IiftConfig, counts: ExportCounts, tid_source: &str) -> Self {
        Self {
            template_version: TEMPLATE_VERSION.into(),
            tid_source: tid_source.into(),
            objective: "next-token negative log-likelihood on output characters".into(),
            loss_mask: "characters from loss_start of instruction + \"\\n\\n\" + input + \"\\n\\n\" + output".into(),
            learning_rate: 1e-4,
            lr_schedule: "cosine".into(),
            global_batch_size: 128,
            epochs: 3,
            tid_len: config.tid_len,
            max_history: config.max_history,
            per_step: config.per_step,
            shuffle_seed: config.shuffle_seed,
            gti_repeat: config.gti_repeat,
            seq_repeat: config.seq_repeat,
            counts,
        }
    }
}

/// Everything `export-iift` writes.
#[derive(Debug, Clone, PartialEq)]
pub struct IiftExport {
    pub train: Vec<TrainSample>,
    pub eval_valid: Vec<EvalSample>,
    pub eval_test: Vec<EvalSample>,
    pub counts: ExportCounts,
}

/// Builds all samples. Merged corpora get evaluation samples for each domain.
pub fn build_export(corpus: &Corpus, tids: &TidMap, config: &IiftConfig) -> IiftExport {
    let mut counts = ExportCounts::default();
    let gti = build_gti_samples(corpus, tids, config.tid_len, &mut counts);
    let seq = build_seq_samples(corpus, tids, config, &mut counts);
    let train = mix_samples(gti, seq, config);
    // Per-domain targets exist only for merged corpora.
    let merged = corpus.sequences.iter().any(|s| !s.domain_splits.is_empty());
    let domains: Vec<Option<&str>> = if merged {
        corpus.stats.domains.iter().map(|d| Some(d.as_str())).collect()
    } else {
        vec![None]
    };
    let eval_for = |mode, c: &mut EvalCounts| -> Vec<EvalSample> {
        domains
            .iter()
            .flat_map(|d| build_eval_samples(corpus, tids, mode, *d, config.max_history, c))
            .collect()
    };
    let eval_valid = eval_for(EvalMode::Valid, &mut counts.eval_valid);
    let eval_test = eval_for(EvalMode::Test, &mut counts.eval_test);
    if counts.gti_missing_tid > 0 {
        log::warn!("{} items without identifiers excluded", counts.gti_missing_tid);
    }
    IiftExport {
        train,
        eval_valid,
        eval_test,
        counts,
    }
}

pub fn write_export(
    dir: &Path,
    export: &IiftExport,
    config: &IiftConfig,
    tid_source: &str,
) -> Result<(), IoError> {
    export_jsonl(&export.train, &dir.join(TRAIN_FILE))?;
    export_jsonl(&export.eval_valid, &dir.join(EVAL_VALID_FILE))?;
    export_jsonl(&export.eval_test, &dir.join(EVAL_TEST_FILE))?;
    io::write_json(&dir.join(TRAIN_CONFIG_FILE), &TrainConfig::new(config, export.counts.clone(), tid_source))
}
