//! Review-corpus ingestion, k-core filtering, per-user sequences and
//! leave-one-out / cross-domain splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

/// Minimum sequence length: one train item, one validation item, one test item.
pub const MIN_SEQUENCE_LEN: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("corpus is empty after {stage}")]
    EmptyCorpus { stage: &'static str },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("sequence for user {user_id} has {len} items, need at least {MIN_SEQUENCE_LEN}")]
    SequenceTooShort { user_id: String, len: usize },
    #[error("items in a cross-domain merge need a domain tag (item {item_id})")]
    MissingDomainTag { item_id: String },
    #[error("both corpora carry domain tag {0:?}")]
    SameDomainTag(String),
    #[error("item {item_id} appears in both corpora")]
    ItemIdConflict { item_id: String },
}

/// A catalog item. `metadata_text` is the aggregated description that gets
/// embedded and shown to the term generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub metadata_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Positions of the validation and test items inside a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMarks {
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
    pub split_marks: SplitMarks,
    /// Per-position domain label; present only for merged cross-domain sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domains: Option<Vec<String>>,
    /// Per-domain validation/test positions for merged sequences.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub domain_splits: BTreeMap<String, SplitMarks>,
}

/// Leave-one-out view of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<'a> {
    pub train: &'a [String],
    pub valid: &'a str,
    pub test: &'a str,
}

impl InteractionSequence {
    fn new(user_id: String, items: Vec<String>, timestamps: Vec<i64>) -> Self {
        let n = items.len();
        Self {
            user_id,
            items,
            timestamps,
            split_marks: SplitMarks {
                valid: n.saturating_sub(2),
                test: n.saturating_sub(1),
            },
            domains: None,
            domain_splits: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items before the earliest validation position. For single-domain
    /// sequences this is the leave-one-out train prefix; for merged sequences
    /// it excludes every domain's validation and test items.
    pub fn train_prefix(&self) -> &[String] {
        let end = self
            .domain_splits
            .values()
            .map(|m| m.valid)
            .min()
            .unwrap_or(self.split_marks.valid);
        &self.items[..end]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub user_count: usize,
    pub item_count: usize,
    pub interaction_count: usize,
    /// Repeated (user, item) pairs. They are kept as distinct interactions.
    pub duplicate_interactions: usize,
    pub duplicates_kept: bool,
    pub k_core: usize,
    pub dropped_short_sequences: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<String>,
}

/// Counters collected while reading raw files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub malformed_metadata_lines: usize,
    pub malformed_review_lines: usize,
    pub duplicate_items: usize,
    pub empty_metadata_items: usize,
    pub unknown_item_interactions: usize,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub items: Vec<ItemRecord>,
    pub interactions: Vec<InteractionRecord>,
    pub report: IngestReport,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextField {
    One(String),
    Many(Vec<String>),
}

impl TextField {
    fn join(self) -> String {
        match self {
            TextField::One(s) => s,
            TextField::Many(v) => v.join(" "),
        }
    }
}

#[derive(Deserialize)]
struct RawMetadata {
    #[serde(alias = "asin")]
    item_id: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    description: Option<TextField>,
    #[serde(default)]
    categories: Vec<Vec<String>>,
    #[serde(default)]
    brand: Option<String>,
}

#[derive(Deserialize)]
struct RawReview {
    #[serde(alias = "reviewerID")]
    user_id: String,
    #[serde(alias = "asin")]
    item_id: String,
    #[serde(alias = "unixReviewTime")]
    timestamp: i64,
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Assembles the metadata text: title, brand, category paths, description,
/// one part per line, empty parts omitted.
pub fn assemble_metadata_text(
    title: &str,
    brand: &str,
    categories: &[Vec<String>],
    description: &str,
) -> String {
    let mut parts = Vec::new();
    let title = collapse_ws(title);
    if !title.is_empty() {
        parts.push(title);
    }
    let brand = collapse_ws(brand);
    if !brand.is_empty() {
        parts.push(brand);
    }
    for path in categories {
        let path: Vec<String> = path
            .iter()
            .map(|c| collapse_ws(c))
            .filter(|c| !c.is_empty())
            .collect();
        if !path.is_empty() {
            parts.push(path.join(" > "));
        }
    }
    let description = collapse_ws(description);
    if !description.is_empty() {
        parts.push(description);
    }
    parts.join("\n")
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_owned(),
        source,
    })?;
    Ok(BufReader::new(file).lines())
}

/// Reads a metadata file and a review file. Malformed lines are skipped and
/// counted; interactions referencing unknown items are dropped.
pub fn ingest(
    metadata_path: &Path,
    reviews_path: &Path,
    domain_tag: Option<&str>,
) -> Result<Ingested, CorpusError> {
    let mut report = IngestReport::default();
    let mut items = Vec::new();
    let mut seen = HashSet::new();

    for line in open_lines(metadata_path)? {
        let line = line.map_err(|source| CorpusError::Unreadable {
            path: metadata_path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawMetadata = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(_) => {
                report.malformed_metadata_lines += 1;
                continue;
            }
        };
        let item_id = raw.item_id.trim().to_owned();
        if item_id.is_empty() {
            report.malformed_metadata_lines += 1;
            continue;
        }
        if seen.contains(&item_id) {
            report.duplicate_items += 1;
            continue;
        }
        let title = raw.title.unwrap_or_default();
        let metadata_text = assemble_metadata_text(
            &title,
            raw.brand.as_deref().unwrap_or(""),
            &raw.categories,
            &raw.description.map(TextField::join).unwrap_or_default(),
        );
        if metadata_text.is_empty() {
            report.empty_metadata_items += 1;
            continue;
        }
        seen.insert(item_id.clone());
        items.push(ItemRecord {
            item_id,
            title: collapse_ws(&title),
            metadata_text,
            domain_tag: domain_tag.map(str::to_owned),
        });
    }

    let mut interactions = Vec::new();
    for line in open_lines(reviews_path)? {
        let line = line.map_err(|source| CorpusError::Unreadable {
            path: reviews_path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawReview = match serde_json::from_str::<RawReview>(&line) {
            Ok(raw) if !raw.user_id.trim().is_empty() => raw,
            _ => {
                report.malformed_review_lines += 1;
                continue;
            }
        };
        let item_id = raw.item_id.trim();
        if !seen.contains(item_id) {
            report.unknown_item_interactions += 1;
            continue;
        }
        interactions.push(InteractionRecord {
            user_id: raw.user_id.trim().to_owned(),
            item_id: item_id.to_owned(),
            timestamp: raw.timestamp,
        });
    }

    if report.empty_metadata_items > 0 {
        log::warn!(
            "{}: dropped {} items without metadata text",
            metadata_path.display(),
            report.empty_metadata_items
        );
    }
    if report.malformed_metadata_lines + report.malformed_review_lines > 0 {
        log::warn!(
            "skipped {} malformed metadata lines and {} malformed review lines",
            report.malformed_metadata_lines,
            report.malformed_review_lines
        );
    }
    if report.unknown_item_interactions > 0 {
        log::warn!(
            "dropped {} interactions referencing unknown items",
            report.unknown_item_interactions
        );
    }
    Ok(Ingested {
        items,
        interactions,
        report,
    })
}

/// Iteratively removes users and items with fewer than `k` interactions until
/// a fixpoint. Surviving interactions keep their input order.
pub fn k_core_filter(
    interactions: &[InteractionRecord],
    k: usize,
) -> Result<Vec<InteractionRecord>, CorpusError> {
    if k == 0 {
        return Err(CorpusError::InvalidK);
    }
    let mut alive = vec![true; interactions.len()];
    let mut user_deg: HashMap<&str, usize> = HashMap::new();
    let mut item_deg: HashMap<&str, usize> = HashMap::new();
    for r in interactions {
        *user_deg.entry(&r.user_id).or_default() += 1;
        *item_deg.entry(&r.item_id).or_default() += 1;
    }
    loop {
        let mut changed = false;
        for (idx, r) in interactions.iter().enumerate() {
            if !alive[idx] {
                continue;
            }
            if user_deg[r.user_id.as_str()] < k || item_deg[r.item_id.as_str()] < k {
                alive[idx] = false;
                changed = true;
                // Degrees drop immediately; the fixpoint is the same either way.
                *user_deg.get_mut(r.user_id.as_str()).unwrap() -= 1;
                *item_deg.get_mut(r.item_id.as_str()).unwrap() -= 1;
            }
        }
        if !changed {
            break;
        }
    }
    let kept: Vec<_> = interactions
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(r, _)| r.clone())
        .collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            stage: "k-core filtering",
        });
    }
    Ok(kept)
}

/// Groups interactions per user in timestamp order (stable on ties). Returns
/// the sequences sorted by user id and the number of users dropped for being
/// shorter than [`MIN_SEQUENCE_LEN`].
pub fn build_sequences(interactions: &[InteractionRecord]) -> (Vec<InteractionSequence>, usize) {
    let mut per_user: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in interactions {
        per_user.entry(&r.user_id).or_default().push(r);
    }
    let mut dropped = 0;
    let mut out = Vec::with_capacity(per_user.len());
    for (user, mut records) in per_user {
        if records.len() < MIN_SEQUENCE_LEN {
            dropped += 1;
            continue;
        }
        records.sort_by_key(|r| r.timestamp);
        out.push(InteractionSequence::new(
            user.to_owned(),
            records.iter().map(|r| r.item_id.clone()).collect(),
            records.iter().map(|r| r.timestamp).collect(),
        ));
    }
    (out, dropped)
}

/// Last item is the test target, the one before it validation, the rest train.
pub fn leave_one_out_split(sequence: &InteractionSequence) -> Result<Split<'_>, CorpusError> {
    let n = sequence.items.len();
    if n < MIN_SEQUENCE_LEN {
        return Err(CorpusError::SequenceTooShort {
            user_id: sequence.user_id.clone(),
            len: n,
        });
    }
    Ok(Split {
        train: &sequence.items[..n - 2],
        valid: &sequence.items[n - 2],
        test: &sequence.items[n - 1],
    })
}

/// A filtered corpus: items referenced by at least one sequence, plus the
/// sequences themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    /// Sorted by item id.
    pub items: Vec<ItemRecord>,
    /// Sorted by user id.
    pub sequences: Vec<InteractionSequence>,
    pub stats: CorpusStats,
}

impl Corpus {
    /// Runs k-core filtering and sequence construction over ingested records.
    pub fn build(ingested: &Ingested, k: usize) -> Result<Self, CorpusError> {
        let filtered = k_core_filter(&ingested.interactions, k)?;
        let mut pairs = HashSet::new();
        let duplicate_interactions = filtered
            .iter()
            .filter(|r| !pairs.insert((r.user_id.as_str(), r.item_id.as_str())))
            .count();
        let (sequences, dropped) = build_sequences(&filtered);
        if sequences.is_empty() {
            return Err(CorpusError::EmptyCorpus {
                stage: "sequence construction",
            });
        }
        let used: HashSet<&str> = sequences
            .iter()
            .flat_map(|s| s.items.iter().map(String::as_str))
            .collect();
        let mut items: Vec<ItemRecord> = ingested
            .items
            .iter()
            .filter(|i| used.contains(i.item_id.as_str()))
            .cloned()
            .collect();
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let domains: BTreeSet<String> = items.iter().filter_map(|i| i.domain_tag.clone()).collect();
        let stats = CorpusStats {
            user_count: sequences.len(),
            item_count: items.len(),
            interaction_count: sequences.iter().map(|s| s.len()).sum(),
            duplicate_interactions,
            duplicates_kept: true,
            k_core: k,
            dropped_short_sequences: dropped,
            domains: domains.into_iter().collect(),
        };
        Ok(Self {
            items,
            sequences,
            stats,
        })
    }

    /// Interaction count per item across all sequences.
    pub fn popularity(&self) -> BTreeMap<String, u64> {
        let mut pop = BTreeMap::new();
        for s in &self.sequences {
            for item in &s.items {
                *pop.entry(item.clone()).or_insert(0) += 1;
            }
        }
        pop
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemRecord> {
        self.items
            .binary_search_by(|i| i.item_id.as_str().cmp(item_id))
            .ok()
            .map(|idx| &self.items[idx])
    }

    pub const ITEMS_FILE: &'static str = "items.jsonl";
    pub const SEQUENCES_FILE: &'static str = "sequences.jsonl";
    pub const STATS_FILE: &'static str = "stats.json";

    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Unreadable {
            path: dir.to_owned(),
            source,
        })?;
        io::write_jsonl(&dir.join(Self::ITEMS_FILE), &self.items)?;
        io::write_jsonl(&dir.join(Self::SEQUENCES_FILE), &self.sequences)?;
        io::write_json(&dir.join(Self::STATS_FILE), &self.stats)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, CorpusError> {
        let mut items: Vec<ItemRecord> = io::read_jsonl(&dir.join(Self::ITEMS_FILE))?;
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        let sequences = io::read_jsonl(&dir.join(Self::SEQUENCES_FILE))?;
        let stats = io::read_json(&dir.join(Self::STATS_FILE))?;
        Ok(Self {
            items,
            sequences,
            stats,
        })
    }
}

/// Merges two single-domain corpora over their overlapping users. Each merged
/// sequence is sorted by timestamp; on ties `a` precedes `b` and each side
/// keeps its own order. Per-domain validation/test positions are the last two
/// positions of that domain inside the merged sequence.
pub fn merge_cross_domain(a: &Corpus, b: &Corpus) -> Result<Corpus, CorpusError> {
    let tag_of = |corpus: &Corpus| -> Result<HashMap<String, String>, CorpusError> {
        corpus
            .items
            .iter()
            .map(|i| {
                i.domain_tag
                    .clone()
                    .map(|t| (i.item_id.clone(), t))
                    .ok_or_else(|| CorpusError::MissingDomainTag {
                        item_id: i.item_id.clone(),
                    })
            })
            .collect()
    };
    let tags_a = tag_of(a)?;
    let tags_b = tag_of(b)?;
    if let Some(id) = tags_a.keys().find(|id| tags_b.contains_key(*id)) {
        return Err(CorpusError::ItemIdConflict {
            item_id: id.clone(),
        });
    }
    let domain_set_a: BTreeSet<&String> = tags_a.values().collect();
    if let Some(t) = tags_b.values().find(|t| domain_set_a.contains(t)) {
        return Err(CorpusError::SameDomainTag(t.clone()));
    }

    let b_by_user: HashMap<&str, &InteractionSequence> =
        b.sequences.iter().map(|s| (s.user_id.as_str(), s)).collect();
    let mut sequences = Vec::new();
    for sa in &a.sequences {
        let Some(sb) = b_by_user.get(sa.user_id.as_str()) else {
            continue;
        };
        // (timestamp, side, position) orders a stable two-way merge.
        let mut entries: Vec<(i64, u8, usize)> = Vec::with_capacity(sa.len() + sb.len());
        entries.extend(sa.timestamps.iter().enumerate().map(|(p, &t)| (t, 0u8, p)));
        entries.extend(sb.timestamps.iter().enumerate().map(|(p, &t)| (t, 1u8, p)));
        entries.sort_unstable();
        let mut items = Vec::with_capacity(entries.len());
        let mut timestamps = Vec::with_capacity(entries.len());
        let mut domains = Vec::with_capacity(entries.len());
        for (t, side, pos) in entries {
            let (seq, tags) = if side == 0 { (sa, &tags_a) } else { (*sb, &tags_b) };
            let item = &seq.items[pos];
            items.push(item.clone());
            timestamps.push(t);
            domains.push(tags[item].clone());
        }
        let mut positions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (idx, d) in domains.iter().enumerate() {
            positions.entry(d).or_default().push(idx);
        }
        if positions.len() < 2 || positions.values().any(|p| p.len() < 2) {
            continue;
        }
        let domain_splits = positions
            .iter()
            .map(|(d, p)| {
                (
                    d.to_string(),
                    SplitMarks {
                        valid: p[p.len() - 2],
                        test: p[p.len() - 1],
                    },
                )
            })
            .collect();
        let mut seq = InteractionSequence::new(sa.user_id.clone(), items, timestamps);
        seq.domains = Some(domains);
        seq.domain_splits = domain_splits;
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            stage: "cross-domain merge",
        });
    }
    sequences.sort_by(|x, y| x.user_id.cmp(&y.user_id));

    let used: HashSet<&str> = sequences
        .iter()
        .flat_map(|s| s.items.iter().map(String::as_str))
        .collect();
    let mut items: Vec<ItemRecord> = a
        .items
        .iter()
        .chain(&b.items)
        .filter(|i| used.contains(i.item_id.as_str()))
        .cloned()
        .collect();
    items.sort_by(|x, y| x.item_id.cmp(&y.item_id));
    let domains: BTreeSet<String> = items.iter().filter_map(|i| i.domain_tag.clone()).collect();
    let stats = CorpusStats {
        user_count: sequences.len(),
        item_count: items.len(),
        interaction_count: sequences.iter().map(|s| s.len()).sum(),
        duplicate_interactions: a.stats.duplicate_interactions + b.stats.duplicate_interactions,
        duplicates_kept: true,
        k_core: a.stats.k_core.min(b.stats.k_core),
        dropped_short_sequences: 0,
        domains: domains.into_iter().collect(),
    };
    Ok(Corpus {
        items,
        sequences,
        stats,
    })
}
