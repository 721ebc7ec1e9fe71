//! Stage runners over a working directory.
//!
//! Every stage reads its predecessors' files from the workdir and writes its
//! own there, so stages can run as separate processes. A missing input is
//! reported together with the command that produces it.

mod fixture;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use fixture::{
    library_eval_mock, metadata_mock, metadata_mock_table, oracle_eval_mock, run_smoke,
    write_fixture, SmokeCheck, SmokeOutcome, FIXTURE_ITEMS, FIXTURE_USERS,
};

use crate::corpus::{ingest, merge_cross_domain, Corpus, CorpusError};
use crate::ctg::{
    generate_all_tids, read_tids, write_tids, CtgConfig, CtgError, CtgOutcome, EmbeddingIndex,
    TidMap, CHECKPOINT_FILE, FAILURES_FILE, TIDS_FILE,
};
use crate::eval::{evaluate, write_report, EvalConfig, EvalError, MetricsReport, RankedPrediction};
use crate::grounding::{
    read_library, write_library, write_library_jsonl, CandidateLibrary, Collision, GroundingError,
};
use crate::iift::{
    build_export, write_export, EvalMode, EvalSample, IiftConfig, TrainConfig, EVAL_TEST_FILE,
    EVAL_VALID_FILE, TRAIN_CONFIG_FILE,
};
use crate::io::{self, IoError};
use crate::services::{stable_hash, Embedder, EmbeddingVector, Generator, ServiceConfig, ServiceError};
use crate::vocab::{
    build_vocabulary, compress_tids, kmeans, CompressionMeta, CoreTermMap, KMeansConfig, VocabError,
};

pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const COMPRESSED_TIDS_FILE: &str = "tids.compressed.jsonl";
pub const CORE_TERMS_FILE: &str = "core_terms.jsonl";
pub const COMPRESSION_META_FILE: &str = "compression.meta.json";
pub const LIBRARY_FILE: &str = "library.bin";
pub const LIBRARY_DUMP_FILE: &str = "library.jsonl";
pub const LIBRARY_META_FILE: &str = "library.meta.json";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective.toml";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("missing {}; run `termid {command}` first", path.display())]
    MissingInput { path: PathBuf, command: &'static str },
    #[error("configuration: {0}")]
    Config(String),
    #[error("library was built from {library} but the evaluation samples from {samples}; rebuild one of them")]
    InconsistentSources { library: String, samples: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ctg(#[from] CtgError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Raw input files of one domain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusInput {
    pub metadata: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
    pub domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub metadata: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
    pub domain: Option<String>,
    /// Second domain; when set, the two corpora are merged over shared users.
    pub cross_domain: Option<CorpusInput>,
    pub k_core: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            metadata: None,
            reviews: None,
            domain: None,
            cross_domain: None,
            k_core: 5,
        }
    }
}

impl CorpusConfig {
    pub fn primary(&self) -> CorpusInput {
        CorpusInput {
            metadata: self.metadata.clone(),
            reviews: self.reviews.clone(),
            domain: self.domain.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    /// Number of core terms. Compression is skipped unless set.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Everything a run needs. Loaded from a TOML file; command-line flags are
/// applied on top by the caller. `ctg.tid_len` is the identifier length for
/// every stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Use `tids.compressed.jsonl` instead of `tids.jsonl` downstream of `compress`.
    pub use_compressed: bool,
    pub corpus: CorpusConfig,
    pub ctg: CtgConfig,
    pub compress: CompressConfig,
    pub export: IiftConfig,
    pub eval: EvalConfig,
    pub generator: ServiceConfig,
    pub embedder: ServiceConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| IoError::Open {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.ctg.tid_len == 0 {
            return bad("ctg.tid_len must be >= 1");
        }
        if self.ctg.k == 0 {
            return bad("ctg.k must be >= 1");
        }
        if self.corpus.k_core == 0 {
            return bad("corpus.k_core must be >= 1");
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty and >= 1");
        }
        if self.export.max_history == 0 {
            return bad("export.max_history must be >= 1");
        }
        if self.compress.k == Some(0) {
            return bad("compress.k must be >= 1");
        }
        self.generator.validate()?;
        self.embedder.validate()?;
        Ok(())
    }

    /// Identifier file consumed downstream, with the command that makes it.
    pub fn tid_source(&self) -> (&'static str, &'static str) {
        if self.use_compressed {
            (COMPRESSED_TIDS_FILE, "compress")
        } else {
            (TIDS_FILE, "ctg")
        }
    }
}

fn require(workdir: &Path, file: &str, command: &'static str) -> Result<PathBuf, PipelineError> {
    let path = workdir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput { path, command })
    }
}

fn load_corpus(workdir: &Path) -> Result<Corpus, PipelineError> {
    require(workdir, Corpus::ITEMS_FILE, "ingest")?;
    require(workdir, Corpus::SEQUENCES_FILE, "ingest")?;
    require(workdir, Corpus::STATS_FILE, "ingest")?;
    Ok(Corpus::read_dir(workdir)?)
}

fn load_tids(workdir: &Path, cfg: &PipelineConfig) -> Result<TidMap, PipelineError> {
    let (file, command) = cfg.tid_source();
    Ok(read_tids(&require(workdir, file, command)?)?)
}

fn create_workdir(workdir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(workdir).map_err(|source| {
        PipelineError::Io(IoError::Write {
            path: workdir.to_owned(),
            source,
        })
    })
}

/// Records the configuration a command ran with.
pub fn write_effective_config(workdir: &Path, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    create_workdir(workdir)?;
    let path = workdir.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|source| IoError::Write { path, source })?;
    Ok(())
}

fn ingest_input(input: &CorpusInput, k_core: usize, label: &str) -> Result<Corpus, PipelineError> {
    let missing = |what: &str| {
        PipelineError::Config(format!("{label}.{what} is not set (flag or config file)"))
    };
    let meta = input.metadata.as_deref().ok_or_else(|| missing("metadata"))?;
    let reviews = input.reviews.as_deref().ok_or_else(|| missing("reviews"))?;
    let ingested = ingest(meta, reviews, input.domain.as_deref())?;
    let r = &ingested.report;
    log::info!(
        "{label}: {} items, {} interactions ({} malformed metadata lines, {} malformed review lines, {} unknown-item interactions)",
        ingested.items.len(),
        ingested.interactions.len(),
        r.malformed_metadata_lines,
        r.malformed_review_lines,
        r.unknown_item_interactions
    );
    Ok(Corpus::build(&ingested, k_core)?)
}

pub fn run_ingest(workdir: &Path, cfg: &PipelineConfig) -> Result<Corpus, PipelineError> {
    let primary = ingest_input(&cfg.corpus.primary(), cfg.corpus.k_core, "corpus")?;
    let corpus = match &cfg.corpus.cross_domain {
        None => primary,
        Some(second) => {
            let other = ingest_input(second, cfg.corpus.k_core, "corpus.cross_domain")?;
            merge_cross_domain(&primary, &other)?
        }
    };
    create_workdir(workdir)?;
    corpus.write_dir(workdir)?;
    log::info!(
        "corpus: {} users, {} items, {} interactions",
        corpus.stats.user_count,
        corpus.stats.item_count,
        corpus.stats.interaction_count
    );
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct CachedEmbedding {
    key: String,
    text_hash: u64,
    model: String,
    values: Vec<f64>,
}

/// Embeds `texts` keyed by `keys`, reusing entries of `cache_path` whose
/// text and model are unchanged, and rewrites the cache.
pub fn embed_cached(
    keys: &[String],
    texts: &[String],
    embedder: &dyn Embedder,
    model: &str,
    cache_path: &Path,
) -> Result<Vec<EmbeddingVector>, PipelineError> {
    let mut cache: BTreeMap<String, CachedEmbedding> = if cache_path.is_file() {
        io::read_jsonl::<CachedEmbedding>(cache_path)?
            .into_iter()
            .map(|c| (c.key.clone(), c))
            .collect()
    } else {
        BTreeMap::new()
    };
    let hashes: Vec<u64> = texts.iter().map(|t| stable_hash(t)).collect();
    let stale: Vec<usize> = (0..keys.len())
        .filter(|&i| {
            cache
                .get(&keys[i])
                .is_none_or(|c| c.text_hash != hashes[i] || c.model != model)
        })
        .collect();
    if !stale.is_empty() {
        log::info!("embedding {} of {} texts ({} cached)", stale.len(), keys.len(), keys.len() - stale.len());
        let batch: Vec<String> = stale.iter().map(|&i| texts[i].clone()).collect();
        let vectors = embedder.embed_batch(&batch)?;
        for (&i, v) in stale.iter().zip(vectors) {
            cache.insert(
                keys[i].clone(),
                CachedEmbedding {
                    key: keys[i].clone(),
                    text_hash: hashes[i],
                    model: model.to_string(),
                    values: v.values,
                },
            );
        }
        io::write_jsonl(cache_path, cache.values())?;
    }
    keys.iter()
        .map(|k| Ok(EmbeddingVector::new(cache[k].values.clone())?))
        .collect()
}

/// Generates identifiers for every corpus item. Resumes from the checkpoint
/// in the workdir unless `restart` is set.
pub fn run_ctg(
    workdir: &Path,
    cfg: &PipelineConfig,
    generator: &dyn Generator,
    embedder: &dyn Embedder,
    restart: bool,
) -> Result<CtgOutcome, PipelineError> {
    let corpus = load_corpus(workdir)?;
    let keys: Vec<String> = corpus.items.iter().map(|i| i.item_id.clone()).collect();
    let texts: Vec<String> = corpus.items.iter().map(|i| i.metadata_text.clone()).collect();
    let vectors = embed_cached(&keys, &texts, embedder, &cfg.embedder.model, &workdir.join(EMBEDDINGS_FILE))?;
    let index = EmbeddingIndex::new(keys.into_iter().zip(vectors))?;

    let checkpoint = workdir.join(CHECKPOINT_FILE);
    if restart && checkpoint.exists() {
        fs::remove_file(&checkpoint).map_err(|source| IoError::Write {
            path: checkpoint.clone(),
            source,
        })?;
    }
    let outcome = generate_all_tids(&corpus, &index, &cfg.ctg, generator, Some(&checkpoint))?;
    write_tids(&workdir.join(TIDS_FILE), &outcome.tids)?;
    io::write_jsonl(&workdir.join(FAILURES_FILE), &outcome.failures)?;
    log::info!(
        "identifiers: {} generated, {} resumed, {} failed",
        outcome.processed,
        outcome.resumed,
        outcome.failures.len()
    );
    Ok(outcome)
}

#[derive(Serialize)]
struct CoreTermRow<'a> {
    core_term: &'a str,
    member_count: usize,
}

pub fn run_compress(
    workdir: &Path,
    cfg: &PipelineConfig,
    embedder: &dyn Embedder,
) -> Result<CompressionMeta, PipelineError> {
    let k = cfg
        .compress
        .k
        .ok_or_else(|| PipelineError::Config("compress.k is not set (flag or config file)".into()))?;
    let tids = read_tids(&require(workdir, TIDS_FILE, "ctg")?)?;
    let vocab = build_vocabulary(&tids)?;
    let terms = vocab.term_list();
    let texts: Vec<String> = terms.iter().map(|t| t.as_str().replace('-', " ")).collect();
    let keys: Vec<String> = terms.iter().map(|t| format!("term:{t}")).collect();
    let vectors: Vec<Vec<f64>> = embed_cached(&keys, &texts, embedder, &cfg.embedder.model, &workdir.join(EMBEDDINGS_FILE))?
        .into_iter()
        .map(|v| v.values)
        .collect();

    let km = kmeans(
        &vectors,
        &KMeansConfig {
            k,
            seed: cfg.compress.seed,
            max_iters: cfg.compress.max_iters,
            tol: cfg.compress.tol,
        },
    )?;
    let map = CoreTermMap::build(&terms, &vectors, &km.centroids)?;
    let compressed = compress_tids(&tids, &map)?;
    let compressed_vocab = build_vocabulary(&compressed)?;

    let counts = map.member_counts();
    let rows: Vec<CoreTermRow> = counts
        .iter()
        .map(|(t, n)| CoreTermRow {
            core_term: t.as_str(),
            member_count: *n,
        })
        .collect();
    io::write_jsonl(&workdir.join(CORE_TERMS_FILE), &rows)?;
    write_tids(&workdir.join(COMPRESSED_TIDS_FILE), &compressed)?;
    let meta = CompressionMeta {
        k,
        seed: cfg.compress.seed,
        iterations: km.iterations,
        final_objective: km.objective,
        vocabulary_size: vocab.total_unique(),
        compressed_vocabulary_size: compressed_vocab.total_unique(),
        source: TIDS_FILE.into(),
    };
    io::write_json(&workdir.join(COMPRESSION_META_FILE), &meta)?;
    log::info!("vocabulary {} -> {} terms", meta.vocabulary_size, meta.compressed_vocabulary_size);
    Ok(meta)
}

pub fn run_export(workdir: &Path, cfg: &PipelineConfig) -> Result<crate::iift::ExportCounts, PipelineError> {
    let corpus = load_corpus(workdir)?;
    let tids = load_tids(workdir, cfg)?;
    let export_cfg = IiftConfig {
        tid_len: cfg.ctg.tid_len,
        ..cfg.export.clone()
    };
    let export = build_export(&corpus, &tids, &export_cfg);
    write_export(workdir, &export, &export_cfg, cfg.tid_source().0)?;
    log::info!(
        "exported {} training lines, {} validation and {} test samples",
        export.train.len(),
        export.eval_valid.len(),
        export.eval_test.len()
    );
    Ok(export.counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryMeta {
    pub tid_source: String,
    pub items: usize,
    pub direct_keys: usize,
    pub positional_entries: usize,
    pub collisions: Vec<Collision>,
}

pub fn run_build_library(workdir: &Path, cfg: &PipelineConfig) -> Result<LibraryMeta, PipelineError> {
    let corpus = load_corpus(workdir)?;
    let tids = load_tids(workdir, cfg)?;
    let (lib, collisions) = CandidateLibrary::build(&tids, &corpus.popularity())?;
    write_library(&workdir.join(LIBRARY_FILE), &lib)?;
    write_library_jsonl(&workdir.join(LIBRARY_DUMP_FILE), &lib)?;
    if !collisions.is_empty() {
        log::warn!("{} identifiers are shared by more than one item", collisions.len());
    }
    let meta = LibraryMeta {
        tid_source: cfg.tid_source().0.into(),
        items: lib.len(),
        direct_keys: lib.direct_key_count(),
        positional_entries: lib.positional_entry_count(),
        collisions,
    };
    io::write_json(&workdir.join(LIBRARY_META_FILE), &meta)?;
    Ok(meta)
}

pub fn load_library(workdir: &Path) -> Result<CandidateLibrary, PipelineError> {
    Ok(read_library(&require(workdir, LIBRARY_FILE, "build-library")?)?)
}

pub fn eval_file(split: EvalMode) -> &'static str {
    match split {
        EvalMode::Valid => EVAL_VALID_FILE,
        EvalMode::Test => EVAL_TEST_FILE,
    }
}

pub fn load_eval_samples(workdir: &Path, split: EvalMode) -> Result<Vec<EvalSample>, PipelineError> {
    Ok(io::read_jsonl(&require(workdir, eval_file(split), "export-iift")?)?)
}

/// Scores `split` with `generator`; writes `report.json` and `details.tsv`.
pub fn run_eval(
    workdir: &Path,
    cfg: &PipelineConfig,
    split: EvalMode,
    generator: &dyn Generator,
) -> Result<(MetricsReport, Vec<RankedPrediction>), PipelineError> {
    let library = load_library(workdir)?;
    let samples = load_eval_samples(workdir, split)?;
    let train_cfg: Option<TrainConfig> = workdir
        .join(TRAIN_CONFIG_FILE)
        .is_file()
        .then(|| io::read_json(&workdir.join(TRAIN_CONFIG_FILE)))
        .transpose()?;
    let lib_meta: Option<LibraryMeta> = workdir
        .join(LIBRARY_META_FILE)
        .is_file()
        .then(|| io::read_json(&workdir.join(LIBRARY_META_FILE)))
        .transpose()?;
    if let (Some(t), Some(l)) = (&train_cfg, &lib_meta) {
        if t.tid_source != l.tid_source {
            return Err(PipelineError::InconsistentSources {
                library: l.tid_source.clone(),
                samples: t.tid_source.clone(),
            });
        }
    }
    let dropped = train_cfg.map_or(0, |t| match split {
        EvalMode::Valid => t.counts.eval_valid.dropped(),
        EvalMode::Test => t.counts.eval_test.dropped(),
    });
    let (report, predictions) = evaluate(&samples, generator, &library, &cfg.eval, dropped)?;
    write_report(workdir, &report, &predictions)?;
    Ok((report, predictions))
}

/// Grounds one query per input line and writes `item_id TAB track TAB score`.
/// Fields that do not apply (no item, no structural score) are empty.
pub fn ground_lines(
    library: &CandidateLibrary,
    input: impl BufRead,
    mut output: impl Write,
) -> std::io::Result<usize> {
    let mut n = 0;
    for line in input.lines() {
        let line = line?;
        let (_, r) = library.ground_raw(&line);
        let score = r.score.map(|s| format!("{s:.6}")).unwrap_or_default();
        writeln!(
            output,
            "{}\t{}\t{}",
            r.item_id.as_deref().unwrap_or(""),
            r.track.as_str(),
            score
        )?;
        n += 1;
    }
    Ok(n)
}
