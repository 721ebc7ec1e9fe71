use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use termid::eval::Averaging;
use termid::iift::EvalMode;
use termid::pipeline::{
    self, library_eval_mock, load_eval_samples, load_library, metadata_mock, oracle_eval_mock,
    CorpusInput, PipelineConfig,
};
use termid::services::{ChatClient, Embedder, EmbeddingClient, Generator, HashingEmbedder};
use termid::Corpus;

/// Term-ID recommendation pipeline.
///
/// Every command reads and writes files under --workdir. Settings come from
/// command-line flags, then the --config TOML file, then built-in defaults.
#[derive(Parser)]
#[command(name = "termid", version)]
struct Cli {
    /// Directory holding every intermediate and output file.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw metadata and reviews, k-core filter, and write the corpus.
    Ingest(IngestArgs),
    /// Generate a term identifier for every item.
    Ctg(CtgArgs),
    /// Cluster the term vocabulary and rewrite identifiers onto core terms.
    Compress(CompressArgs),
    /// Write instruction-tuning and evaluation samples.
    ExportIift(ExportArgs),
    /// Index identifiers for grounding.
    BuildLibrary(SourceArgs),
    /// Ground identifier strings read from stdin, one per line.
    ///
    /// Output is `item_id<TAB>track<TAB>score` per line; the item id is empty
    /// when nothing matched and the score is empty unless the track is
    /// structural.
    Ground,
    /// Generate, ground and score next-item predictions.
    Eval(EvalArgs),
    /// Run the whole pipeline offline on a built-in synthetic corpus.
    Smoke,
}

#[derive(Args)]
struct IngestArgs {
    /// Item metadata, one JSON object per line.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Interactions, one JSON object per line.
    #[arg(long)]
    reviews: Option<PathBuf>,
    /// Domain tag for the primary corpus.
    #[arg(long)]
    domain: Option<String>,
    /// Minimum interactions per user and per item.
    #[arg(long)]
    k_core: Option<usize>,
    /// Metadata of a second domain to merge over shared users.
    #[arg(long, requires_all = ["cross_reviews", "cross_domain", "domain"])]
    cross_metadata: Option<PathBuf>,
    #[arg(long)]
    cross_reviews: Option<PathBuf>,
    #[arg(long)]
    cross_domain: Option<String>,
}

#[derive(Args)]
struct GeneratorArgs {
    /// Base URL of the OpenAI-compatible generation service.
    #[arg(long)]
    generator_url: Option<String>,
    #[arg(long)]
    generator_model: Option<String>,
    /// Concurrent generation requests.
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Args)]
struct EmbedderArgs {
    /// Base URL of the OpenAI-compatible embeddings service.
    #[arg(long)]
    embedder_url: Option<String>,
    #[arg(long)]
    embedder_model: Option<String>,
}

#[derive(Args)]
struct CtgArgs {
    /// Neighbors shown per prompt.
    #[arg(long)]
    k: Option<usize>,
    /// Terms per identifier.
    #[arg(long)]
    tid_len: Option<usize>,
    #[arg(long)]
    parse_retries: Option<u32>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Do not show neighbors' already-assigned identifiers in prompts.
    #[arg(long)]
    no_exemplar_feedback: bool,
    /// Ignore and delete an existing checkpoint.
    #[arg(long)]
    restart: bool,
    /// Use offline stand-ins for both services.
    #[arg(long)]
    mock: bool,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Args)]
struct CompressArgs {
    /// Number of core terms.
    #[arg(long = "core-terms")]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Use the offline hashing embedder.
    #[arg(long)]
    mock: bool,
    #[command(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Args)]
struct SourceArgs {
    /// Read tids.compressed.jsonl instead of tids.jsonl.
    #[arg(long)]
    compressed: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Most recent items kept per history.
    #[arg(long)]
    max_history: Option<usize>,
    /// One sequence sample per prefix length instead of one per user.
    #[arg(long)]
    per_step: bool,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Copies of each identifier-generation sample.
    #[arg(long)]
    gti_repeat: Option<usize>,
    /// Copies of each sequence sample.
    #[arg(long)]
    seq_repeat: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMock {
    /// Emits library identifiers chosen by prompt hash.
    Library,
    /// Emits each sample's target identifier first.
    Oracle,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Metric cutoffs, comma separated; the beam width is the largest.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Pool VR/DHR over all candidates instead of averaging per user.
    #[arg(long)]
    pooled: bool,
    /// Offline generator instead of the service.
    #[arg(long, value_enum)]
    mock: Option<EvalMock>,
    #[command(flatten)]
    generator: GeneratorArgs,
}

fn apply_generator(cfg: &mut PipelineConfig, a: &GeneratorArgs) {
    if let Some(v) = &a.generator_url {
        cfg.generator.base_url = v.clone();
    }
    if let Some(v) = &a.generator_model {
        cfg.generator.model = v.clone();
    }
    if let Some(v) = a.max_in_flight {
        cfg.generator.max_in_flight = v;
    }
}

fn apply_embedder(cfg: &mut PipelineConfig, a: &EmbedderArgs) {
    if let Some(v) = &a.embedder_url {
        cfg.embedder.base_url = v.clone();
    }
    if let Some(v) = &a.embedder_model {
        cfg.embedder.model = v.clone();
    }
}

/// Overlays the flags of `command` on `cfg`.
fn apply_flags(cfg: &mut PipelineConfig, command: &Command) {
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    match command {
        Command::Ingest(a) => {
            if a.metadata.is_some() {
                cfg.corpus.metadata = a.metadata.clone();
            }
            if a.reviews.is_some() {
                cfg.corpus.reviews = a.reviews.clone();
            }
            if a.domain.is_some() {
                cfg.corpus.domain = a.domain.clone();
            }
            set!(cfg.corpus.k_core, a.k_core);
            if a.cross_metadata.is_some() {
                cfg.corpus.cross_domain = Some(CorpusInput {
                    metadata: a.cross_metadata.clone(),
                    reviews: a.cross_reviews.clone(),
                    domain: a.cross_domain.clone(),
                });
            }
        }
        Command::Ctg(a) => {
            set!(cfg.ctg.k, a.k);
            set!(cfg.ctg.tid_len, a.tid_len);
            set!(cfg.ctg.parse_retries, a.parse_retries);
            set!(cfg.ctg.checkpoint_every, a.checkpoint_every);
            if a.no_exemplar_feedback {
                cfg.ctg.exemplar_feedback = false;
            }
            apply_generator(cfg, &a.generator);
            apply_embedder(cfg, &a.embedder);
        }
        Command::Compress(a) => {
            if a.k.is_some() {
                cfg.compress.k = a.k;
            }
            set!(cfg.compress.seed, a.seed);
            set!(cfg.compress.max_iters, a.max_iters);
            apply_embedder(cfg, &a.embedder);
        }
        Command::ExportIift(a) => {
            cfg.use_compressed |= a.source.compressed;
            set!(cfg.export.max_history, a.max_history);
            cfg.export.per_step |= a.per_step;
            set!(cfg.export.shuffle_seed, a.shuffle_seed);
            set!(cfg.export.gti_repeat, a.gti_repeat);
            set!(cfg.export.seq_repeat, a.seq_repeat);
        }
        Command::BuildLibrary(a) => cfg.use_compressed |= a.compressed,
        Command::Eval(a) => {
            set!(cfg.eval.ks, a.ks);
            if a.pooled {
                cfg.eval.averaging = Averaging::Pooled;
            }
            apply_generator(cfg, &a.generator);
        }
        Command::Ground | Command::Smoke => {}
    }
}

fn embedder(cfg: &PipelineConfig, mock: bool) -> Result<Box<dyn Embedder>> {
    Ok(if mock {
        Box::new(HashingEmbedder::new(64))
    } else {
        Box::new(EmbeddingClient::new(cfg.embedder.clone())?)
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    apply_flags(&mut cfg, &cli.command);
    cfg.validate()?;
    let wd = cli.workdir.as_path();
    if !matches!(cli.command, Command::Ground | Command::Smoke) {
        pipeline::write_effective_config(wd, &cfg)?;
    }

    match &cli.command {
        Command::Ingest(_) => {
            let c = pipeline::run_ingest(wd, &cfg)?;
            println!(
                "{} users, {} items, {} interactions",
                c.stats.user_count, c.stats.item_count, c.stats.interaction_count
            );
        }
        Command::Ctg(a) => {
            let generator: Box<dyn Generator> = if a.mock {
                let corpus = Corpus::read_dir(wd)
                    .context("reading the corpus; run `termid ingest` first")?;
                Box::new(metadata_mock(&corpus, cfg.ctg.tid_len))
            } else {
                Box::new(ChatClient::new(cfg.generator.clone())?)
            };
            let out = pipeline::run_ctg(wd, &cfg, generator.as_ref(), embedder(&cfg, a.mock)?.as_ref(), a.restart)?;
            println!(
                "{} identifiers ({} resumed), {} failures",
                out.tids.len(),
                out.resumed,
                out.failures.len()
            );
        }
        Command::Compress(a) => {
            let meta = pipeline::run_compress(wd, &cfg, embedder(&cfg, a.mock)?.as_ref())?;
            println!(
                "{} terms -> {} core terms in {} iterations (objective {:.6})",
                meta.vocabulary_size, meta.compressed_vocabulary_size, meta.iterations, meta.final_objective
            );
        }
        Command::ExportIift(_) => {
            let c = pipeline::run_export(wd, &cfg)?;
            println!(
                "{} gti + {} seq training samples; {} valid, {} test evaluation samples",
                c.gti_samples, c.seq_samples, c.eval_valid.samples, c.eval_test.samples
            );
        }
        Command::BuildLibrary(_) => {
            let m = pipeline::run_build_library(wd, &cfg)?;
            println!("{} items, {} identifier collisions", m.items, m.collisions.len());
        }
        Command::Ground => {
            let lib = load_library(wd)?;
            let out = BufWriter::new(io::stdout().lock());
            pipeline::ground_lines(&lib, io::stdin().lock(), out)?;
        }
        Command::Eval(a) => {
            let split = match a.split {
                Split::Valid => EvalMode::Valid,
                Split::Test => EvalMode::Test,
            };
            let generator: Box<dyn Generator> = match a.mock {
                None => Box::new(ChatClient::new(cfg.generator.clone())?),
                Some(EvalMock::Library) => Box::new(library_eval_mock(&load_library(wd)?)),
                Some(EvalMock::Oracle) => {
                    let beam = cfg.eval.ks.iter().copied().max().unwrap_or(1);
                    Box::new(oracle_eval_mock(&load_eval_samples(wd, split)?, &load_library(wd)?, beam))
                }
            };
            let (report, _) = pipeline::run_eval(wd, &cfg, split, generator.as_ref())?;
            for &k in &cfg.eval.ks {
                println!(
                    "K={k}: recall {:.4}  ndcg {:.4}  VR {:.4}  DHR {:.4}",
                    report.recall_at[&k], report.ndcg_at[&k], report.vr_at[&k], report.dhr_at[&k]
                );
            }
            println!(
                "{} users, {} dropped, {} generation failures",
                report.num_users, report.num_dropped, report.generation_failures
            );
        }
        Command::Smoke => {
            let out = pipeline::run_smoke(wd)?;
            for c in &out.checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("finished in {:.2}s", out.elapsed_secs);
            if !out.passed() {
                bail!("smoke checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
