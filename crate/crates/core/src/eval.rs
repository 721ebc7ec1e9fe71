//! Ranking metrics over grounded beam outputs.
//!
//! Recall@K and NDCG@K use a single relevant item (the held-out target), so
//! the ideal DCG is 1 and a hit at 1-based rank `r` scores `1 / log2(r + 1)`.
//! Valid Rate and Direct Hit Rate measure how often raw candidates are exact
//! library identifiers and how often successful groundings came from the
//! exact-match track.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grounding::{CandidateLibrary, Track};
use crate::iift::EvalSample;
use crate::io::{self, IoError};
use crate::services::{parallel_map, GenerationRequest, Generator, ServiceError};

pub const REPORT_FILE: &str = "report.json";
pub const DETAILS_FILE: &str = "details.tsv";
/// Generation length cap for next-item identifiers.
pub const EVAL_MAX_NEW_TOKENS: u32 = 30;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no evaluation samples")]
    NoSamples,
    #[error("metric cutoffs must be non-empty and >= 1")]
    InvalidCutoffs,
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub user_id: String,
    pub target_item_id: String,
    /// Distinct grounded items, best first.
    pub grounded_items: Vec<String>,
    pub raw_candidates: Vec<String>,
    pub validity_flags: Vec<bool>,
    pub tracks: Vec<Track>,
    /// Generation failed; the sample scores zero on every metric.
    pub failed: bool,
}

/// How per-candidate proportions are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of per-user proportions.
    #[default]
    PerUser,
    /// One proportion over all candidates of all users.
    Pooled,
}

fn rank_of(grounded: &[String], target: &str, k: usize) -> Option<usize> {
    grounded.iter().take(k).position(|g| g == target).map(|p| p + 1)
}

pub fn recall_at_k(grounded: &[String], target: &str, k: usize) -> f64 {
    if rank_of(grounded, target, k).is_some() {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(grounded: &[String], target: &str, k: usize) -> f64 {
    rank_of(grounded, target, k).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2())
}

/// Numerator and denominator of the valid fraction among the first `k` candidates.
fn valid_counts(p: &RankedPrediction, k: usize) -> (usize, usize) {
    let flags = &p.validity_flags[..p.validity_flags.len().min(k)];
    (flags.iter().filter(|&&v| v).count(), flags.len())
}

fn direct_counts(p: &RankedPrediction, k: usize) -> (usize, usize) {
    let tracks = &p.tracks[..p.tracks.len().min(k)];
    let ok = tracks.iter().filter(|&&t| t != Track::None).count();
    (tracks.iter().filter(|&&t| t == Track::Direct).count(), ok)
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Mean of `n_i / d_i` (zero where `d_i == 0`), summed exactly over a
/// common denominator and rounded once, so ten users at 9/10 average to
/// exactly 0.9.
fn mean_of_ratios(parts: &[(usize, usize)]) -> f64 {
    if parts.is_empty() {
        return 0.0;
    }
    let parts: Vec<(u128, u128)> = parts
        .iter()
        .map(|&(n, d)| if d == 0 { (0, 1) } else { (n as u128, d as u128) })
        .collect();
    const EXACT: u128 = 1 << 53;
    let exact = parts
        .iter()
        .try_fold(1u128, |l, &(_, d)| l.checked_mul(d / gcd(l, d)))
        .and_then(|l| {
            let num = parts
                .iter()
                .try_fold(0u128, |acc, &(n, d)| acc.checked_add(n * (l / d)))?;
            let den = l.checked_mul(parts.len() as u128)?;
            (num < EXACT && den < EXACT).then(|| num as f64 / den as f64)
        });
    exact.unwrap_or_else(|| {
        parts.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / parts.len() as f64
    })
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Users with fewer than `k` candidates are averaged over what they have;
/// users with none (including failures) score zero.
pub fn valid_rate_at_k(predictions: &[RankedPrediction], k: usize, averaging: Averaging) -> f64 {
    let counts: Vec<(usize, usize)> = predictions.iter().map(|p| valid_counts(p, k)).collect();
    match averaging {
        Averaging::PerUser => mean_of_ratios(&counts),
        Averaging::Pooled => {
            let (n, d) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            ratio(n, d)
        }
    }
}

/// Users without any successful grounding in the first `k` candidates are
/// left out of the average.
pub fn direct_hit_rate_at_k(predictions: &[RankedPrediction], k: usize, averaging: Averaging) -> f64 {
    let counts: Vec<(usize, usize)> = predictions
        .iter()
        .map(|p| direct_counts(p, k))
        .filter(|&(_, d)| d > 0)
        .collect();
    match averaging {
        Averaging::PerUser => mean_of_ratios(&counts),
        Averaging::Pooled => {
            let (n, d) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            ratio(n, d)
        }
    }
}

fn ratio_f(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub vr_at: BTreeMap<usize, f64>,
    pub dhr_at: BTreeMap<usize, f64>,
    pub num_users: usize,
    /// Samples left out before evaluation (e.g. targets without identifiers).
    pub num_dropped: usize,
    pub generation_failures: usize,
    /// Users that returned fewer candidates than the largest cutoff.
    pub short_beams: usize,
    pub averaging: Averaging,
}

pub fn aggregate(
    predictions: &[RankedPrediction],
    ks: &[usize],
    averaging: Averaging,
    num_dropped: usize,
) -> MetricsReport {
    let n = predictions.len();
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut report = MetricsReport {
        recall_at: BTreeMap::new(),
        ndcg_at: BTreeMap::new(),
        vr_at: BTreeMap::new(),
        dhr_at: BTreeMap::new(),
        num_users: n,
        num_dropped,
        generation_failures: predictions.iter().filter(|p| p.failed).count(),
        short_beams: predictions
            .iter()
            .filter(|p| p.raw_candidates.len() < max_k)
            .count(),
        averaging,
    };
    for &k in ks {
        let recall: f64 = predictions
            .iter()
            .map(|p| recall_at_k(&p.grounded_items, &p.target_item_id, k))
            .sum();
        let ndcg: f64 = predictions
            .iter()
            .map(|p| ndcg_at_k(&p.grounded_items, &p.target_item_id, k))
            .sum();
        report.recall_at.insert(k, ratio_f(recall, n));
        report.ndcg_at.insert(k, ratio_f(ndcg, n));
        report.vr_at.insert(k, valid_rate_at_k(predictions, k, averaging));
        report.dhr_at.insert(k, direct_hit_rate_at_k(predictions, k, averaging));
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub averaging: Averaging,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10],
            averaging: Averaging::PerUser,
            max_new_tokens: EVAL_MAX_NEW_TOKENS,
            temperature: 0.0,
        }
    }
}

/// Generates `max(ks)` candidates per sample, grounds them and scores the
/// result. Failed generations are kept as all-zero predictions.
pub fn evaluate(
    samples: &[EvalSample],
    generator: &dyn Generator,
    library: &CandidateLibrary,
    config: &EvalConfig,
    num_dropped: usize,
) -> Result<(MetricsReport, Vec<RankedPrediction>), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if config.ks.is_empty() || config.ks.contains(&0) {
        return Err(EvalError::InvalidCutoffs);
    }
    let beam = config.ks.iter().copied().max().unwrap();
    let predictions = parallel_map(samples.len(), generator.max_in_flight(), |i| {
        let s = &samples[i];
        let request = GenerationRequest {
            system_text: s.instruction.clone(),
            user_text: s.input.clone(),
            max_new_tokens: config.max_new_tokens,
            num_return_sequences: beam as u32,
            temperature: config.temperature,
        };
        predict(s, generator.generate(&request), library, beam)
    });
    Ok((aggregate(&predictions, &config.ks, config.averaging, num_dropped), predictions))
}

fn predict(
    sample: &EvalSample,
    generated: Result<Vec<String>, ServiceError>,
    library: &CandidateLibrary,
    beam: usize,
) -> RankedPrediction {
    let mut p = RankedPrediction {
        user_id: sample.user_id.clone(),
        target_item_id: sample.target_item_id.clone(),
        grounded_items: Vec::new(),
        raw_candidates: Vec::new(),
        validity_flags: Vec::new(),
        tracks: Vec::new(),
        failed: false,
    };
    match generated {
        Ok(mut candidates) => {
            candidates.truncate(beam);
            let g = library.ground_beam(&candidates, beam);
            p.grounded_items = g.items;
            p.validity_flags = g.candidates.iter().map(|c| c.valid).collect();
            p.tracks = g.candidates.iter().map(|c| c.track).collect();
            p.raw_candidates = candidates;
        }
        Err(e) => {
            log::warn!("generation failed for user {}: {e}", sample.user_id);
            p.failed = true;
        }
    }
    p
}

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// One row per user: user_id, target, failed flag, ranked items, then
/// `|`-joined validity flags and tracks per candidate.
pub fn details_tsv(predictions: &[RankedPrediction]) -> String {
    let mut out = String::from("user_id\ttarget\tfailed\tgrounded_items\tvalid\ttracks\n");
    for p in predictions {
        let valid: Vec<&str> = p.validity_flags.iter().map(|&v| if v { "1" } else { "0" }).collect();
        let tracks: Vec<&str> = p.tracks.iter().map(|t| t.as_str()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            tsv_field(&p.user_id),
            tsv_field(&p.target_item_id),
            u8::from(p.failed),
            tsv_field(&p.grounded_items.join(",")),
            valid.join("|"),
            tracks.join("|"),
        );
    }
    out
}

pub fn write_report(dir: &Path, report: &MetricsReport, predictions: &[RankedPrediction]) -> Result<(), IoError> {
    io::write_json(&dir.join(REPORT_FILE), report)?;
    let path = dir.join(DETAILS_FILE);
    fs::write(&path, details_tsv(predictions)).map_err(|source| IoError::Write { path, source })
}
