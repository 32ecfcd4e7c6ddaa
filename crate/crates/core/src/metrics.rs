//! Diversity entropy of embedded corpora and run bookkeeping.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::embedding::{pca_project, EmbeddingError, EmbeddingVector};
use crate::generator::{GenerationRecord, GenerationStatus};
use crate::verifier::Verdict;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_DIMS: usize = 3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("entropy needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("bins and dims must be positive")]
    BadShape,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyReport {
    pub entropy_nats: f64,
    pub n_samples: usize,
    pub bins_per_axis: usize,
    pub dims: usize,
    pub occupied_cells: usize,
}

/// Per-axis bin index in `0..bins`; a degenerate axis puts every value in bin 0.
fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((x - lo) / (hi - lo) * bins as f64).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

/// Joint histogram of already-projected points over `bins^dims` cells,
/// keyed by the cell's per-axis bin indices.
pub fn joint_histogram(points: &[Vec<f64>], bins: usize) -> BTreeMap<Vec<usize>, usize> {
    let dims = points.first().map_or(0, Vec::len);
    let ranges: Vec<(f64, f64)> = (0..dims)
        .map(|d| {
            points
                .iter()
                .map(|p| p[d])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
        })
        .collect();
    let mut hist = BTreeMap::new();
    for p in points {
        let cell: Vec<usize> = p.iter().zip(&ranges).map(|(&x, &(lo, hi))| bin_of(x, lo, hi, bins)).collect();
        *hist.entry(cell).or_insert(0) += 1;
    }
    hist
}

/// Shannon entropy in nats of the empirical distribution given by `counts`.
pub fn shannon_entropy<I: IntoIterator<Item = usize>>(counts: I) -> f64 {
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: usize = counts.iter().sum();
    if counts.len() <= 1 {
        return 0.0;
    }
    let n = total as f64;
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Projects the vectors onto their top `dims` principal components, bins each
/// axis into `bins` equal-width bins over its own range, and returns the
/// entropy of the joint histogram. Inputs with fewer than `dims` dimensions
/// get degenerate extra axes.
pub fn diversity_entropy(vectors: &[EmbeddingVector], bins: usize, dims: usize) -> Result<EntropyReport, MetricsError> {
    if vectors.len() < 2 {
        return Err(MetricsError::TooFewVectors(vectors.len()));
    }
    if bins == 0 || dims == 0 {
        return Err(MetricsError::BadShape);
    }
    let k = dims.min(vectors[0].dim());
    let projected = pca_project(vectors, k)?;
    let points: Vec<Vec<f64>> = projected
        .iter()
        .map(|p| {
            let mut v = p.values().to_vec();
            v.resize(dims, 0.0);
            v
        })
        .collect();
    let hist = joint_histogram(&points, bins);
    Ok(EntropyReport {
        entropy_nats: shannon_entropy(hist.values().copied()),
        n_samples: vectors.len(),
        bins_per_axis: bins,
        dims,
        occupied_cells: hist.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StatsReport {
    pub records: usize,
    pub by_status: BTreeMap<GenerationStatus, usize>,
    /// Share of records with status `ok`; 0 for no records.
    pub ok_rate: f64,
    /// Share of verdicts that rejected; 0 for no verdicts.
    pub rejection_rate: f64,
    pub verified: usize,
    pub rejected: usize,
    /// Records keyed by number of attempts made.
    pub attempts_histogram: BTreeMap<u32, usize>,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub rejection_reasons: BTreeMap<String, usize>,
}

pub fn run_stats(records: &[GenerationRecord], verdicts: &[Verdict]) -> StatsReport {
    let mut by_status = BTreeMap::new();
    let mut attempts_histogram = BTreeMap::new();
    for r in records {
        *by_status.entry(r.status).or_insert(0) += 1;
        *attempts_histogram.entry(r.attempts).or_insert(0) += 1;
    }
    let ok = by_status.get(&GenerationStatus::Ok).copied().unwrap_or(0);
    let rejected = verdicts.iter().filter(|v| !v.accepted).count();
    let mut reasons: HashMap<&'static str, usize> = HashMap::new();
    for v in verdicts {
        for r in &v.reasons {
            *reasons.entry(r.as_str()).or_insert(0) += 1;
        }
    }
    StatsReport {
        records: records.len(),
        by_status,
        ok_rate: if records.is_empty() { 0.0 } else { ok as f64 / records.len() as f64 },
        rejection_rate: if verdicts.is_empty() {
            0.0
        } else {
            rejected as f64 / verdicts.len() as f64
        },
        verified: verdicts.len(),
        rejected,
        attempts_histogram,
        input_tokens: records.iter().map(|r| r.input_tokens).sum(),
        output_tokens: records.iter().map(|r| r.output_tokens).sum(),
        rejection_reasons: reasons.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
    }
}
