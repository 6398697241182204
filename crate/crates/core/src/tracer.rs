//! Routing trace collection and analysis.
//!
//! During training or evaluation, every (step, layer, token) routing
//! decision can be recorded as a [`RoutingRecord`]: the dense gate
//! probabilities plus the selected expert set. [`summarize`] reduces a
//! record stream to per-(layer, token type) expert histograms, per-layer
//! load fractions and normalized routing entropy, and a specialization
//! score (normalized mutual information between token types and top-1
//! experts). Summaries export to CSV (histograms) with a companion JSON
//! file (scalar metrics), or to a single JSON file, and re-import losslessly.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::losses::SeparationScore;

/// How far a recorded probability vector may stray from summing to 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Errors raised while recording, summarizing, or exporting traces.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceError {
    /// The probability vector does not sum to 1 within tolerance.
    BadProbabilitySum { sum: f64 },
    /// A probability entry is negative, above 1, or not finite.
    BadProbabilityEntry { value: f64 },
    /// A record carries no probabilities or no selection.
    EmptyRecord,
    /// A selected expert index is outside the gate's range.
    SelectionOutOfRange { index: usize, n_experts: usize },
    /// The same expert appears twice in one selection.
    DuplicateSelection { index: usize },
    /// Records disagree on the named dimension (expert count or top-k).
    InconsistentRecords { field: &'static str },
    /// An operation needs at least one record.
    NoRecords,
    /// Filesystem failure, with the offending path.
    Io { path: String, message: String },
    /// A file exists but cannot be parsed back into a summary.
    Format { message: String },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::BadProbabilitySum { sum } => {
                write!(f, "gate probabilities sum to {sum}, expected 1")
            }
            TraceError::BadProbabilityEntry { value } => {
                write!(f, "gate probability {value} outside [0, 1]")
            }
            TraceError::EmptyRecord => write!(f, "record has no probabilities or no selection"),
            TraceError::SelectionOutOfRange { index, n_experts } => {
                write!(
                    f,
                    "selected expert {index} out of range for {n_experts} experts"
                )
            }
            TraceError::DuplicateSelection { index } => {
                write!(f, "expert {index} selected twice in one record")
            }
            TraceError::InconsistentRecords { field } => {
                write!(f, "records disagree on {field}")
            }
            TraceError::NoRecords => write!(f, "no records to process"),
            TraceError::Io { path, message } => write!(f, "{path}: {message}"),
            TraceError::Format { message } => write!(f, "malformed trace file: {message}"),
        }
    }
}

impl Error for TraceError {}

/// One routing decision: which experts one token was sent to at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub step: usize,
    pub layer: usize,
    pub token: usize,
    /// Free-form tag for the token's kind (e.g. a cluster id).
    pub token_type: String,
    /// Dense softmax output for this token, length `n_experts`.
    pub gate_probs: Vec<f64>,
    /// The `top_k` experts this token was routed to.
    pub selected: Vec<usize>,
}

impl RoutingRecord {
    /// Index of the most probable expert, ties toward the lower index.
    pub fn top1(&self) -> usize {
        let mut arg = 0;
        for (j, &p) in self.gate_probs.iter().enumerate().skip(1) {
            if p > self.gate_probs[arg] {
                arg = j;
            }
        }
        arg
    }

    fn validate(&self) -> Result<(), TraceError> {
        if self.gate_probs.is_empty() || self.selected.is_empty() {
            return Err(TraceError::EmptyRecord);
        }
        let mut sum = 0.0;
        for &p in &self.gate_probs {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(TraceError::BadProbabilityEntry { value: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(TraceError::BadProbabilitySum { sum });
        }
        let n = self.gate_probs.len();
        let mut seen = vec![false; n];
        for &i in &self.selected {
            if i >= n {
                return Err(TraceError::SelectionOutOfRange {
                    index: i,
                    n_experts: n,
                });
            }
            if seen[i] {
                return Err(TraceError::DuplicateSelection { index: i });
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Collects validated routing records. Single writer: clone records out if
/// several consumers need them.
#[derive(Debug, Default)]
pub struct TraceRecorder {
    records: Vec<RoutingRecord>,
}

impl TraceRecorder {
    pub fn new() -> Self {
        TraceRecorder::default()
    }

    /// Validates and stores one record; invalid records are rejected whole.
    pub fn record(&mut self, record: RoutingRecord) -> Result<(), TraceError> {
        record.validate()?;
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[RoutingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Expert usage histogram for one (layer, token type) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub layer: usize,
    pub token_type: String,
    /// How often each expert appeared in this group's selections; sums to
    /// `top_k * tokens` for the group.
    pub counts: Vec<u64>,
}

/// Per-layer routing statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Fraction of tokens whose top-1 expert is `i`; sums to 1.
    pub load: Vec<f64>,
    /// Entropy of `load` normalized by `ln(n)`: 1 under uniform routing,
    /// 0 under collapse (and 0 for the degenerate single-expert case).
    pub entropy: f64,
}

/// Aggregated view of a routing trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSummary {
    pub num_experts: usize,
    pub top_k: usize,
    /// Sorted by (layer, token_type).
    pub histograms: Vec<HistogramEntry>,
    /// Sorted by layer.
    pub layers: Vec<LayerStats>,
    /// Normalized mutual information between token types and top-1
    /// experts, pooled over all layers. 0 means routing ignores the type.
    pub nmi: f64,
    /// Expert output separation, attached by the caller when available.
    pub separation: Option<SeparationScore>,
}

impl RoutingSummary {
    pub fn with_separation(mut self, separation: SeparationScore) -> Self {
        self.separation = Some(separation);
        self
    }
}

/// Reduces a record stream to histograms, load statistics, and NMI.
pub fn summarize(records: &[RoutingRecord]) -> Result<RoutingSummary, TraceError> {
    let first = records.first().ok_or(TraceError::NoRecords)?;
    let n = first.gate_probs.len();
    let top_k = first.selected.len();

    let mut histograms: BTreeMap<(usize, String), Vec<u64>> = BTreeMap::new();
    let mut layer_top1: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut contingency: BTreeMap<(String, usize), u64> = BTreeMap::new();

    for r in records {
        if r.gate_probs.len() != n {
            return Err(TraceError::InconsistentRecords {
                field: "expert count",
            });
        }
        if r.selected.len() != top_k {
            return Err(TraceError::InconsistentRecords { field: "top_k" });
        }
        let hist = histograms
            .entry((r.layer, r.token_type.clone()))
            .or_insert_with(|| vec![0; n]);
        for &i in &r.selected {
            hist[i] += 1;
        }
        let loads = layer_top1.entry(r.layer).or_insert_with(|| vec![0; n]);
        let top1 = r.top1();
        loads[top1] += 1;
        *contingency.entry((r.token_type.clone(), top1)).or_insert(0) += 1;
    }

    let histograms = histograms
        .into_iter()
        .map(|((layer, token_type), counts)| HistogramEntry {
            layer,
            token_type,
            counts,
        })
        .collect();

    let layers = layer_top1
        .into_iter()
        .map(|(layer, counts)| {
            let total: u64 = counts.iter().sum();
            let load: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
            LayerStats {
                layer,
                entropy: normalized_entropy(&load),
                load,
            }
        })
        .collect();

    Ok(RoutingSummary {
        num_experts: n,
        top_k,
        histograms,
        layers,
        nmi: normalized_mutual_information(&contingency),
        separation: None,
    })
}

/// Entropy of a distribution divided by `ln(len)`; 0 for a single bucket.
fn normalized_entropy(dist: &[f64]) -> f64 {
    if dist.len() < 2 {
        return 0.0;
    }
    let h: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h / (dist.len() as f64).ln()
}

/// NMI with arithmetic-mean normalization: `I(X;Y) / ((H(X) + H(Y)) / 2)`.
/// Defined as 0 when either marginal is constant.
fn normalized_mutual_information(contingency: &BTreeMap<(String, usize), u64>) -> f64 {
    let total: u64 = contingency.values().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let mut px: BTreeMap<&String, f64> = BTreeMap::new();
    let mut py: BTreeMap<usize, f64> = BTreeMap::new();
    for ((x, y), &c) in contingency {
        *px.entry(x).or_insert(0.0) += c as f64 / n;
        *py.entry(*y).or_insert(0.0) += c as f64 / n;
    }
    let hx: f64 = px.values().map(|&p| -p * p.ln()).sum();
    let hy: f64 = py.values().map(|&p| -p * p.ln()).sum();
    if hx + hy == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for ((x, y), &c) in contingency {
        let pxy = c as f64 / n;
        if pxy > 0.0 {
            mi += pxy * (pxy / (px[x] * py[y])).ln();
        }
    }
    2.0 * mi / (hx + hy)
}

/// Token-type frequencies ranked by descending count, ties by tag order.
///
/// Each token occurrence is counted once (at the lowest recorded layer),
/// not once per layer.
pub fn token_frequency_table(records: &[RoutingRecord]) -> Result<Vec<(String, u64)>, TraceError> {
    let min_layer = records
        .iter()
        .map(|r| r.layer)
        .min()
        .ok_or(TraceError::NoRecords)?;
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.layer == min_layer) {
        *counts.entry(&r.token_type).or_insert(0) += 1;
    }
    let mut table: Vec<(String, u64)> = counts
        .into_iter()
        .map(|(tag, c)| (tag.to_string(), c))
        .collect();
    table.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(table)
}

/// On-disk representations for a summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    /// Histogram CSV plus a `.metrics.json` companion for the scalars.
    Csv,
    /// Everything in one JSON document.
    Json,
}

/// Scalar half of the CSV export, stored in the companion JSON file.
#[derive(Serialize, Deserialize)]
struct CsvCompanion {
    num_experts: usize,
    top_k: usize,
    layers: Vec<LayerStats>,
    nmi: f64,
    separation: Option<SeparationScore>,
}

fn companion_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("metrics.json")
}

fn io_err(path: &Path, e: impl fmt::Display) -> TraceError {
    TraceError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes a summary to disk in the chosen format.
///
/// CSV rows are `layer,token_type,expert,count,fraction` with one row per
/// expert per histogram group (zero counts included), where `fraction` is
/// the expert's share of the group's assignments. A summary without
/// histograms produces a header-only CSV.
pub fn export(
    summary: &RoutingSummary,
    path: &Path,
    format: ExportFormat,
) -> Result<(), TraceError> {
    match format {
        ExportFormat::Json => {
            let body = serde_json::to_string_pretty(summary).map_err(|e| TraceError::Format {
                message: e.to_string(),
            })?;
            fs::write(path, body).map_err(|e| io_err(path, e))
        }
        ExportFormat::Csv => {
            let mut writer = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
            writer
                .write_record(["layer", "token_type", "expert", "count", "fraction"])
                .map_err(|e| io_err(path, e))?;
            for entry in &summary.histograms {
                let group_total: u64 = entry.counts.iter().sum();
                for (expert, &count) in entry.counts.iter().enumerate() {
                    let fraction = if group_total == 0 {
                        0.0
                    } else {
                        count as f64 / group_total as f64
                    };
                    writer
                        .write_record([
                            entry.layer.to_string(),
                            entry.token_type.clone(),
                            expert.to_string(),
                            count.to_string(),
                            format!("{fraction}"),
                        ])
                        .map_err(|e| io_err(path, e))?;
                }
            }
            writer.flush().map_err(|e| io_err(path, e))?;

            let companion = CsvCompanion {
                num_experts: summary.num_experts,
                top_k: summary.top_k,
                layers: summary.layers.clone(),
                nmi: summary.nmi,
                separation: summary.separation,
            };
            let cpath = companion_path(path);
            let body =
                serde_json::to_string_pretty(&companion).map_err(|e| TraceError::Format {
                    message: e.to_string(),
                })?;
            fs::write(&cpath, body).map_err(|e| io_err(&cpath, e))
        }
    }
}

/// Reads back a summary written by [`export`].
pub fn import(path: &Path, format: ExportFormat) -> Result<RoutingSummary, TraceError> {
    match format {
        ExportFormat::Json => {
            let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            serde_json::from_str(&body).map_err(|e| TraceError::Format {
                message: e.to_string(),
            })
        }
        ExportFormat::Csv => {
            let cpath = companion_path(path);
            let body = fs::read_to_string(&cpath).map_err(|e| io_err(&cpath, e))?;
            let companion: CsvCompanion =
                serde_json::from_str(&body).map_err(|e| TraceError::Format {
                    message: e.to_string(),
                })?;

            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_path(path)
                .map_err(|e| io_err(path, e))?;
            let mut groups: BTreeMap<(usize, String), Vec<u64>> = BTreeMap::new();
            for row in reader.records() {
                let row = row.map_err(|e| TraceError::Format {
                    message: e.to_string(),
                })?;
                if row.len() != 5 {
                    return Err(TraceError::Format {
                        message: format!("expected 5 columns, got {}", row.len()),
                    });
                }
                let layer: usize = parse_field(&row[0])?;
                let token_type = row[1].to_string();
                let expert: usize = parse_field(&row[2])?;
                let count: u64 = parse_field(&row[3])?;
                if expert >= companion.num_experts {
                    return Err(TraceError::Format {
                        message: format!(
                            "expert column {expert} out of range for {} experts",
                            companion.num_experts
                        ),
                    });
                }
                groups
                    .entry((layer, token_type))
                    .or_insert_with(|| vec![0; companion.num_experts])[expert] = count;
            }
            let histograms = groups
                .into_iter()
                .map(|((layer, token_type), counts)| HistogramEntry {
                    layer,
                    token_type,
                    counts,
                })
                .collect();
            Ok(RoutingSummary {
                num_experts: companion.num_experts,
                top_k: companion.top_k,
                histograms,
                layers: companion.layers,
                nmi: companion.nmi,
                separation: companion.separation,
            })
        }
    }
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T, TraceError>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e: T::Err| TraceError::Format {
        message: format!("bad field {s:?}: {e}"),
    })
}
