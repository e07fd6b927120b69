//! Per-update metrics, their CSV form, and offline analyses over rollout logs.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::{TokenRecord, TrainBatch};
use crate::env::RolloutRecord;
use crate::error::{Error, Result};
use crate::policy::{sequence_logprob, PolicySnapshot};
use crate::trust_region::{divergence_report, DivergenceReport};

/// One row of `metrics.csv`. Column order is the field order below and is
/// part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: u64,
    pub step: u64,
    pub realized_staleness: u64,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub clipping_ratio: f64,
    pub masked_ratio: f64,
    pub kl_hat: f64,
    pub m2_hat: f64,
    pub abs_kl_hat: f64,
    pub chi2_hat: f64,
    pub mean_entropy: f64,
    pub token_count: u64,
}

pub const METRICS_COLUMNS: &[&str] = &[
    "update",
    "step",
    "realized_staleness",
    "mean_reward",
    "accuracy",
    "clipping_ratio",
    "masked_ratio",
    "kl_hat",
    "m2_hat",
    "abs_kl_hat",
    "chi2_hat",
    "mean_entropy",
    "token_count",
];

/// Live-policy evaluation, written to `evals.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub update: u64,
    pub mean_reward: f64,
    pub accuracy: f64,
}

/// Append-only CSV sink that refuses out-of-order or gapped updates.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    next_update: u64,
}

impl MetricsWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(File::create(path)?))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(w),
            next_update: 0,
        }
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        if rec.update != self.next_update {
            return Err(Error::Contract(format!(
                "metrics row for update {} but expected {}",
                rec.update, self.next_update
            )));
        }
        self.inner.serialize(rec)?;
        self.inner.flush()?;
        self.next_update += 1;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(Error::Contract(format!(
            "unexpected metrics header: {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_metrics(BufReader::new(File::open(path)?))
}

pub fn write_csv<T: Serialize, W: Write>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Token-weighted mean of the per-update clipping ratio.
pub fn average_clipping_ratio(metrics: &[MetricsRecord]) -> Result<f64> {
    weighted_average(metrics, |m| m.clipping_ratio)
}

/// Token-weighted mean of the per-update masked ratio.
pub fn average_masked_ratio(metrics: &[MetricsRecord]) -> Result<f64> {
    weighted_average(metrics, |m| m.masked_ratio)
}

fn weighted_average(metrics: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> f64) -> Result<f64> {
    if metrics.is_empty() {
        return Err(Error::Contract(
            "average over an empty metrics series".into(),
        ));
    }
    let total: u64 = metrics.iter().map(|m| m.token_count).sum();
    if total == 0 {
        return Ok(metrics.iter().map(&f).sum::<f64>() / metrics.len() as f64);
    }
    Ok(metrics
        .iter()
        .map(|m| f(m) * m.token_count as f64)
        .sum::<f64>()
        / total as f64)
}

pub const DEFAULT_BIN_EDGES: &[f64] = &[0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6];

/// Behavior entropy grouped by how far each token's ratio is from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBinReport {
    /// Lower edges; bin `i` is `[edges[i], edges[i+1])`, the last bin is open.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// `None` for empty bins.
    pub mean_entropy: Vec<Option<f64>>,
}

impl EntropyBinReport {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn entropy_by_ratio_distance<'a>(
    tokens: impl IntoIterator<Item = &'a TokenRecord>,
    edges: &[f64],
) -> Result<EntropyBinReport> {
    if edges.first() != Some(&0.0) {
        return Err(Error::Config("bin edges must start at 0".into()));
    }
    if edges
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::Config("bin edges must be strictly ascending".into()));
    }
    let mut counts = vec![0u64; edges.len()];
    let mut sums = vec![0.0; edges.len()];
    for t in tokens {
        let d = (t.ratio() - 1.0).abs();
        // last edge <= d
        let bin = edges.partition_point(|&e| e <= d).saturating_sub(1);
        counts[bin] += 1;
        sums[bin] += t.entropy_behav;
    }
    let mean_entropy = counts
        .iter()
        .zip(&sums)
        .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(EntropyBinReport {
        edges: edges.to_vec(),
        counts,
        mean_entropy,
    })
}

/// Divergences of one logged update, recomputed offline.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDivergence {
    pub update: Option<u64>,
    pub report: DivergenceReport,
}

/// Columns: update (empty when the log carries none), token_count, kl_hat,
/// m2_hat, abs_kl_hat, chi2_hat.
pub fn write_divergence_csv<W: Write>(w: W, rows: &[UpdateDivergence]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "update",
        "token_count",
        "kl_hat",
        "m2_hat",
        "abs_kl_hat",
        "chi2_hat",
    ])?;
    for row in rows {
        let r = &row.report;
        wtr.write_record([
            row.update.map(|u| u.to_string()).unwrap_or_default(),
            r.token_count.to_string(),
            r.kl_hat.to_string(),
            r.m2_hat.to_string(),
            r.abs_kl_hat.to_string(),
            r.chi2_hat.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutAnalysis {
    pub per_update: Vec<UpdateDivergence>,
    pub bins: EntropyBinReport,
}

/// Rebuilds token records from a rollout log. Current log-probs come from the
/// log itself when present, otherwise from `checkpoint`.
pub fn tokens_from_rollouts(
    records: &[RolloutRecord],
    checkpoint: Option<&PolicySnapshot>,
    temperature: f64,
) -> Result<Vec<(Option<u64>, TokenRecord)>> {
    let mut out = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        let current = match (&rec.current_logprobs, checkpoint) {
            (Some(c), _) => c.clone(),
            (None, Some(snap)) => {
                sequence_logprob(snap.params(), rec.prompt, &rec.tokens, temperature)?
            }
            (None, None) => {
                return Err(Error::Config(format!(
                    "rollout line {} has no current_logprobs; supply a checkpoint",
                    ri + 1
                )))
            }
        };
        if current.len() != rec.tokens.len() || rec.behavior_logprobs.len() != rec.tokens.len() {
            return Err(Error::Contract(format!(
                "rollout line {}: per-token arrays disagree in length",
                ri + 1
            )));
        }
        for (pos, &tok) in rec.tokens.iter().enumerate() {
            out.push((
                rec.update,
                TokenRecord {
                    prompt: rec.prompt,
                    position: pos,
                    prev: pos.checked_sub(1).map(|p| rec.tokens[p]),
                    token: tok,
                    logp_behav: rec.behavior_logprobs[pos],
                    logp_new: current[pos],
                    advantage: rec.advantage.unwrap_or(0.0),
                    entropy_behav: rec.behavior_entropy[pos],
                    group_index: 0,
                    response_index: ri,
                },
            ));
        }
    }
    Ok(out)
}

/// Per-update divergence reports (in order of first appearance) plus the
/// entropy-vs-|r−1| binning over every token.
pub fn analyze_rollouts(
    records: &[RolloutRecord],
    checkpoint: Option<&PolicySnapshot>,
    temperature: f64,
    edges: &[f64],
) -> Result<RolloutAnalysis> {
    let tokens = tokens_from_rollouts(records, checkpoint, temperature)?;
    let mut order: Vec<Option<u64>> = Vec::new();
    for (u, _) in &tokens {
        if !order.contains(u) {
            order.push(*u);
        }
    }
    let per_update = order
        .into_iter()
        .map(|u| {
            let batch = TrainBatch {
                behavior_version: 0,
                tokens: tokens
                    .iter()
                    .filter(|(v, _)| *v == u)
                    .map(|(_, t)| t.clone())
                    .collect(),
                rewards: vec![],
            };
            Ok(UpdateDivergence {
                update: u,
                report: divergence_report(&batch, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bins = entropy_by_ratio_distance(tokens.iter().map(|(_, t)| t), edges)?;
    Ok(RolloutAnalysis { per_update, bins })
}
