//! Run directories: metrics, evaluations, checkpoints, rollout dumps and the
//! manifest for one training job, plus the row format of sweep summaries.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::env::write_jsonl;
use crate::error::Result;
use crate::policy::PolicySnapshot;
use crate::staleness::ScheduledBatch;
use crate::telemetry::{
    average_clipping_ratio, average_masked_ratio, EvalRecord, MetricsRecord, MetricsWriter,
};
use crate::trainer::{rollout_records, run_training_with, RunStatus, TrainObserver, TrainOutcome};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Content address of a config in git's object format: the SHA-256 of
/// `"blob <len>\0" + text`, where text is the canonical `key=value` form.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let text = cfg.to_kv_string();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub config_hash: String,
    #[serde(flatten)]
    pub status: RunStatus,
    pub updates: u64,
    pub feature_map: String,
}

impl Manifest {
    pub fn new(cfg: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Self {
            config: cfg.clone(),
            config_hash: config_hash(cfg),
            status: outcome.status.clone(),
            updates: outcome.state.version(),
            feature_map: outcome.state.params.feature_map().id(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR)
        .join(format!("step_{step:06}.ckpt"))
}

/// Streams a run's artifacts into a directory as training progresses.
pub struct RunWriter {
    dir: PathBuf,
    metrics: MetricsWriter<File>,
    evals: csv::Writer<File>,
    rollouts: Option<BufWriter<File>>,
}

impl RunWriter {
    pub fn create(dir: &Path, dump_rollouts: bool) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        let rollouts = if dump_rollouts {
            Some(BufWriter::new(File::create(dir.join(ROLLOUTS_FILE))?))
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: MetricsWriter::create(&dir.join(METRICS_FILE))?,
            evals: csv::Writer::from_path(dir.join(EVALS_FILE))?,
            rollouts,
        })
    }

    pub fn finish(self) -> Result<()> {
        self.metrics.into_inner()?.sync_all()?;
        let mut evals = self.evals;
        evals.flush()?;
        if let Some(mut r) = self.rollouts {
            r.flush()?;
        }
        Ok(())
    }
}

impl TrainObserver for RunWriter {
    fn on_update(&mut self, record: &MetricsRecord, batch: &ScheduledBatch) -> Result<()> {
        self.metrics.append(record)?;
        if let Some(w) = self.rollouts.as_mut() {
            write_jsonl(w, &rollout_records(batch))?;
        }
        Ok(())
    }

    fn on_eval(&mut self, eval: &EvalRecord) -> Result<()> {
        self.evals.serialize(eval)?;
        self.evals.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, step: u64, snapshot: &PolicySnapshot) -> Result<()> {
        let mut f = BufWriter::new(File::create(checkpoint_path(&self.dir, step))?);
        snapshot.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Trains `cfg` and writes every artifact under `dir`.
pub fn train_to_dir(cfg: &TrainConfig, dir: &Path) -> Result<(TrainOutcome, Manifest)> {
    cfg.validate()?;
    let mut writer = RunWriter::create(dir, cfg.dump_rollouts)?;
    let outcome = run_training_with(cfg, &mut writer)?;
    writer.finish()?;
    let manifest = Manifest::new(cfg, &outcome);
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok((outcome, manifest))
}

/// One line of a sweep comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub objective: String,
    pub k: u64,
    pub epsilon: f64,
    pub tau_m2: f64,
    pub seed: u64,
    pub status: String,
    pub collapse_update: Option<u64>,
    pub peak_eval_reward: f64,
    pub final_eval_reward: f64,
    pub final_eval_accuracy: f64,
    pub avg_clipping_ratio: f64,
    pub avg_masked_ratio: f64,
    pub mean_m2_hat: f64,
    pub mean_kl_hat: f64,
    pub updates: u64,
}

impl SweepRow {
    pub fn new(cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<Self> {
        let m = &outcome.metrics;
        let mean = |f: fn(&MetricsRecord) -> f64| {
            if m.is_empty() {
                0.0
            } else {
                m.iter().map(f).sum::<f64>() / m.len() as f64
            }
        };
        let (clip, masked) = if m.is_empty() {
            (0.0, 0.0)
        } else {
            (average_clipping_ratio(m)?, average_masked_ratio(m)?)
        };
        let last = outcome.evals.last();
        Ok(Self {
            objective: cfg.objective.to_string(),
            k: cfg.k,
            epsilon: cfg.epsilon,
            tau_m2: cfg.tau_m2,
            seed: cfg.seed,
            status: outcome.status.label().to_string(),
            collapse_update: match outcome.status {
                RunStatus::Collapsed { update, .. } => Some(update),
                RunStatus::Completed => None,
            },
            peak_eval_reward: outcome
                .evals
                .iter()
                .map(|e| e.mean_reward)
                .fold(0.0, f64::max),
            final_eval_reward: last.map_or(0.0, |e| e.mean_reward),
            final_eval_accuracy: last.map_or(0.0, |e| e.accuracy),
            avg_clipping_ratio: clip,
            avg_masked_ratio: masked,
            mean_m2_hat: mean(|r| r.m2_hat),
            mean_kl_hat: mean(|r| r.kl_hat),
            updates: outcome.state.version(),
        })
    }
}
