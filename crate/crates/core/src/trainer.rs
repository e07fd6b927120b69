//! The optimization loop: schedule stale rollouts, weight tokens by the
//! configured objective, take AdamW ascent steps, log one metrics row per
//! model update.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::batch::TrainBatch;
use crate::config::TrainConfig;
use crate::env::{Environment, Group, PromptId, RolloutRecord, REWARD_CORRECT};
use crate::error::{Error, Result};
use crate::objectives::token_weights;
use crate::optim::AdamW;
use crate::policy::{weighted_logprob_grad, PolicyParams, PolicySnapshot};
use crate::rng::{task_rng, Stream};
use crate::staleness::{
    generation_version_for_step, plan_generation, RolloutBuffer, ScheduledBatch, SchedulerState,
};
use crate::telemetry::{EvalRecord, MetricsRecord};
use crate::trust_region::divergence_report;

/// Consecutive steps below [`COLLAPSE_FRACTION`] of the running peak reward
/// that count as collapse.
pub const COLLAPSE_PATIENCE: u64 = 20;
pub const COLLAPSE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Collapsed { update: u64, reason: String },
}

impl RunStatus {
    pub fn is_collapsed(&self) -> bool {
        matches!(self, Self::Collapsed { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Completed => "completed",
            Self::Collapsed { .. } => "collapsed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub optimizer: AdamW,
    pub scheduler: SchedulerState,
}

impl TrainState {
    pub fn version(&self) -> u64 {
        self.scheduler.current_update
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot::new(&self.params, self.version())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub evals: Vec<EvalRecord>,
    pub status: RunStatus,
}

/// Hooks for streaming run artifacts. All methods default to no-ops.
pub trait TrainObserver {
    /// Called after each model update with the batch as it was consumed
    /// (current log-probs refreshed before the step).
    fn on_update(&mut self, _record: &MetricsRecord, _batch: &ScheduledBatch) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _eval: &EvalRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: u64, _snapshot: &PolicySnapshot) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Samples `samples_per_prompt` responses for each of the first
/// `eval_prompts` prompts. Returns `(accuracy, mean_reward)`.
pub fn evaluate_policy<R: rand::Rng>(
    snapshot: &PolicySnapshot,
    env: &Environment,
    eval_prompts: usize,
    samples_per_prompt: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut hits = 0usize;
    let mut total = 0.0;
    let mut n = 0usize;
    for p in 0..eval_prompts.min(env.num_prompts()) {
        for _ in 0..samples_per_prompt {
            let r = env.sample_response(snapshot, PromptId(p), temperature, rng)?;
            hits += usize::from(r.reward == REWARD_CORRECT);
            total += r.reward;
            n += 1;
        }
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((hits as f64 / n as f64, total / n as f64))
}

/// Rebuilds per-response log lines from a consumed batch.
pub fn rollout_records(sb: &ScheduledBatch) -> Vec<RolloutRecord> {
    let mut out: Vec<RolloutRecord> = Vec::new();
    let mut key = None;
    for t in &sb.batch.tokens {
        let k = (t.group_index, t.response_index);
        if key != Some(k) {
            key = Some(k);
            out.push(RolloutRecord {
                prompt: t.prompt,
                tokens: vec![],
                reward: sb.batch.rewards[out.len()],
                behavior_version: sb.batch.behavior_version,
                behavior_logprobs: vec![],
                behavior_entropy: vec![],
                update: Some(sb.update),
                advantage: Some(t.advantage),
                current_logprobs: Some(vec![]),
            });
        }
        let rec = out.last_mut().expect("pushed above");
        rec.tokens.push(t.token);
        rec.behavior_logprobs.push(t.logp_behav);
        rec.behavior_entropy.push(t.entropy_behav);
        if let Some(c) = rec.current_logprobs.as_mut() {
            c.push(t.logp_new);
        }
    }
    out
}

struct Trainer<'a, O: TrainObserver> {
    cfg: &'a TrainConfig,
    env: Environment,
    state: TrainState,
    base: PolicySnapshot,
    buffer: RolloutBuffer,
    metrics: Vec<MetricsRecord>,
    evals: Vec<EvalRecord>,
    observer: &'a mut O,
}

enum Halt {
    Collapsed(RunStatus),
    Failed(Error),
}

impl From<Error> for Halt {
    fn from(e: Error) -> Self {
        Halt::Failed(e)
    }
}

impl<'a, O: TrainObserver> Trainer<'a, O> {
    fn step_prompts(&self, step: u64) -> Vec<PromptId> {
        let mut rng = task_rng(self.cfg.seed, Stream::Prompts, &[step]);
        sample(&mut rng, self.cfg.num_prompts, self.cfg.batch_prompts)
            .into_iter()
            .map(PromptId)
            .collect()
    }

    fn generate(&self, snapshot: &PolicySnapshot, step: u64) -> Result<Vec<Group>> {
        self.step_prompts(step)
            .into_iter()
            .enumerate()
            .map(|(i, prompt)| {
                let group_index = step * self.cfg.batch_prompts as u64 + i as u64;
                let mut rng = task_rng(
                    self.cfg.seed,
                    Stream::Rollout,
                    &[snapshot.version(), prompt.0 as u64, group_index],
                );
                self.env.sample_group(
                    snapshot,
                    prompt,
                    self.cfg.group_size,
                    self.cfg.temperature,
                    &mut rng,
                )
            })
            .collect()
    }

    /// Rollouts for the step that will read the version just reached.
    fn generate_ahead(&mut self) -> Result<()> {
        let v = self.state.version();
        let u = self.cfg.updates_per_step;
        if v == 0 || !(v + self.cfg.k).is_multiple_of(u) {
            return Ok(());
        }
        let step = (v + self.cfg.k) / u;
        if step >= self.cfg.steps {
            return Ok(());
        }
        debug_assert_eq!(generation_version_for_step(step, u, self.cfg.k), v);
        let snap = self.state.snapshot();
        let groups = self.generate(&snap, step)?;
        self.buffer.push_rollouts(v, groups)
    }

    fn evaluate(&mut self, step: u64) -> Result<()> {
        let snap = self.state.snapshot();
        let mut rng = task_rng(self.cfg.seed, Stream::Eval, &[snap.version()]);
        let (accuracy, mean_reward) = evaluate_policy(
            &snap,
            &self.env,
            self.cfg.eval_prompts,
            self.cfg.eval_samples,
            self.cfg.temperature,
            &mut rng,
        )?;
        let rec = EvalRecord {
            step,
            update: snap.version(),
            mean_reward,
            accuracy,
        };
        self.observer.on_eval(&rec)?;
        self.evals.push(rec);
        Ok(())
    }

    fn update(&mut self, mut sb: ScheduledBatch) -> std::result::Result<(), Halt> {
        let update = sb.update;
        let collapsed = |reason: String| Halt::Collapsed(RunStatus::Collapsed { update, reason });
        let temperature = self.cfg.temperature;
        sb.batch.refresh(&self.state.params, temperature)?;

        let weights = match token_weights(&sb.batch, &self.cfg.objective_spec()) {
            Ok(w) => w,
            Err(Error::Numeric { index, message }) => {
                return Err(collapsed(format!("token {index}: {message}")))
            }
            Err(e) => return Err(e.into()),
        };
        let div = divergence_report(&sb.batch, None)?;
        let mut grad =
            weighted_logprob_grad(&self.state.params, &sb.batch, &weights.weights, temperature)?;
        grad *= weights.normalizer();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(collapsed("non-finite gradient".into()));
        }
        let TrainState {
            params, optimizer, ..
        } = &mut self.state;
        optimizer.step(params.weights_mut(), &grad)?;
        if !params.is_finite() {
            return Err(collapsed("non-finite weights".into()));
        }
        self.state.scheduler.advance();

        let rec = MetricsRecord {
            update,
            step: sb.step,
            realized_staleness: sb.realized_staleness,
            mean_reward: sb.batch.mean_reward(),
            accuracy: sb.batch.accuracy(),
            clipping_ratio: weights.clipping_ratio(),
            masked_ratio: weights.masked_ratio(),
            kl_hat: div.kl_hat,
            m2_hat: div.m2_hat,
            abs_kl_hat: div.abs_kl_hat,
            chi2_hat: div.chi2_hat,
            mean_entropy: sb.batch.mean_entropy(),
            token_count: sb.batch.len() as u64,
        };
        self.observer.on_update(&rec, &sb)?;
        self.metrics.push(rec);
        self.buffer.advance_to(self.state.version());
        self.generate_ahead()?;
        Ok(())
    }

    fn run(&mut self) -> std::result::Result<RunStatus, Halt> {
        let cfg = self.cfg;
        if cfg.eval_every > 0 {
            self.evaluate(0)?;
        }
        let mut peak = f64::NEG_INFINITY;
        let mut low_streak = 0u64;
        for step in 0..cfg.steps {
            debug_assert_eq!(self.state.scheduler.current_step, step);
            let g = plan_generation(&self.state.scheduler, cfg.k);
            if g == 0 {
                let groups = self.generate(&self.base, step)?;
                self.buffer.push_rollouts(0, groups)?;
            }
            let batches = self.buffer.pop_training_batch(
                &self.state.scheduler,
                cfg.batch_prompts,
                cfg.mini_batch,
            )?;
            let step_reward =
                batches.iter().map(|b| b.batch.mean_reward()).sum::<f64>() / batches.len() as f64;
            for sb in batches {
                self.update(sb)?;
            }

            let done = step + 1;
            if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.steps) {
                self.evaluate(done)?;
            }
            if cfg.checkpoint_every > 0 && (done % cfg.checkpoint_every == 0 || done == cfg.steps) {
                let snap = self.state.snapshot();
                self.observer.on_checkpoint(done, &snap)?;
            }

            peak = peak.max(step_reward);
            if peak > 0.0 && step_reward < COLLAPSE_FRACTION * peak {
                low_streak += 1;
                if low_streak >= COLLAPSE_PATIENCE {
                    return Err(Halt::Collapsed(RunStatus::Collapsed {
                        update: self.state.version(),
                        reason: format!(
                            "mean reward below {COLLAPSE_FRACTION} of peak {peak:.4} for {COLLAPSE_PATIENCE} steps"
                        ),
                    }));
                }
            } else {
                low_streak = 0;
            }
        }
        Ok(RunStatus::Completed)
    }
}

/// Runs a full training job. Collapse is reported through
/// [`TrainOutcome::status`]; only configuration and I/O problems are errors.
pub fn run_training_with<O: TrainObserver>(
    cfg: &TrainConfig,
    observer: &mut O,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env = Environment::new(cfg.env_config())?;
    let params = PolicyParams::zeros(env.feature_map());
    let base = PolicySnapshot::new(&params, 0);
    let optimizer = AdamW::new(cfg.optimizer(), params.weights().dim());
    let u = cfg.updates_per_step;
    let capacity = cfg.batch_prompts * ((cfg.k / u) as usize + 3);
    let mut trainer = Trainer {
        cfg,
        env,
        state: TrainState {
            params,
            optimizer,
            scheduler: SchedulerState::new(u),
        },
        base,
        buffer: RolloutBuffer::new(cfg.k, u, capacity),
        metrics: Vec::new(),
        evals: Vec::new(),
        observer,
    };
    let status = match trainer.run() {
        Ok(s) => s,
        Err(Halt::Collapsed(s)) => {
            if cfg.eval_every > 0 {
                let steps_done = trainer.state.scheduler.current_step;
                trainer.evaluate(steps_done)?;
            }
            s
        }
        Err(Halt::Failed(e)) => return Err(e),
    };
    Ok(TrainOutcome {
        state: trainer.state,
        metrics: trainer.metrics,
        evals: trainer.evals,
        status,
    })
}

pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training_with(cfg, &mut ())
}

/// Convenience for tests and analyses: the batches a run would consume at
/// step 0, before any update.
pub fn first_step_batches(cfg: &TrainConfig) -> Result<Vec<TrainBatch>> {
    let mut c = cfg.clone();
    c.steps = 1;
    c.eval_every = 0;
    c.checkpoint_every = 0;
    c.lr = 0.0;
    struct Grab(Vec<TrainBatch>);
    impl TrainObserver for Grab {
        fn on_update(&mut self, _r: &MetricsRecord, b: &ScheduledBatch) -> Result<()> {
            self.0.push(b.batch.clone());
            Ok(())
        }
    }
    let mut g = Grab(Vec::new());
    run_training_with(&c, &mut g)?;
    Ok(g.0)
}
