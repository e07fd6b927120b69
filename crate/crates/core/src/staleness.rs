//! Stale-k rollout scheduling.
//!
//! A training step is `updates_per_step` model updates. All updates of step
//! `s` consume one batch generated by the snapshot at version `s·U − k`, so
//! update `j` of the step sees data exactly `k + j` updates old. While
//! `s·U < k` there is no such snapshot yet and the base model (version 0)
//! generates fresh data for each step instead.

use std::collections::{BTreeMap, VecDeque};

use crate::advantage::fill_group_advantages;
use crate::batch::TrainBatch;
use crate::env::Group;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerState {
    pub current_update: u64,
    pub current_step: u64,
    pub updates_per_step: u64,
}

impl SchedulerState {
    pub fn new(updates_per_step: u64) -> Self {
        assert!(updates_per_step > 0, "updates_per_step must be positive");
        Self {
            current_update: 0,
            current_step: 0,
            updates_per_step,
        }
    }

    /// Index of the current update within its step.
    pub fn update_in_step(&self) -> u64 {
        self.current_update - self.current_step * self.updates_per_step
    }

    pub fn advance(&mut self) {
        self.current_update += 1;
        self.current_step = self.current_update / self.updates_per_step;
    }

    pub fn step_start(&self) -> u64 {
        self.current_step * self.updates_per_step
    }
}

/// Snapshot version whose rollouts the current step consumes.
pub fn plan_generation(state: &SchedulerState, k: u64) -> u64 {
    state.step_start().saturating_sub(k)
}

/// Version whose rollouts step `step` consumes.
pub fn generation_version_for_step(step: u64, updates_per_step: u64, k: u64) -> u64 {
    (step * updates_per_step).saturating_sub(k)
}

/// True while the current step trains on base-model data because no
/// `k`-old snapshot exists yet.
pub fn in_initial_phase(state: &SchedulerState, k: u64) -> bool {
    state.step_start() < k
}

/// One model update's worth of data.
#[derive(Debug, Clone)]
pub struct ScheduledBatch {
    pub update: u64,
    pub step: u64,
    pub realized_staleness: u64,
    pub batch: TrainBatch,
    /// The groups behind `batch`, advantages filled.
    pub groups: Vec<Group>,
}

#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    entries: BTreeMap<u64, VecDeque<Group>>,
    capacity: usize,
    k: u64,
    updates_per_step: u64,
    current_version: u64,
}

impl RolloutBuffer {
    /// `capacity` is counted in groups.
    pub fn new(k: u64, updates_per_step: u64, capacity: usize) -> Self {
        Self {
            entries: BTreeMap::new(),
            capacity,
            k,
            updates_per_step,
            current_version: 0,
        }
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    /// Widest consumable gap: `k + updates_per_step − 1`.
    pub fn window_end(&self) -> u64 {
        self.k + self.updates_per_step - 1
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn versions(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn groups(&self) -> impl Iterator<Item = &Group> {
        self.entries.values().flatten()
    }

    fn expired(&self, version: u64) -> bool {
        self.current_version > version + self.window_end()
    }

    /// Moves the buffer's clock and drops data too old to ever be consumed.
    pub fn advance_to(&mut self, version: u64) {
        self.current_version = self.current_version.max(version);
        let cutoff: Vec<u64> = self
            .entries
            .keys()
            .copied()
            .filter(|&v| self.expired(v))
            .collect();
        for v in cutoff {
            self.entries.remove(&v);
        }
    }

    pub fn push_rollouts(&mut self, version: u64, groups: Vec<Group>) -> Result<()> {
        if let Some(g) = groups.iter().find(|g| g.behavior_version() != version) {
            return Err(Error::Contract(format!(
                "group generated at version {} pushed under version {version}",
                g.behavior_version()
            )));
        }
        if self.expired(version) {
            return Err(Error::StalenessWindow(format!(
                "version {version} is more than {} updates behind current version {}",
                self.window_end(),
                self.current_version
            )));
        }
        self.entries.entry(version).or_default().extend(groups);
        let mut excess = self.len().saturating_sub(self.capacity);
        while excess > 0 {
            let Some(mut oldest) = self.entries.first_entry() else {
                break;
            };
            let q = oldest.get_mut();
            let n = excess.min(q.len());
            q.drain(..n);
            excess -= n;
            if q.is_empty() {
                oldest.remove();
            }
        }
        Ok(())
    }

    /// Takes `batch_prompts` groups generated at the version scheduled for the
    /// current step, fills their advantages, and splits their responses into
    /// `updates_per_step` mini-batches of `mini_batch` responses each.
    pub fn pop_training_batch(
        &mut self,
        state: &SchedulerState,
        batch_prompts: usize,
        mini_batch: usize,
    ) -> Result<Vec<ScheduledBatch>> {
        if state.update_in_step() != 0 {
            return Err(Error::Contract(format!(
                "batches are popped at step boundaries, not at update {}",
                state.current_update
            )));
        }
        self.advance_to(state.current_update);
        let version = plan_generation(state, self.k);
        let available = self.entries.get(&version).map_or(0, VecDeque::len);
        if available < batch_prompts {
            return Err(Error::Starvation { version });
        }
        let queue = self.entries.get_mut(&version).expect("checked above");
        let mut groups: Vec<Group> = queue.drain(..batch_prompts).collect();
        if queue.is_empty() {
            self.entries.remove(&version);
        }
        for g in &mut groups {
            fill_group_advantages(g)?;
        }

        let picks: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| (0..g.size()).map(move |ri| (gi, ri)))
            .collect();
        if mini_batch == 0 || !picks.len().is_multiple_of(mini_batch) {
            return Err(Error::Config(format!(
                "mini_batch {mini_batch} does not divide {} responses",
                picks.len()
            )));
        }
        let n_updates = (picks.len() / mini_batch) as u64;
        if n_updates != state.updates_per_step {
            return Err(Error::Config(format!(
                "{} responses / mini_batch {mini_batch} = {n_updates} updates, expected {}",
                picks.len(),
                state.updates_per_step
            )));
        }

        let initial = in_initial_phase(state, self.k);
        picks
            .chunks(mini_batch)
            .enumerate()
            .map(|(j, chunk)| {
                let update = state.current_update + j as u64;
                let realized_staleness = update - version;
                let low_ok = initial || realized_staleness >= self.k;
                if !low_ok || realized_staleness > self.window_end() {
                    return Err(Error::StalenessWindow(format!(
                        "update {update} would consume version {version} (staleness {realized_staleness})"
                    )));
                }
                let used: Vec<usize> = {
                    let mut v: Vec<usize> = chunk.iter().map(|&(g, _)| g).collect();
                    v.dedup();
                    v
                };
                Ok(ScheduledBatch {
                    update,
                    step: state.current_step,
                    realized_staleness,
                    batch: TrainBatch::from_picks(&groups, chunk)?,
                    groups: used.iter().map(|&g| groups[g].clone()).collect(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{PromptId, Response};

    fn group(version: u64, prompt: usize, g: usize) -> Group {
        let responses = (0..g)
            .map(|i| Response {
                prompt: PromptId(prompt),
                tokens: vec![i % 3, 15],
                behavior_version: version,
                behavior_logprobs: vec![-1.0, -0.5],
                behavior_entropy: vec![1.0, 0.7],
                reward: if i == 0 { 1.0 } else { 0.1 },
            })
            .collect();
        Group::new(responses).unwrap()
    }

    fn at(update: u64, u: u64) -> SchedulerState {
        let mut s = SchedulerState::new(u);
        for _ in 0..update {
            s.advance();
        }
        s
    }

    #[test]
    fn plan_examples() {
        // stale-256: step 64 (updates 256..259) reads version 0
        let s = at(256, 4);
        assert_eq!(plan_generation(&s, 256), 0);
        assert!(!in_initial_phase(&s, 256));
        for j in 0..4 {
            assert!((256..=259).contains(&(256 + j - plan_generation(&s, 256))));
        }
        // stale-0
        let s = at(8, 4);
        assert_eq!(plan_generation(&s, 0), 8);
        // initial phase of stale-64 reads the base model
        assert_eq!(plan_generation(&at(16, 4), 64), 0);
        assert!(in_initial_phase(&at(16, 4), 64));
        // fully on-policy schedule
        let s = at(5, 1);
        assert_eq!(plan_generation(&s, 0), 5);
    }

    #[test]
    fn push_pop_round_trip() {
        let mut buf = RolloutBuffer::new(0, 4, 1000);
        let groups: Vec<Group> = (0..16).map(|p| group(0, p, 8)).collect();
        buf.push_rollouts(0, groups.clone()).unwrap();
        let batches = buf.pop_training_batch(&at(0, 4), 16, 32).unwrap();
        assert_eq!(batches.len(), 4);
        let back: Vec<Group> = batches.iter().flat_map(|b| b.groups.clone()).collect();
        assert_eq!(back.len(), 16);
        for (a, b) in back.iter().zip(&groups) {
            assert_eq!(a.responses, b.responses);
            assert!(!a.advantages.iter().all(|&x| x == 0.0));
        }
        for (j, b) in batches.iter().enumerate() {
            assert_eq!(b.realized_staleness, j as u64);
            assert_eq!(b.batch.rewards.len(), 32);
        }
        assert!(buf.is_empty());
        // every group consumed once
        assert!(matches!(
            buf.pop_training_batch(&at(0, 4), 16, 32),
            Err(Error::Starvation { version: 0 })
        ));
    }

    #[test]
    fn large_batch_sizes_give_four_updates() {
        let mut buf = RolloutBuffer::new(0, 4, 10_000);
        buf.push_rollouts(0, (0..256).map(|p| group(0, p, 8)).collect())
            .unwrap();
        assert_eq!(
            buf.pop_training_batch(&at(0, 4), 256, 512).unwrap().len(),
            4
        );
    }

    #[test]
    fn indivisible_mini_batch_is_config_error() {
        let mut buf = RolloutBuffer::new(0, 4, 1000);
        buf.push_rollouts(0, (0..16).map(|p| group(0, p, 8)).collect())
            .unwrap();
        assert!(matches!(
            buf.pop_training_batch(&at(0, 4), 16, 30),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn version_mismatch_and_expired_pushes_rejected() {
        let mut buf = RolloutBuffer::new(2, 4, 1000);
        assert!(matches!(
            buf.push_rollouts(3, vec![group(2, 0, 2)]),
            Err(Error::Contract(_))
        ));
        buf.advance_to(20);
        // 20 - 5 = 15 > window 5
        assert!(matches!(
            buf.push_rollouts(5, vec![group(5, 0, 2)]),
            Err(Error::StalenessWindow(_))
        ));
        buf.push_rollouts(15, vec![group(15, 0, 2)]).unwrap();
    }

    #[test]
    fn eviction_drops_oldest_versions_first() {
        let mut buf = RolloutBuffer::new(8, 4, 4);
        buf.push_rollouts(1, vec![group(1, 0, 2), group(1, 1, 2)])
            .unwrap();
        buf.push_rollouts(2, vec![group(2, 0, 2), group(2, 1, 2)])
            .unwrap();
        buf.push_rollouts(3, vec![group(3, 0, 2), group(3, 1, 2)])
            .unwrap();
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.versions(), vec![2, 3]);
        // window eviction: 3 + 11 < 15
        buf.advance_to(15);
        assert!(buf.is_empty());
    }

    #[test]
    fn pop_enforces_window() {
        // stale-8, step 3 (updates 12..15) reads version 4 → staleness 8..11
        let mut buf = RolloutBuffer::new(8, 4, 1000);
        buf.push_rollouts(4, (0..4).map(|p| group(4, p, 4)).collect())
            .unwrap();
        let b = buf.pop_training_batch(&at(12, 4), 4, 4).unwrap();
        let st: Vec<u64> = b.iter().map(|x| x.realized_staleness).collect();
        assert_eq!(st, vec![8, 9, 10, 11]);
        assert!(buf.pop_training_batch(&at(13, 4), 4, 4).is_err());
    }
}
