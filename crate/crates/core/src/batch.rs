//! Flattened per-token training data shared by the policy, trust-region and
//! objective code.

use serde::{Deserialize, Serialize};

use crate::env::{Group, PromptId, Token};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;

/// One generated token together with everything the update rules need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub prompt: PromptId,
    pub position: usize,
    /// Token emitted at `position - 1`; `None` at the first position.
    pub prev: Option<Token>,
    pub token: Token,
    pub logp_behav: f64,
    pub logp_new: f64,
    pub advantage: f64,
    pub entropy_behav: f64,
    pub group_index: usize,
    pub response_index: usize,
}

impl TokenRecord {
    #[inline]
    pub fn log_ratio(&self) -> f64 {
        self.logp_new - self.logp_behav
    }

    #[inline]
    pub fn ratio(&self) -> f64 {
        self.log_ratio().exp()
    }
}

/// The token set consumed by a single model update.
///
/// `logp_new` starts equal to `logp_behav`; call [`TrainBatch::refresh`] with
/// the live parameters before computing ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub behavior_version: u64,
    pub tokens: Vec<TokenRecord>,
    /// Reward of every response in the batch, in group order.
    pub rewards: Vec<f64>,
}

impl TrainBatch {
    /// Flattens groups whose advantages have already been filled in.
    pub fn from_groups(groups: &[Group]) -> Result<Self> {
        let picks: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| (0..g.size()).map(move |ri| (gi, ri)))
            .collect();
        Self::from_picks(groups, &picks)
    }

    /// Flattens the responses `picks = [(group, response)]`, in order.
    pub fn from_picks(groups: &[Group], picks: &[(usize, usize)]) -> Result<Self> {
        let behavior_version = match picks.first() {
            Some(&(gi, _)) => groups[gi].behavior_version(),
            None => {
                return Err(Error::Contract(
                    "cannot build a batch from zero responses".into(),
                ))
            }
        };
        let mut tokens = Vec::new();
        let mut rewards = Vec::with_capacity(picks.len());
        for &(group_index, response_index) in picks {
            let group = &groups[group_index];
            if group.behavior_version() != behavior_version {
                return Err(Error::Contract(format!(
                    "mixed behavior versions {} and {} in one batch",
                    behavior_version,
                    group.behavior_version()
                )));
            }
            let resp = &group.responses[response_index];
            let advantage = group.advantages[response_index];
            rewards.push(resp.reward);
            for (position, &token) in resp.tokens.iter().enumerate() {
                tokens.push(TokenRecord {
                    prompt: resp.prompt,
                    position,
                    prev: position.checked_sub(1).map(|p| resp.tokens[p]),
                    token,
                    logp_behav: resp.behavior_logprobs[position],
                    logp_new: resp.behavior_logprobs[position],
                    advantage,
                    entropy_behav: resp.behavior_entropy[position],
                    group_index,
                    response_index,
                });
            }
        }
        Ok(Self {
            behavior_version,
            tokens,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Re-evaluates `logp_new` for every token under `params`.
    pub fn refresh(&mut self, params: &PolicyParams, temperature: f64) -> Result<()> {
        for tok in &mut self.tokens {
            let feats = params
                .feature_map()
                .features_at(tok.prompt, tok.position, tok.prev)?;
            let dist = crate::policy::token_distribution(params, &feats, temperature)?;
            tok.logp_new = dist.log_probs[tok.token];
        }
        Ok(())
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }

    /// Fraction of responses that earned the full reward.
    pub fn accuracy(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        let hits = self
            .rewards
            .iter()
            .filter(|&&r| r == crate::env::REWARD_CORRECT)
            .count();
        hits as f64 / self.rewards.len() as f64
    }

    pub fn mean_entropy(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.tokens.iter().map(|t| t.entropy_behav).sum::<f64>() / self.tokens.len() as f64
    }
}
