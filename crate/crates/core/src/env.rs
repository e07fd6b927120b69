//! Verifiable-reward toy environments.
//!
//! All three tasks share one response grammar: a non-empty payload followed by
//! the stop token (the last vocabulary entry). Emitting the stop token after a
//! payload counts as a successfully extracted answer and earns the format
//! reward; a correct payload earns the full reward.
//!
//! * `copy`: prompt `p` names a payload token; the correct answer repeats it
//!   `copy_len` times.
//! * `modsum`: any payload whose token sum is congruent to a prompt-specific
//!   target modulo the vocabulary size.
//! * `bandit`: a single token; each prompt has one paying arm, every other
//!   non-stop token is a well-formed miss.
//!
//! These tasks are constructed for this lab; they are not drawn from any
//! benchmark.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{token_distribution, FeatureMap, PolicySnapshot};

pub type Token = usize;

pub const REWARD_CORRECT: f64 = 1.0;
pub const REWARD_FORMAT: f64 = 0.1;
pub const REWARD_NONE: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Copy,
    Modsum,
    Bandit,
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "modsum" => Ok(Self::Modsum),
            "bandit" => Ok(Self::Bandit),
            other => Err(Error::Config(format!(
                "unknown env id '{other}' (expected copy, modsum or bandit)"
            ))),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Modsum => "modsum",
            Self::Bandit => "bandit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub env: EnvId,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_prompts: usize,
    /// Payload length of the copy task.
    pub copy_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Copy,
            vocab_size: 16,
            max_len: 16,
            num_prompts: 64,
            copy_len: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    config: EnvConfig,
    feature_map: FeatureMap,
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self> {
        let feature_map = FeatureMap::new(config.num_prompts, config.max_len, config.vocab_size)?;
        if config.vocab_size < 3 {
            return Err(Error::Config(
                "vocab_size must be >= 3 (payload tokens plus stop)".into(),
            ));
        }
        if config.env == EnvId::Copy && (config.copy_len == 0 || config.copy_len >= config.max_len)
        {
            return Err(Error::Config(format!(
                "copy_len must be in 1..max_len, got {}",
                config.copy_len
            )));
        }
        if config.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        Ok(Self {
            config,
            feature_map,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn id(&self) -> EnvId {
        self.config.env
    }

    pub fn feature_map(&self) -> FeatureMap {
        self.feature_map
    }

    pub fn num_prompts(&self) -> usize {
        self.config.num_prompts
    }

    pub fn stop_token(&self) -> Token {
        self.config.vocab_size - 1
    }

    /// Maximum number of tokens a response may contain.
    pub fn response_limit(&self) -> usize {
        match self.config.env {
            EnvId::Bandit => 1,
            _ => self.config.max_len,
        }
    }

    fn payload_vocab(&self) -> usize {
        self.config.vocab_size - 1
    }

    /// Payload token named by a copy prompt, or the paying arm of a bandit prompt.
    pub fn target_token(&self, prompt: PromptId) -> Token {
        match self.config.env {
            EnvId::Bandit => (5 * prompt.0 + 2) % self.payload_vocab(),
            _ => prompt.0 % self.payload_vocab(),
        }
    }

    pub fn modsum_target(&self, prompt: PromptId) -> usize {
        (3 * prompt.0 + 1) % self.config.vocab_size
    }

    /// The unique correct copy response (payload plus stop).
    pub fn copy_answer(&self, prompt: PromptId) -> Vec<Token> {
        let mut v = vec![self.target_token(prompt); self.config.copy_len];
        v.push(self.stop_token());
        v
    }

    /// Deterministic reward in `{0.0, 0.1, 1.0}`.
    pub fn verify(&self, prompt: PromptId, tokens: &[Token]) -> Result<f64> {
        if prompt.0 >= self.config.num_prompts {
            return Err(Error::Config(format!("unknown prompt id {}", prompt.0)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!("token {t} outside vocab")));
        }
        let stop = self.stop_token();
        let payload = match self.config.env {
            EnvId::Bandit => match tokens {
                [t] if *t != stop => std::slice::from_ref(t),
                _ => return Ok(REWARD_NONE),
            },
            _ => match tokens.split_last() {
                Some((&last, payload))
                    if last == stop
                        && !payload.is_empty()
                        && tokens.len() <= self.config.max_len
                        && !payload.contains(&stop) =>
                {
                    payload
                }
                _ => return Ok(REWARD_NONE),
            },
        };
        let correct = match self.config.env {
            EnvId::Copy => {
                payload.len() == self.config.copy_len
                    && payload.iter().all(|&t| t == self.target_token(prompt))
            }
            EnvId::Modsum => {
                payload.iter().sum::<usize>() % self.config.vocab_size == self.modsum_target(prompt)
            }
            EnvId::Bandit => payload[0] == self.target_token(prompt),
        };
        Ok(if correct {
            REWARD_CORRECT
        } else {
            REWARD_FORMAT
        })
    }

    /// Samples one response token by token, recording behavior log-probs and
    /// entropies as generated.
    pub fn sample_response<R: Rng>(
        &self,
        snapshot: &PolicySnapshot,
        prompt: PromptId,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Response> {
        let params = snapshot.params();
        let stop = self.stop_token();
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        let mut ents = Vec::new();
        while tokens.len() < self.response_limit() {
            let feats = params.feature_map().featurize(prompt, &tokens)?;
            let dist = token_distribution(params, &feats, temperature)?;
            let token = sample_categorical(&dist.log_probs, rng);
            tokens.push(token);
            logps.push(dist.log_probs[token]);
            ents.push(dist.entropy);
            if token == stop {
                break;
            }
        }
        let reward = self.verify(prompt, &tokens)?;
        Ok(Response {
            prompt,
            tokens,
            behavior_version: snapshot.version(),
            behavior_logprobs: logps,
            behavior_entropy: ents,
            reward,
        })
    }

    /// Draws `group_size` responses to one prompt from a frozen snapshot.
    pub fn sample_group<R: Rng>(
        &self,
        snapshot: &PolicySnapshot,
        prompt: PromptId,
        group_size: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Group> {
        if group_size < 2 {
            return Err(Error::Contract(format!(
                "group size must be >= 2, got {group_size}"
            )));
        }
        let responses = (0..group_size)
            .map(|_| self.sample_response(snapshot, prompt, temperature, rng))
            .collect::<Result<Vec<_>>>()?;
        Group::new(responses)
    }
}

fn sample_categorical<R: Rng>(log_probs: &[f64], rng: &mut R) -> Token {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum: take the last token with mass
    log_probs
        .iter()
        .rposition(|lp| lp.exp() > 0.0)
        .unwrap_or(log_probs.len() - 1)
}

/// One sampled response with its generation-time statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub prompt: PromptId,
    pub tokens: Vec<Token>,
    pub behavior_version: u64,
    pub behavior_logprobs: Vec<f64>,
    pub behavior_entropy: Vec<f64>,
    pub reward: f64,
}

/// `G` responses to one prompt plus their group-relative advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub responses: Vec<Response>,
    /// Zero until filled by [`crate::advantage::fill_group_advantages`].
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(responses: Vec<Response>) -> Result<Self> {
        if responses.len() < 2 {
            return Err(Error::Contract(format!(
                "a group needs at least 2 responses, got {}",
                responses.len()
            )));
        }
        let (p, v) = (responses[0].prompt, responses[0].behavior_version);
        if responses
            .iter()
            .any(|r| r.prompt != p || r.behavior_version != v)
        {
            return Err(Error::Contract(
                "responses in a group must share prompt and behavior version".into(),
            ));
        }
        for r in &responses {
            if r.behavior_logprobs.len() != r.tokens.len()
                || r.behavior_entropy.len() != r.tokens.len()
            {
                return Err(Error::Contract(
                    "behavior statistics must have one entry per token".into(),
                ));
            }
        }
        let advantages = vec![0.0; responses.len()];
        Ok(Self {
            responses,
            advantages,
        })
    }

    pub fn prompt(&self) -> PromptId {
        self.responses[0].prompt
    }

    pub fn behavior_version(&self) -> u64 {
        self.responses[0].behavior_version
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }
}

/// One line of the rollout JSONL log.
///
/// `update` and `current_logprobs` are only present in logs dumped by the
/// trainer at consumption time; they let offline analysis recompute the
/// divergence numbers of that update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt: PromptId,
    pub tokens: Vec<Token>,
    pub reward: f64,
    pub behavior_version: u64,
    pub behavior_logprobs: Vec<f64>,
    pub behavior_entropy: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_logprobs: Option<Vec<f64>>,
}

impl From<&Response> for RolloutRecord {
    fn from(r: &Response) -> Self {
        Self {
            prompt: r.prompt,
            tokens: r.tokens.clone(),
            reward: r.reward,
            behavior_version: r.behavior_version,
            behavior_logprobs: r.behavior_logprobs.clone(),
            behavior_entropy: r.behavior_entropy.clone(),
            update: None,
            advantage: None,
            current_logprobs: None,
        }
    }
}

pub fn write_jsonl<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a RolloutRecord>,
) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RolloutRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
