//! Surrogate objectives expressed as per-token gradient weights.
//!
//! Every objective here has the form `J = (1/N) Σ_t f_t(r_t)` over the `N`
//! tokens of a batch, with `r_t = π_θ/π_behav`. Since `∇r = r·∇log π`, the
//! gradient is `(1/N) Σ_t w_t ∇log π_θ(token_t)` where `w_t` is `r_t·A_t` for
//! tokens on the live branch and `0` for clipped or masked tokens. The weights
//! produced here feed [`crate::policy::weighted_logprob_grad`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::TrainBatch;
use crate::error::{Error, Result};
use crate::trust_region::{batch_ratios, is_clipped_token, m2po_mask};

pub const DEFAULT_EPSILON: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    GrpoClip,
    NoTr,
    M2po,
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo_clip" => Ok(Self::GrpoClip),
            "no_tr" => Ok(Self::NoTr),
            "m2po" => Ok(Self::M2po),
            other => Err(Error::Config(format!(
                "unknown objective '{other}' (expected grpo_clip, no_tr or m2po)"
            ))),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GrpoClip => "grpo_clip",
            Self::NoTr => "no_tr",
            Self::M2po => "m2po",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// `min(r·A, clip(r, 1−ε, 1+ε)·A)`
    GrpoClip { epsilon: f64 },
    /// Plain importance-weighted `r·A`, i.e. ε = ∞.
    NoTr,
    /// `M·r·A` with the second-moment mask.
    M2po { tau_m2: f64 },
}

impl ObjectiveSpec {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Self::GrpoClip { .. } => ObjectiveKind::GrpoClip,
            Self::NoTr => ObjectiveKind::NoTr,
            Self::M2po { .. } => ObjectiveKind::M2po,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::GrpoClip { epsilon } if !(epsilon > 0.0 && epsilon < 1.0) => Err(Error::Config(
                format!("epsilon must be in (0, 1), got {epsilon}"),
            )),
            Self::M2po { tau_m2 } if !(tau_m2 > 0.0 && tau_m2.is_finite()) => Err(Error::Config(
                format!("tau_m2 must be positive, got {tau_m2}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenStatus {
    Active,
    Clipped,
    Masked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    /// Coefficient of `∇log π` for each token, before the `1/N` normalization.
    pub weights: Vec<f64>,
    pub status: Vec<TokenStatus>,
    pub clipped_count: usize,
    pub masked_count: usize,
    pub token_count: usize,
    /// Value of the surrogate at the current parameters (token mean of the
    /// selected branch).
    pub surrogate: f64,
}

impl TokenWeights {
    /// Token-mean normalization: masked and clipped tokens stay in the count.
    pub fn normalizer(&self) -> f64 {
        1.0 / self.token_count as f64
    }

    pub fn clipping_ratio(&self) -> f64 {
        self.clipped_count as f64 / self.token_count as f64
    }

    pub fn masked_ratio(&self) -> f64 {
        self.masked_count as f64 / self.token_count as f64
    }

    fn from_parts(weights: Vec<f64>, status: Vec<TokenStatus>, branch_sum: f64) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Numeric {
                index: i,
                message: "non-finite r·A".into(),
            });
        }
        let token_count = weights.len();
        let clipped_count = status
            .iter()
            .filter(|s| **s == TokenStatus::Clipped)
            .count();
        let masked_count = status.iter().filter(|s| **s == TokenStatus::Masked).count();
        Ok(Self {
            weights,
            status,
            clipped_count,
            masked_count,
            token_count,
            surrogate: branch_sum / token_count as f64,
        })
    }
}

fn non_empty(batch: &TrainBatch) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Contract("objective over an empty batch".into()))
    } else {
        Ok(())
    }
}

pub fn grpo_token_weights(batch: &TrainBatch, epsilon: f64) -> Result<TokenWeights> {
    non_empty(batch)?;
    let ratios = batch_ratios(batch)?;
    let mut weights = Vec::with_capacity(batch.len());
    let mut status = Vec::with_capacity(batch.len());
    let mut branch_sum = 0.0;
    for (tok, &(_, r)) in batch.tokens.iter().zip(&ratios) {
        let a = tok.advantage;
        if is_clipped_token(r, a, epsilon) {
            weights.push(0.0);
            status.push(TokenStatus::Clipped);
            branch_sum += r.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
        } else {
            weights.push(r * a);
            status.push(TokenStatus::Active);
            branch_sum += r * a;
        }
    }
    TokenWeights::from_parts(weights, status, branch_sum)
}

pub fn no_tr_token_weights(batch: &TrainBatch) -> Result<TokenWeights> {
    non_empty(batch)?;
    let ratios = batch_ratios(batch)?;
    let weights: Vec<f64> = batch
        .tokens
        .iter()
        .zip(&ratios)
        .map(|(t, &(_, r))| r * t.advantage)
        .collect();
    let branch_sum = weights.iter().sum();
    TokenWeights::from_parts(weights, vec![TokenStatus::Active; batch.len()], branch_sum)
}

pub fn m2po_token_weights(batch: &TrainBatch, tau_m2: f64) -> Result<TokenWeights> {
    non_empty(batch)?;
    let ratios = batch_ratios(batch)?;
    let mask = m2po_mask(batch, tau_m2)?;
    let mut weights = Vec::with_capacity(batch.len());
    let mut status = Vec::with_capacity(batch.len());
    for ((tok, &(_, r)), &keep) in batch.tokens.iter().zip(&ratios).zip(&mask.keep) {
        if keep {
            weights.push(r * tok.advantage);
            status.push(TokenStatus::Active);
        } else {
            weights.push(0.0);
            status.push(TokenStatus::Masked);
        }
    }
    let branch_sum = weights.iter().sum();
    TokenWeights::from_parts(weights, status, branch_sum)
}

pub fn token_weights(batch: &TrainBatch, spec: &ObjectiveSpec) -> Result<TokenWeights> {
    match *spec {
        ObjectiveSpec::GrpoClip { epsilon } => grpo_token_weights(batch, epsilon),
        ObjectiveSpec::NoTr => no_tr_token_weights(batch),
        ObjectiveSpec::M2po { tau_m2 } => m2po_token_weights(batch, tau_m2),
    }
}
