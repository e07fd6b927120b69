//! Per-token trust-region math: importance ratios, the ε-clip predicate,
//! second-moment masking, batch divergence estimators and the χ² ≤ R²·M2
//! bound checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::batch::TokenRecord;
use crate::batch::TrainBatch;
use crate::error::{Error, Result};

/// `τ_M2` used for every M2PO run unless overridden.
pub const DEFAULT_TAU_M2: f64 = 0.04;

/// Largest |log r| accepted before `exp` is considered to have overflowed.
pub const MAX_LOG_RATIO: f64 = 700.0;

/// Returns `(log r, r)` for `r = π_new / π_behav`.
pub fn importance_ratio(logp_new: f64, logp_behav: f64) -> Result<(f64, f64)> {
    if !logp_new.is_finite() || !logp_behav.is_finite() {
        return Err(Error::Numeric {
            index: 0,
            message: format!("non-finite log-prob ({logp_new}, {logp_behav})"),
        });
    }
    let log_ratio = logp_new - logp_behav;
    if log_ratio.abs() > MAX_LOG_RATIO {
        return Err(Error::Numeric {
            index: 0,
            message: format!("log-ratio {log_ratio} overflows"),
        });
    }
    Ok((log_ratio, log_ratio.exp()))
}

/// Ratios for every token of a batch; errors name the offending token.
pub fn batch_ratios(batch: &TrainBatch) -> Result<Vec<(f64, f64)>> {
    batch
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            importance_ratio(t.logp_new, t.logp_behav).map_err(|e| match e {
                Error::Numeric { message, .. } => Error::Numeric { index: i, message },
                other => other,
            })
        })
        .collect()
}

/// Tokens on which the min in the clipped surrogate can bind:
/// `A > 0 ∧ r > 1` or `A < 0 ∧ r < 1`.
#[inline]
pub fn is_trust_region_token(ratio: f64, advantage: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0) || (advantage < 0.0 && ratio < 1.0)
}

/// True exactly when `min(r·A, clip(r, 1−ε, 1+ε)·A)` takes the clipped
/// branch, i.e. when the token contributes no gradient.
#[inline]
pub fn is_clipped_token(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + epsilon) || (advantage < 0.0 && ratio < 1.0 - epsilon)
}

#[inline]
pub fn m2_token(log_ratio: f64) -> f64 {
    log_ratio * log_ratio
}

/// Keep-flags over the tokens of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub keep: Vec<bool>,
}

impl Mask {
    pub fn all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
        }
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Second-moment masking over raw per-token M2 values.
///
/// Only tokens with `in_trust_region[i]` take part. The largest-M2 token is
/// removed repeatedly until the mean M2 of the remaining trust-region tokens
/// is at most `tau`. Removal always proceeds in descending M2 order, so the
/// loop collapses to one sort plus a scan for the shortest removed prefix.
/// Ties go to the lowest token index.
pub fn m2po_mask_values(m2: &[f64], in_trust_region: &[bool], tau: f64) -> Mask {
    debug_assert_eq!(m2.len(), in_trust_region.len());
    let mut order: Vec<usize> = (0..m2.len()).filter(|&i| in_trust_region[i]).collect();
    // stable sort keeps index order among equal values
    order.sort_by(|&a, &b| m2[b].total_cmp(&m2[a]));

    // suffix[m] = sum of the values left after removing the first m
    let n = order.len();
    let mut suffix = vec![0.0; n + 1];
    for m in (0..n).rev() {
        suffix[m] = suffix[m + 1] + m2[order[m]];
    }

    let mut mask = Mask::all(m2.len());
    let mut removed = 0;
    while removed < n && suffix[removed] / (n - removed) as f64 > tau {
        mask.keep[order[removed]] = false;
        removed += 1;
    }
    mask
}

pub fn m2po_mask(batch: &TrainBatch, tau: f64) -> Result<Mask> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau_m2 must be positive, got {tau}")));
    }
    let ratios = batch_ratios(batch)?;
    let m2: Vec<f64> = ratios.iter().map(|&(lr, _)| m2_token(lr)).collect();
    let trust: Vec<bool> = batch
        .tokens
        .iter()
        .zip(&ratios)
        .map(|(t, &(_, r))| is_trust_region_token(r, t.advantage))
        .collect();
    Ok(m2po_mask_values(&m2, &trust, tau))
}

/// Batch divergence estimators between the behavior and current policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// `−mean(log r)`
    pub kl_hat: f64,
    /// `mean((log r)²)`
    pub m2_hat: f64,
    /// `mean(|log r|)`
    pub abs_kl_hat: f64,
    /// `mean((r − 1)²)`
    pub chi2_hat: f64,
    pub token_count: usize,
}

impl DivergenceReport {
    pub fn from_log_ratios(log_ratios: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut n, mut lr_sum, mut sq, mut abs, mut chi) = (0usize, 0.0, 0.0, 0.0, 0.0);
        for lr in log_ratios {
            n += 1;
            lr_sum += lr;
            sq += lr * lr;
            abs += lr.abs();
            chi += lr.exp_m1().powi(2);
        }
        if n == 0 {
            return Err(Error::Contract("divergence of an empty token set".into()));
        }
        let nf = n as f64;
        Ok(Self {
            kl_hat: 0.0 - lr_sum / nf,
            m2_hat: sq / nf,
            abs_kl_hat: abs / nf,
            chi2_hat: chi / nf,
            token_count: n,
        })
    }
}

pub fn divergence_report(batch: &TrainBatch, mask: Option<&Mask>) -> Result<DivergenceReport> {
    if let Some(m) = mask {
        if m.len() != batch.len() {
            return Err(Error::Contract(format!(
                "mask of {} entries for {} tokens",
                m.len(),
                batch.len()
            )));
        }
    }
    let ratios = batch_ratios(batch)?;
    DivergenceReport::from_log_ratios(
        ratios
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m.keep[*i]))
            .map(|(_, &(lr, _))| lr),
    )
}

/// Outcome of checking `mean((r−1)²) ≤ R²·mean((log r)²)` on a ratio sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub holds: bool,
    /// `R²·M2 − χ²`
    pub slack: f64,
    pub chi2: f64,
    pub m2: f64,
    /// Every token satisfied `(e^z−1)² ≤ z²·e^{2|z|}`.
    pub pointwise_holds: bool,
    /// Smallest `z²·e^{2|z|} − (e^z−1)²` over the sample.
    pub min_pointwise_slack: f64,
}

const BOUND_TOL: f64 = 1e-12;

/// Pointwise slack `z²·e^{2|z|} − (e^z − 1)²`, non-negative for every real `z`.
#[inline]
pub fn pointwise_bound_slack(z: f64) -> f64 {
    z * z * (2.0 * z.abs()).exp() - z.exp_m1().powi(2)
}

pub fn chi2_bound_check(ratios: &[f64], r_bound: f64) -> Result<BoundCheck> {
    if r_bound.is_nan() || r_bound < 1.0 {
        return Err(Error::Config(format!("R must be >= 1, got {r_bound}")));
    }
    if ratios.is_empty() {
        return Err(Error::Contract("bound check on an empty sample".into()));
    }
    // one ulp of slack for ratios produced as exp(±ln R)
    let hi = r_bound * (1.0 + 1e-12);
    let lo = (1.0 / r_bound) * (1.0 - 1e-12);
    let mut chi = 0.0;
    let mut m2 = 0.0;
    let mut min_point = f64::INFINITY;
    for (i, &r) in ratios.iter().enumerate() {
        if !(r >= lo && r <= hi) {
            return Err(Error::Precondition {
                index: i,
                message: format!("ratio {r} outside [1/{r_bound}, {r_bound}]"),
            });
        }
        let z = r.ln();
        chi += (r - 1.0).powi(2);
        m2 += z * z;
        min_point = min_point.min(pointwise_bound_slack(z));
    }
    let n = ratios.len() as f64;
    let (chi, m2) = (chi / n, m2 / n);
    let slack = r_bound * r_bound * m2 - chi;
    Ok(BoundCheck {
        holds: chi <= r_bound * r_bound * m2 + BOUND_TOL,
        slack,
        chi2: chi,
        m2,
        pointwise_holds: min_point >= -BOUND_TOL,
        min_pointwise_slack: min_point,
    })
}

/// Ratios `e^z` with `z` uniform on `[−ln R, ln R]`.
pub fn sample_log_uniform_ratios<R: Rng>(r_bound: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let span = r_bound.ln();
    (0..n)
        .map(|_| {
            if span == 0.0 {
                1.0
            } else {
                rng.gen_range(-span..=span).exp()
            }
        })
        .collect()
}
