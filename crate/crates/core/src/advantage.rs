//! Group-relative advantages: each response's reward standardized against the
//! other responses to the same prompt, using the population standard deviation.

use crate::env::Group;
use crate::error::{Error, Result};

/// Below this population std a group is treated as carrying no ranking signal.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    /// All rewards (numerically) equal; `values` is then all zeros.
    pub degenerate: bool,
}

pub fn compute_group_advantages(rewards: &[f64]) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "group advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numeric {
            index: i,
            message: "non-finite reward".into(),
        });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(AdvantageSet {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    Ok(AdvantageSet {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}

/// Computes and stores advantages on a group; every token of response `i`
/// later inherits `advantages[i]`.
pub fn fill_group_advantages(group: &mut Group) -> Result<AdvantageSet> {
    let set = compute_group_advantages(&group.rewards())?;
    group.advantages.clone_from(&set.values);
    Ok(set)
}
