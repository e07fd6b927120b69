//! Off-policy policy optimization under rollout staleness, at desk scale.
//!
//! A linear-softmax sequence policy is trained with group-relative advantages
//! on verifiable-reward toy tasks, using rollouts generated `k` model updates
//! earlier. Three surrogate objectives are available: the ε-clipped
//! objective, the unconstrained importance-weighted objective, and
//! second-moment masking (M2PO), which drops the largest-`(log r)²`
//! trust-region tokens until the batch mean falls below `τ_M2`.

pub mod advantage;
pub mod batch;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod staleness;
pub mod svg;
pub mod telemetry;
pub mod trainer;
pub mod trust_region;

pub use advantage::{compute_group_advantages, AdvantageSet};
pub use batch::{TokenRecord, TrainBatch};
pub use config::TrainConfig;
pub use env::{EnvConfig, EnvId, Environment, Group, PromptId, Response, RolloutRecord, Token};
pub use error::{Error, Result};
pub use experiment::{config_hash, train_to_dir, Manifest, RunWriter, SweepRow};
pub use objectives::{ObjectiveKind, ObjectiveSpec, TokenStatus, TokenWeights};
pub use policy::{FeatureMap, Features, PolicyParams, PolicySnapshot, TokenDistribution};
pub use staleness::{RolloutBuffer, ScheduledBatch, SchedulerState};
pub use telemetry::{EntropyBinReport, EvalRecord, MetricsRecord};
pub use trainer::{
    run_training, run_training_with, RunStatus, TrainObserver, TrainOutcome, TrainState,
};
pub use trust_region::{DivergenceReport, Mask};
