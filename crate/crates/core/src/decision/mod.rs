//! Synchronization-mode decisions: worker clustering, the time-to-progress
//! estimates for each candidate mode, heuristic and learned selectors,
//! learning-rate rescaling and the comparison baselines.

mod baseline;
mod cluster;
mod estimate;
mod regressor;
mod select;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Architecture, Policy, SyncMode};

pub use baseline::{baseline_policy_step, BaselineAction, BaselineConfig, BaselineObservation, BaselineState};
pub use cluster::{cluster_by_time, DEFAULT_CLUSTER_SPREAD};
pub use estimate::{time_allreduce, time_dynamic, time_static_x, ArEstimate};
pub use regressor::{
    select_mode_ml, train_mode_regressor, CandidateKey, DatasetRow, DecisionSnapshot, ModeRegressor, RegressorDataset,
    DEFAULT_MIN_ROWS,
};
pub use select::{
    default_tw_grid, rank_candidates, scale_learning_rate, scale_learning_rate_per_cluster, select_mode_heuristic,
    DecisionInput,
};

/// Heuristic decision latency measured on the reference deployment.
pub const HEURISTIC_LATENCY_S: f64 = 0.970;

/// A mode and its estimated time to reach one SSGD-update worth of progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCandidate {
    pub mode: SyncMode,
    pub est_time: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecisionError {
    #[error("order {x} outside 1..={n}")]
    OrderOutOfRange { x: usize, n: usize },
    #[error("cannot remove {x} of {n} workers from the ring")]
    RemoveOutOfRange { x: usize, n: usize },
    #[error("partition has no clusters")]
    EmptyPartition,
    #[error("expected {expected} predicted times, got {got}")]
    TimesLength { expected: usize, got: usize },
    #[error("predicted times must be positive and finite")]
    InvalidTimes,
    #[error("parent wait must be non-negative, got {0}")]
    NegativeWait(f64),
    #[error("`{0}` is not a baseline policy")]
    NotABaseline(Policy),
    #[error("policy `{policy}` is not available on the {arch} architecture")]
    Unsupported { policy: Policy, arch: Architecture },
    #[error("regressor not ready: {rows} rows, {needed} needed")]
    NotReady { rows: usize, needed: usize },
}
