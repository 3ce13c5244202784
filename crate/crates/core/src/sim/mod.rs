//! Fluid discrete-event simulation of training jobs sharing a cluster.
//!
//! Every running activity (a worker's pre-processing, a GPU phase, a
//! gradient transfer, a PS update) progresses at a rate fixed by max-min
//! fair shares of server CPU and NIC bandwidth. Rates are recomputed after
//! every event, so between events the world is piecewise constant.

mod control;
mod engine;
mod ledger;
mod metrics;
mod perturb;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::{default_tw_grid, BaselineConfig, DecisionError, DEFAULT_MIN_ROWS};
use crate::model::{ModeError, Policy, SyncMode, World};
use crate::predictor::{DEFAULT_HISTORY, DEFAULT_STRAGGLER_THRESHOLD};

pub use ledger::{apply_update_progress, update_credit, ProgressLedger};
pub use metrics::{IterationRecord, JobMetrics, RunMetrics, Tally, UpdateRecord};
pub use perturb::{
    expand, validate_perturbations, MarkovSpec, PerturbError, PerturbKind, PerturbTarget, Perturbation, Resolved,
    Window,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Simulated seconds before the run is cut off.
    pub horizon: f64,
    /// Overrides every job's policy.
    pub policy: Option<Policy>,
    /// Pins every job whose architecture the mode fits, bypassing its policy.
    /// Jobs of the other architecture keep their policy.
    pub fixed_mode: Option<SyncMode>,
    /// Forces the parent wait of every all-reduce removal mode.
    pub fixed_tw: Option<f64>,
    pub tw_grid: Vec<f64>,
    pub history: usize,
    pub threshold: f64,
    pub baseline: BaselineConfig,
    /// Reassign co-located resources when STAR changes mode.
    pub prevention: bool,
    pub strict_verification: bool,
    /// Credit multiplier per update of staleness; off when absent.
    pub staleness_discount: Option<f64>,
    pub ml_min_rows: usize,
    pub ml_retrain_every: usize,
    /// How long straggling must persist before the duration rule flags it.
    pub duration_rule_s: f64,
    pub record_iterations: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 1e6,
            policy: None,
            fixed_mode: None,
            fixed_tw: None,
            tw_grid: default_tw_grid(),
            history: DEFAULT_HISTORY,
            threshold: DEFAULT_STRAGGLER_THRESHOLD,
            baseline: BaselineConfig::default(),
            prevention: true,
            strict_verification: false,
            staleness_discount: None,
            ml_min_rows: DEFAULT_MIN_ROWS,
            ml_retrain_every: 50,
            duration_rule_s: 5.0,
            record_iterations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid perturbations: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Perturbations(Vec<PerturbError>),
    #[error("job `{job}`: {source}")]
    Mode { job: String, source: ModeError },
    #[error("job `{job}`: {source}")]
    Policy { job: String, source: DecisionError },
    #[error("job `{job}` needs {needed} GPUs but the cluster has {available}")]
    TooLarge { job: String, needed: usize, available: usize },
}

/// Run every job in `world` to convergence or the horizon.
pub fn run_simulation(
    world: &World,
    perturbations: &[Perturbation],
    cfg: &SimConfig,
    seed: u64,
) -> Result<RunMetrics, SimError> {
    let windows = expand(perturbations, world, seed).map_err(SimError::Perturbations)?;
    engine::Engine::new(world, cfg, windows, seed)?.run()
}
