use serde::{Deserialize, Serialize};

use super::DecisionError;
use crate::model::{Architecture, Policy, SyncMode};
use crate::predictor::{stragglers_of, DEFAULT_STRAGGLER_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Seconds a straggler must persist before sync-switch goes asynchronous.
    pub switch_after_s: f64,
    /// Consecutive imbalanced iterations before lb-bsp moves samples.
    pub rebalance_window: u32,
    pub rebalance_step: u32,
    /// Fastest workers lgc waits for.
    pub lgc_k: usize,
    pub lgc_t_w: f64,
    pub threshold: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            switch_after_s: 5.0,
            rebalance_window: 8,
            rebalance_step: 32,
            lgc_k: 5,
            lgc_t_w: 0.1,
            threshold: DEFAULT_STRAGGLER_THRESHOLD,
        }
    }
}

/// What a baseline sees after one iteration round.
#[derive(Debug, Clone, Copy)]
pub struct BaselineObservation<'a> {
    pub now: f64,
    /// Latest measured iteration time per worker.
    pub times: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineAction {
    Keep,
    SetMode(SyncMode),
    /// New per-worker batch sizes.
    Resize(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub policy: Policy,
    pub architecture: Architecture,
    pub mode: SyncMode,
    pub batches: Vec<u32>,
    straggling_since: Option<f64>,
    imbalanced_streak: u32,
}

impl BaselineState {
    pub fn new(
        policy: Policy,
        architecture: Architecture,
        batches: Vec<u32>,
        cfg: &BaselineConfig,
    ) -> Result<Self, DecisionError> {
        let n = batches.len();
        let unsupported = || DecisionError::Unsupported { policy, arch: architecture };
        let mode = match (policy, architecture) {
            (Policy::Ssgd | Policy::SyncSwitch | Policy::LbBsp, Architecture::ParameterServer) => SyncMode::ssgd(n),
            (Policy::Asgd, Architecture::ParameterServer) => SyncMode::asgd(),
            (Policy::Ssgd | Policy::LbBsp, Architecture::AllReduce) => SyncMode::ArRemoval { x: 0, t_w: 0.0 },
            (Policy::Asgd | Policy::SyncSwitch, Architecture::AllReduce) => return Err(unsupported()),
            (Policy::Lgc, Architecture::ParameterServer) => SyncMode::StaticX { x: cfg.lgc_k.min(n) },
            (Policy::Lgc, Architecture::AllReduce) => {
                SyncMode::ArRemoval { x: n.saturating_sub(cfg.lgc_k.min(n).max(1)), t_w: cfg.lgc_t_w }
            }
            (Policy::Star(_), _) => return Err(DecisionError::NotABaseline(policy)),
        };
        Ok(Self { policy, architecture, mode, batches, straggling_since: None, imbalanced_streak: 0 })
    }
}

/// Advance a baseline by one observation and report what should change.
pub fn baseline_policy_step(
    state: &mut BaselineState,
    cfg: &BaselineConfig,
    obs: BaselineObservation<'_>,
) -> Result<BaselineAction, DecisionError> {
    let n = state.batches.len();
    if obs.times.len() != n {
        return Err(DecisionError::TimesLength { expected: n, got: obs.times.len() });
    }
    match state.policy {
        Policy::Ssgd | Policy::Asgd | Policy::Lgc => Ok(BaselineAction::Keep),
        Policy::Star(_) => Err(DecisionError::NotABaseline(state.policy)),
        Policy::SyncSwitch => {
            let straggling =
                !stragglers_of(obs.times, cfg.threshold).map_err(|_| DecisionError::InvalidTimes)?.is_empty();
            state.straggling_since = if straggling { state.straggling_since.or(Some(obs.now)) } else { None };
            let persisted = state.straggling_since.is_some_and(|t0| obs.now - t0 >= cfg.switch_after_s);
            let want = if persisted { SyncMode::asgd() } else { SyncMode::ssgd(n) };
            if want == state.mode {
                return Ok(BaselineAction::Keep);
            }
            state.mode = want.clone();
            Ok(BaselineAction::SetMode(want))
        }
        Policy::LbBsp => {
            if obs.times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
                return Err(DecisionError::InvalidTimes);
            }
            let fastest = argbest(obs.times, |a, b| a < b);
            let slowest = argbest(obs.times, |a, b| a > b);
            let gap = (obs.times[slowest] - obs.times[fastest]) / obs.times[fastest];
            if gap <= 1e-9 {
                state.imbalanced_streak = 0;
                return Ok(BaselineAction::Keep);
            }
            state.imbalanced_streak += 1;
            if state.imbalanced_streak < cfg.rebalance_window {
                return Ok(BaselineAction::Keep);
            }
            state.imbalanced_streak = 0;
            let moved = cfg.rebalance_step.min(state.batches[slowest].saturating_sub(1));
            if moved == 0 {
                return Ok(BaselineAction::Keep);
            }
            state.batches[slowest] -= moved;
            state.batches[fastest] += moved;
            Ok(BaselineAction::Resize(state.batches.clone()))
        }
    }
}

/// First index whose value beats all others under `better`.
fn argbest(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &t) in v.iter().enumerate().skip(1) {
        if better(t, v[best]) {
            best = i;
        }
    }
    best
}
