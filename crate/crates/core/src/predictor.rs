//! Next-iteration resource forecasts, iteration-time prediction and straggler
//! classification.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lstsq;
use crate::model::ModelProfile;
use crate::resource::{phase_durations, PhaseError};

pub const DEFAULT_HISTORY: usize = 100;
pub const DEFAULT_STRAGGLER_THRESHOLD: f64 = 0.20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("need at least two workers, got {0}")]
    TooFewWorkers(usize),
    #[error("worker {worker} has non-positive iteration time {time}")]
    NonPositiveTime { worker: usize, time: f64 },
    #[error(transparent)]
    Phase(#[from] PhaseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub cpu_share: f64,
    pub bw_share: f64,
    pub iteration_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Cpu,
    Bandwidth,
}

/// Fixed-capacity ring buffer of one worker's most recent observations.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    capacity: usize,
    items: VecDeque<Observation>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "history capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn push(&mut self, obs: Observation) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(obs);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn last(&self) -> Option<&Observation> {
        self.items.back()
    }

    pub fn series(&self, channel: Channel) -> Vec<f64> {
        self.items
            .iter()
            .map(|o| match channel {
                Channel::Cpu => o.cpu_share,
                Channel::Bandwidth => o.bw_share,
            })
            .collect()
    }
}

/// One-step-ahead forecaster over a scalar series.
pub trait Forecaster: Send + Sync {
    /// `series` is non-empty and oldest-first.
    fn forecast(&self, series: &[f64]) -> f64;
}

/// Linear autoregressive model with intercept, fit by least squares over the
/// whole window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearAr {
    pub order: usize,
}

impl Default for LinearAr {
    fn default() -> Self {
        Self { order: 3 }
    }
}

impl Forecaster for LinearAr {
    fn forecast(&self, series: &[f64]) -> f64 {
        let p = self.order;
        let last = *series.last().expect("forecast on empty series");
        if series.len() < p + 1 {
            return last;
        }
        let scale = series.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let y: Vec<f64> = series.iter().map(|v| v / scale).collect();
        let row = |t: usize| -> Vec<f64> {
            let mut r = Vec::with_capacity(p + 1);
            r.push(1.0);
            r.extend((1..=p).map(|lag| y[t - lag]));
            r
        };
        let rows: Vec<Vec<f64>> = (p..y.len()).map(row).collect();
        let targets: Vec<f64> = y[p..].to_vec();
        match lstsq::solve(&rows, &targets) {
            Some(beta) => lstsq::dot(&beta, &row(y.len())) * scale,
            None => last,
        }
    }
}

/// Forecast of a worker's next share on `channel`, clamped to `[0, capacity]`.
pub fn forecast_resource(
    history: &HistoryWindow,
    channel: Channel,
    capacity: f64,
    forecaster: &dyn Forecaster,
) -> Result<f64, PredictError> {
    if history.is_empty() {
        return Err(PredictError::EmptyHistory);
    }
    let v = forecaster.forecast(&history.series(channel));
    Ok(if v.is_finite() { v.clamp(0.0, capacity) } else { history.series(channel).pop().unwrap_or(0.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationPrediction {
    pub total: f64,
    /// Time from iteration start until the GPU phase finishes.
    pub compute_finish: f64,
}

pub fn predict_iteration_time(
    cpu_share: f64,
    bw_share: f64,
    profile: &ModelProfile,
    comm_bytes: f64,
) -> Result<IterationPrediction, PredictError> {
    let ph = phase_durations(cpu_share, bw_share, profile, comm_bytes)?;
    Ok(IterationPrediction { total: ph.total(), compute_finish: ph.preproc + ph.compute })
}

/// Learned iteration-time model: `T = c0 + c1/cpu + c2*(bytes/bw) + c3*batch`,
/// refit by least squares over a bounded window of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineTimeRegressor {
    window: usize,
    rows: VecDeque<(Vec<f64>, f64)>,
}

impl OnlineTimeRegressor {
    pub fn new(window: usize) -> Self {
        Self { window, rows: VecDeque::new() }
    }

    fn features(cpu_share: f64, bw_share: f64, comm_bytes: f64, batch: f64) -> Vec<f64> {
        vec![1.0, 1.0 / cpu_share, comm_bytes / bw_share, batch]
    }

    pub fn observe(&mut self, cpu_share: f64, bw_share: f64, comm_bytes: f64, batch: f64, time: f64) {
        if self.rows.len() == self.window {
            self.rows.pop_front();
        }
        self.rows.push_back((Self::features(cpu_share, bw_share, comm_bytes, batch), time));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `[intercept, per 1/cpu, per bytes/bw, per batch]`.
    pub fn coefficients(&self) -> Option<Vec<f64>> {
        if self.rows.len() < 4 {
            return None;
        }
        let (rows, y): (Vec<_>, Vec<_>) = self.rows.iter().cloned().unzip();
        lstsq::solve(&rows, &y)
    }

    pub fn predict(&self, cpu_share: f64, bw_share: f64, comm_bytes: f64, batch: f64) -> Option<f64> {
        let beta = self.coefficients()?;
        Some(lstsq::dot(&beta, &Self::features(cpu_share, bw_share, comm_bytes, batch)))
    }
}

/// Per-worker deviation from the fastest worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    /// `(T_i - min T) / min T` per worker.
    pub ratios: Vec<f64>,
    /// `max T - min T`, seconds.
    pub spread: f64,
    /// `spread / min T`.
    pub spread_ratio: f64,
}

pub fn deviation_stats(times: &[f64]) -> Result<DeviationStats, PredictError> {
    if times.len() < 2 {
        return Err(PredictError::TooFewWorkers(times.len()));
    }
    if let Some((worker, &time)) = times.iter().enumerate().find(|(_, t)| t.is_nan() || **t <= 0.0) {
        return Err(PredictError::NonPositiveTime { worker, time });
    }
    let min = times.iter().copied().fold(f64::INFINITY, f64::min);
    let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DeviationStats {
        ratios: times.iter().map(|t| (t - min) / min).collect(),
        spread: max - min,
        spread_ratio: (max - min) / min,
    })
}

/// Workers whose deviation ratio strictly exceeds `threshold`.
pub fn classify_stragglers(stats: &DeviationStats, threshold: f64) -> Vec<usize> {
    stats.ratios.iter().enumerate().filter(|(_, d)| **d > threshold).map(|(i, _)| i).collect()
}

/// Convenience: straggler set straight from times.
pub fn stragglers_of(times: &[f64], threshold: f64) -> Result<Vec<usize>, PredictError> {
    Ok(classify_stragglers(&deviation_stats(times)?, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::profile;
    use proptest::prelude::*;

    fn window(values: &[f64]) -> HistoryWindow {
        let mut h = HistoryWindow::new(DEFAULT_HISTORY);
        for &v in values {
            h.push(Observation { cpu_share: v, bw_share: v, iteration_time: 1.0 });
        }
        h
    }

    #[test]
    fn forecast_examples() {
        let ar = LinearAr::default();
        let h = window(&[0.8; 20]);
        assert!((forecast_resource(&h, Channel::Cpu, 10.0, &ar).unwrap() - 0.8).abs() < 1e-12);

        let ramp: Vec<f64> = (1..=10).map(f64::from).collect();
        let f = forecast_resource(&window(&ramp), Channel::Cpu, 100.0, &ar).unwrap();
        assert!((f - 11.0).abs() < 1e-9, "{f}");

        let f = forecast_resource(&window(&[0.5, 0.9]), Channel::Cpu, 10.0, &ar).unwrap();
        assert_eq!(f, 0.9);

        assert_eq!(forecast_resource(&window(&[]), Channel::Cpu, 1.0, &ar), Err(PredictError::EmptyHistory));
    }

    #[test]
    fn forecast_is_clamped() {
        let ramp: Vec<f64> = (1..=10).map(f64::from).collect();
        let f = forecast_resource(&window(&ramp), Channel::Cpu, 10.5, &LinearAr::default()).unwrap();
        assert_eq!(f, 10.5);
    }

    #[test]
    fn window_evicts_oldest() {
        let mut h = HistoryWindow::new(3);
        for v in [1.0, 2.0, 3.0, 4.0] {
            h.push(Observation { cpu_share: v, bw_share: 0.0, iteration_time: v });
        }
        assert_eq!(h.series(Channel::Cpu), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn prediction_matches_resource_engine() {
        let p = profile("m");
        let bytes = p.default_comm_bytes();
        let nominal = crate::resource::uncontended_phases(&p, bytes);
        let pred = predict_iteration_time(p.worker_cpu_demand, p.worker_bw_demand, &p, bytes).unwrap();
        assert!((pred.total - nominal.total()).abs() < 1e-15);
        assert!((pred.compute_finish - nominal.preproc - nominal.compute).abs() < 1e-15);

        // halving cpu adds exactly the pre-processing delta
        let halved = predict_iteration_time(p.worker_cpu_demand / 2.0, p.worker_bw_demand, &p, bytes).unwrap();
        assert!((halved.total - pred.total - nominal.preproc).abs() < 1e-12);

        assert!(matches!(
            predict_iteration_time(0.0, 1.0, &p, bytes),
            Err(PredictError::Phase(PhaseError::Starved(_)))
        ));
    }

    #[test]
    fn online_regressor_recovers_phase_model() {
        let p = profile("m");
        let bytes = p.default_comm_bytes();
        let mut reg = OnlineTimeRegressor::new(DEFAULT_HISTORY);
        let mut state = 0x2545_f491_u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state % 10_000) as f64 / 10_000.0
        };
        for _ in 0..50 {
            let cpu = 0.2 + 3.0 * next();
            let bw = 1e8 + 1e9 * next();
            let batch = 32.0 + 256.0 * next();
            let t = predict_iteration_time(cpu, bw, &p, bytes).unwrap().total;
            reg.observe(cpu, bw, bytes, batch, t);
        }
        let c = reg.coefficients().unwrap();
        assert!((c[0] - p.gpu_compute_time).abs() < 1e-6, "{c:?}");
        assert!((c[1] - p.preproc_work).abs() < 1e-6, "{c:?}");
        assert!((c[2] - 1.0).abs() < 1e-6, "{c:?}");
        assert!(c[3].abs() < 1e-6, "{c:?}");
        let direct = predict_iteration_time(1.3, 7e8, &p, bytes).unwrap().total;
        assert!((reg.predict(1.3, 7e8, bytes, 128.0).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn deviation_examples() {
        let s = deviation_stats(&[1.0, 1.1, 1.3]).unwrap();
        for (got, want) in s.ratios.iter().zip([0.0, 0.1, 0.3]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((s.spread - 0.3).abs() < 1e-12);

        let s = deviation_stats(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(s.ratios, vec![0.0; 3]);
        assert_eq!(s.spread, 0.0);

        assert_eq!(deviation_stats(&[2.0, 5.0]).unwrap().ratios, vec![0.0, 1.5]);
        assert!(matches!(deviation_stats(&[1.0, 0.0]), Err(PredictError::NonPositiveTime { worker: 1, .. })));
        assert!(deviation_stats(&[1.0]).is_err());
    }

    #[test]
    fn classify_examples() {
        let stats = |r: Vec<f64>| DeviationStats { ratios: r, spread: 0.0, spread_ratio: 0.0 };
        assert_eq!(classify_stragglers(&stats(vec![0.0, 0.1, 0.3]), 0.2), vec![2]);
        assert!(classify_stragglers(&stats(vec![0.0, 0.2]), 0.2).is_empty());
        assert_eq!(classify_stragglers(&stats(vec![0.0, 0.21, 0.9]), 0.2), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn straggler_set_is_scale_invariant(
            times in prop::collection::vec(0.1f64..10.0, 2..12),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = times.iter().map(|t| t * c).collect();
            let a = stragglers_of(&times, 0.2).unwrap();
            let b = stragglers_of(&scaled, 0.2).unwrap();
            // ratios can land within an ulp of the threshold after scaling
            let stats = deviation_stats(&times).unwrap();
            let near = stats.ratios.iter().any(|d| (d - 0.2).abs() < 1e-12);
            prop_assert!(near || a == b);
        }

        #[test]
        fn constant_series_is_fixed_point(v in 0.0f64..1e9, len in 1usize..120) {
            let mut h = HistoryWindow::new(DEFAULT_HISTORY);
            for _ in 0..len {
                h.push(Observation { cpu_share: v, bw_share: v, iteration_time: 1.0 });
            }
            let f = forecast_resource(&h, Channel::Bandwidth, f64::MAX, &LinearAr::default()).unwrap();
            prop_assert!((f - v).abs() <= 1e-9 * v.max(1.0));
        }
    }
}
