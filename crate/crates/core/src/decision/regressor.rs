//! Learned mode selector: per-candidate linear regressors that predict the
//! time-to-equal-progress of each mode from a prediction snapshot.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::cluster::{cluster_by_time, DEFAULT_CLUSTER_SPREAD};
use super::select::{compare_candidates, default_tw_grid, rank_candidates, DecisionInput};
use super::{DecisionError, ModeCandidate};
use crate::lstsq;
use crate::model::{Architecture, PgnsCurve, SyncMode};
use crate::predictor::{deviation_stats, DEFAULT_STRAGGLER_THRESHOLD};

/// Rows required before the learned selector takes over.
pub const DEFAULT_MIN_ROWS: usize = 200;

/// What one decision point looks like to a selector: the per-worker
/// predictions and the job context they were made in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSnapshot {
    pub architecture: Architecture,
    pub model: String,
    pub batch_per_worker: u32,
    pub learning_rate: f64,
    pub completed_steps: u64,
    pub predicted_times: Vec<f64>,
    /// Largest `(T_i - min T) / min T`; derived from the times when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_deviation_ratio: Option<f64>,
    /// Noise scale to use; looked up from calibration when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tw_grid: Option<Vec<f64>>,
}

impl DecisionSnapshot {
    pub fn workers(&self) -> usize {
        self.predicted_times.len()
    }

    pub fn deviation_ratio(&self) -> f64 {
        self.max_deviation_ratio
            .unwrap_or_else(|| deviation_stats(&self.predicted_times).map(|s| s.spread_ratio).unwrap_or(0.0))
    }

    /// Heuristic input for this snapshot. `curve` supplies the noise scale
    /// when the snapshot does not carry one.
    pub fn decision_input(&self, curve: Option<&PgnsCurve>) -> Option<DecisionInput> {
        let phi = self.phi.or_else(|| curve.map(|c| c.phi_at(self.completed_steps)))?;
        Some(DecisionInput {
            architecture: self.architecture,
            total_batch: self.workers() as f64 * f64::from(self.batch_per_worker),
            phi,
            times: self.predicted_times.clone(),
            threshold: self.threshold.unwrap_or(DEFAULT_STRAGGLER_THRESHOLD),
            tw_grid: self.tw_grid.clone().unwrap_or_else(default_tw_grid),
        })
    }
}

/// Identity of one candidate mode across snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CandidateKey {
    Static(usize),
    Dynamic,
    /// Removed count and parent wait in microseconds.
    Ar {
        x: usize,
        t_w_us: u64,
    },
}

impl CandidateKey {
    pub fn of(mode: &SyncMode) -> Self {
        match mode {
            SyncMode::StaticX { x } => CandidateKey::Static(*x),
            SyncMode::DynamicX { .. } => CandidateKey::Dynamic,
            SyncMode::ArRemoval { x, t_w } => CandidateKey::Ar { x: *x, t_w_us: (t_w * 1e6).round() as u64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub snapshot: DecisionSnapshot,
    pub labels: Vec<(CandidateKey, f64)>,
}

impl DatasetRow {
    /// Row labelled with the heuristic's estimate for every candidate.
    pub fn from_heuristic(snapshot: DecisionSnapshot, input: &DecisionInput) -> Result<Self, DecisionError> {
        let labels = rank_candidates(input)?.into_iter().map(|c| (CandidateKey::of(&c.mode), c.est_time)).collect();
        Ok(Self { snapshot, labels })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressorDataset {
    pub rows: Vec<DatasetRow>,
}

impl RegressorDataset {
    pub fn push(&mut self, row: DatasetRow) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Linear models keyed by candidate, over a shared feature encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRegressor {
    workers: usize,
    vocabulary: Vec<String>,
    models: BTreeMap<CandidateKey, LinearModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LinearModel {
    beta: Vec<f64>,
    /// Feature range seen in training.
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Feature vector. The models predict a progress rate (inverse time), which
/// is linear in inverse iteration times for every mode family, so the
/// features are mostly reciprocals: ascending inverse predicted times, the
/// summed inverse cluster maxima bucketed by cluster size, for all-reduce
/// candidates the inverse ring-plus-wait times, then the deviation ratio,
/// learning rate, completed steps and a one-hot model id. The time blocks
/// are also crossed with the one-hot so each model gets its own slopes.
fn features(snapshot: &DecisionSnapshot, vocabulary: &[String], key: &CandidateKey) -> Vec<f64> {
    let n = snapshot.workers();
    let mut sorted = snapshot.predicted_times.clone();
    sorted.sort_by(f64::total_cmp);
    let mut timing: Vec<f64> = sorted.iter().map(|t| 1.0 / t).collect();
    let mut by_size = vec![0.0; n];
    for c in cluster_by_time(&snapshot.predicted_times, DEFAULT_CLUSTER_SPREAD).clusters {
        by_size[c.size() - 1] += 1.0 / c.max_time;
    }
    timing.extend(by_size);
    if let CandidateKey::Ar { t_w_us, .. } = key {
        let t_w = *t_w_us as f64 / 1e6;
        timing.extend(sorted.iter().map(|t| 1.0 / (t + t_w)));
    }
    let onehot: Vec<f64> = vocabulary.iter().map(|m| if *m == snapshot.model { 1.0 } else { 0.0 }).collect();
    let mut f = timing.clone();
    f.push(snapshot.deviation_ratio());
    f.push(snapshot.learning_rate);
    f.push(snapshot.completed_steps as f64);
    f.extend_from_slice(&onehot);
    for t in &timing {
        f.extend(onehot.iter().map(|o| o * t));
    }
    f
}

pub fn train_mode_regressor(dataset: &RegressorDataset, min_rows: usize) -> Result<ModeRegressor, DecisionError> {
    if dataset.len() < min_rows.max(1) {
        return Err(DecisionError::NotReady { rows: dataset.len(), needed: min_rows.max(1) });
    }
    let workers = dataset.rows[0].snapshot.workers();
    if let Some(bad) = dataset.rows.iter().find(|r| r.snapshot.workers() != workers) {
        return Err(DecisionError::TimesLength { expected: workers, got: bad.snapshot.workers() });
    }
    let vocabulary: Vec<String> =
        dataset.rows.iter().map(|r| r.snapshot.model.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut per_key: BTreeMap<CandidateKey, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
    for row in &dataset.rows {
        for &(key, label) in &row.labels {
            if !(label > 0.0 && label.is_finite()) {
                continue;
            }
            let e = per_key.entry(key).or_default();
            e.0.push(features(&row.snapshot, &vocabulary, &key));
            e.1.push(1.0 / label);
        }
    }
    let mut models = BTreeMap::new();
    for (key, (x, y)) in per_key {
        let width = x[0].len();
        let mut lo = vec![f64::INFINITY; width];
        let mut hi = vec![f64::NEG_INFINITY; width];
        for f in &x {
            for (k, v) in f.iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
        // intercept column
        let x: Vec<Vec<f64>> = x.into_iter().map(|r| [&[1.0][..], &r].concat()).collect();
        if let Some(beta) = lstsq::solve(&x, &y) {
            models.insert(key, LinearModel { beta, lo, hi });
        }
    }
    Ok(ModeRegressor { workers, vocabulary, models })
}

impl ModeRegressor {
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn candidates(&self) -> impl Iterator<Item = &CandidateKey> {
        self.models.keys()
    }

    /// Predicted time for `key`. Features are clamped to the training range
    /// widened by its own width on each side, so mild extrapolation stays
    /// linear and wild inputs cannot run away.
    pub fn predict(&self, key: &CandidateKey, snapshot: &DecisionSnapshot) -> Option<f64> {
        let m = self.models.get(key)?;
        let mut f = features(snapshot, &self.vocabulary, key);
        if f.len() != m.lo.len() {
            return None;
        }
        for (k, v) in f.iter_mut().enumerate() {
            let w = m.hi[k] - m.lo[k];
            *v = v.clamp(m.lo[k] - w, m.hi[k] + w);
        }
        let rate = m.beta[0] + lstsq::dot(&m.beta[1..], &f);
        Some(1.0 / rate.max(MIN_RATE))
    }
}

/// Floor on predicted progress rate, one update per ~30 years.
const MIN_RATE: f64 = 1e-9;

/// Candidate with the least predicted time, drawn from the same set the
/// heuristic would consider and tie-broken the same way.
pub fn select_mode_ml(regressor: &ModeRegressor, snapshot: &DecisionSnapshot) -> Result<ModeCandidate, DecisionError> {
    let n = snapshot.workers();
    if n != regressor.workers {
        return Err(DecisionError::TimesLength { expected: regressor.workers, got: n });
    }
    if !snapshot.predicted_times.iter().all(|t| *t > 0.0 && t.is_finite()) {
        return Err(DecisionError::InvalidTimes);
    }
    let mut candidates = Vec::new();
    match snapshot.architecture {
        Architecture::ParameterServer => {
            for x in 1..=n {
                candidates.push(SyncMode::StaticX { x });
            }
            let partition = cluster_by_time(&snapshot.predicted_times, DEFAULT_CLUSTER_SPREAD);
            // one cluster is SSGD; its own model would only add noise to a tie
            if partition.clusters.len() > 1 {
                candidates.push(SyncMode::DynamicX { partition });
            }
        }
        Architecture::AllReduce => {
            let input = DecisionInput {
                architecture: Architecture::AllReduce,
                total_batch: 1.0,
                phi: 0.0,
                times: snapshot.predicted_times.clone(),
                threshold: snapshot.threshold.unwrap_or(DEFAULT_STRAGGLER_THRESHOLD),
                tw_grid: Vec::new(),
            };
            let stragglers = input.stragglers_slowest_first()?.len();
            for key in regressor.models.keys() {
                if let CandidateKey::Ar { x, t_w_us } = *key {
                    if x <= stragglers {
                        candidates.push(SyncMode::ArRemoval { x, t_w: t_w_us as f64 / 1e6 });
                    }
                }
            }
        }
    }
    let mut scored: Vec<ModeCandidate> = candidates
        .into_iter()
        .filter_map(|mode| {
            let est_time = regressor.predict(&CandidateKey::of(&mode), snapshot)?;
            Some(ModeCandidate { mode, est_time })
        })
        .collect();
    if scored.is_empty() {
        return Err(DecisionError::NotReady { rows: 0, needed: 1 });
    }
    scored.sort_by(|a, b| compare_candidates(a, b, n));
    Ok(scored.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::select_mode_heuristic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snapshot(rng: &mut ChaCha8Rng, n: usize) -> DecisionSnapshot {
        let base = rng.random_range(0.3..0.8);
        let mut times: Vec<f64> = (0..n).map(|_| base * rng.random_range(1.0..1.1)).collect();
        let slow = rng.random_range(0..3usize);
        for t in times.iter_mut().take(slow) {
            *t *= rng.random_range(1.5..8.0);
        }
        DecisionSnapshot {
            architecture: Architecture::ParameterServer,
            model: "m".into(),
            batch_per_worker: 128,
            learning_rate: 0.1,
            completed_steps: 0,
            predicted_times: times,
            max_deviation_ratio: None,
            phi: Some(512.0),
            threshold: None,
            tw_grid: None,
        }
    }

    fn dataset(rng: &mut ChaCha8Rng, rows: usize) -> RegressorDataset {
        let mut d = RegressorDataset::default();
        for _ in 0..rows {
            let s = snapshot(rng, 8);
            let input = s.decision_input(None).unwrap();
            d.push(DatasetRow::from_heuristic(s, &input).unwrap());
        }
        d
    }

    #[test]
    fn not_ready_below_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = dataset(&mut rng, 10);
        assert_eq!(train_mode_regressor(&d, DEFAULT_MIN_ROWS), Err(DecisionError::NotReady { rows: 10, needed: 200 }));
    }

    #[test]
    fn reproduces_static_estimates_on_held_out_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reg = train_mode_regressor(&dataset(&mut rng, 300), DEFAULT_MIN_ROWS).unwrap();
        for _ in 0..100 {
            let s = snapshot(&mut rng, 8);
            let input = s.decision_input(None).unwrap();
            let mut sorted = input.times.clone();
            sorted.sort_by(f64::total_cmp);
            for x in 1..=8 {
                let want = crate::decision::time_static_x(x, 8, 1024.0, 512.0, &sorted).unwrap();
                let got = reg.predict(&CandidateKey::Static(x), &s).unwrap();
                assert!(((got - want) / want).abs() < 0.01, "x={x} {got} vs {want}");
            }
        }
    }

    #[test]
    fn agrees_with_heuristic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reg = train_mode_regressor(&dataset(&mut rng, 300), DEFAULT_MIN_ROWS).unwrap();
        let mut same = 0;
        for _ in 0..100 {
            let s = snapshot(&mut rng, 8);
            let h = select_mode_heuristic(&s.decision_input(None).unwrap()).unwrap();
            let m = select_mode_ml(&reg, &s).unwrap();
            same += usize::from(h.mode == m.mode);
        }
        assert!(same >= 95, "{same}/100");
    }

    #[test]
    fn duplicated_rows_fit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dataset(&mut rng, 220);
        let mut doubled = d.clone();
        doubled.rows.extend(d.rows.iter().cloned());
        let a = train_mode_regressor(&d, DEFAULT_MIN_ROWS).unwrap();
        let b = train_mode_regressor(&doubled, DEFAULT_MIN_ROWS).unwrap();
        let s = snapshot(&mut rng, 8);
        for key in a.candidates() {
            let (pa, pb) = (a.predict(key, &s).unwrap(), b.predict(key, &s).unwrap());
            assert!((pa - pb).abs() <= 1e-9 * pa.abs().max(1.0), "{key:?}");
        }
    }

    #[test]
    fn equal_predictions_break_toward_ssgd() {
        let mut d = RegressorDataset::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..DEFAULT_MIN_ROWS {
            let s = snapshot(&mut rng, 4);
            let mut labels: Vec<_> = (1..=4).map(|x| (CandidateKey::Static(x), 1.0)).collect();
            labels.push((CandidateKey::Dynamic, 1.0));
            d.push(DatasetRow { snapshot: s, labels });
        }
        let reg = train_mode_regressor(&d, DEFAULT_MIN_ROWS).unwrap();
        let c = select_mode_ml(&reg, &snapshot(&mut rng, 4)).unwrap();
        assert_eq!(c.mode, SyncMode::StaticX { x: 4 });
    }

    #[test]
    fn out_of_range_features_still_select() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reg = train_mode_regressor(&dataset(&mut rng, 250), DEFAULT_MIN_ROWS).unwrap();
        let mut s = snapshot(&mut rng, 8);
        s.predicted_times = vec![1e-3, 1e4, 5.0, 5.0, 5.0, 5.0, 5.0, 900.0];
        s.learning_rate = 1e6;
        s.completed_steps = u64::MAX / 2;
        s.model = "never-seen".into();
        let c = select_mode_ml(&reg, &s).unwrap();
        c.mode.validate(8).unwrap();
        assert!(c.est_time.is_finite());
    }
}
