use serde::{Deserialize, Serialize};

use crate::model::Policy;

/// Confusion counts for a straggler predictor, one entry per evaluated
/// worker iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Tally {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// False positives over actual negatives.
    pub fn fp_rate(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    /// False negatives over actual positives.
    pub fn fn_rate(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub job_id: String,
    pub policy: Policy,
    pub submit_time: f64,
    /// Seconds from submission; absent if never reached.
    pub tta: Option<f64>,
    pub jct: Option<f64>,
    pub updates: u64,
    pub progress: f64,
    /// Update boundaries at which some worker's latest realized time was a
    /// straggler.
    pub straggler_iterations: u64,
    pub predictor: Tally,
    /// The fixed-duration rule: a worker is called a straggler once it has
    /// been one for five seconds.
    pub duration_rule: Tally,
    pub decisions: u64,
    pub decision_overhead: f64,
    pub final_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub job: usize,
    pub worker: usize,
    pub iteration: u64,
    pub start: f64,
    pub end: f64,
    /// Time spent in the worker's own phases, excluding waits.
    pub time: f64,
    pub predicted: Option<f64>,
    pub straggler: Option<bool>,
    pub predicted_straggler: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub job: usize,
    pub time: f64,
    pub batch: f64,
    pub step: u64,
    pub credit: f64,
    pub progress: f64,
    pub mode: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub jobs: Vec<JobMetrics>,
    pub iterations: Vec<IterationRecord>,
    pub updates: Vec<UpdateRecord>,
    /// The horizon was hit before every job converged.
    pub incomplete: bool,
    pub end_time: f64,
}

impl RunMetrics {
    pub fn predictor_total(&self) -> Tally {
        self.jobs.iter().fold(Tally::default(), |mut t, j| {
            t.merge(&j.predictor);
            t
        })
    }

    pub fn duration_rule_total(&self) -> Tally {
        self.jobs.iter().fold(Tally::default(), |mut t, j| {
            t.merge(&j.duration_rule);
            t
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tally_rates() {
        let mut t = Tally::default();
        for (p, a) in [(true, true), (true, false), (false, false), (false, false), (false, true)] {
            t.record(p, a);
        }
        assert_eq!(t, Tally { tp: 1, fp: 1, tn: 2, fn_: 1 });
        assert!((t.fp_rate() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.fn_rate(), 0.5);
        assert_eq!(Tally::default().fp_rate(), 0.0);
    }
}
