use serde::{Deserialize, Serialize};

use crate::model::PgnsCurve;

/// Training progress of one job in SSGD-equivalent updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgressLedger {
    pub progress: f64,
    pub updates: u64,
    /// Samples folded into updates so far.
    pub samples: f64,
}

impl ProgressLedger {
    /// Completed SSGD-sized steps.
    pub fn step(&self, total_batch: f64) -> u64 {
        (self.samples / total_batch).floor() as u64
    }
}

/// Progress one update of `batch` samples is worth at `step`.
pub fn update_credit(curve: &PgnsCurve, step: u64, batch: f64) -> f64 {
    1.0 / (1.0 + curve.phi_at(step) / batch)
}

/// Fold one parameter update into the ledger and return its credit.
/// `discount` scales the credit, e.g. for staleness; 1 leaves it alone.
pub fn apply_update_progress(
    ledger: &mut ProgressLedger,
    curve: &PgnsCurve,
    total_batch: f64,
    batch: f64,
    discount: f64,
) -> f64 {
    let credit = update_credit(curve, ledger.step(total_batch), batch) * discount;
    ledger.progress += credit;
    ledger.updates += 1;
    ledger.samples += batch;
    credit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn credit_examples() {
        let mut l = ProgressLedger::default();
        assert_eq!(apply_update_progress(&mut l, &PgnsCurve::constant(0.0), 1024.0, 1024.0, 1.0), 1.0);
        assert_eq!(apply_update_progress(&mut l, &PgnsCurve::constant(1024.0), 1024.0, 1024.0, 1.0), 0.5);
        // StaticX(4) of 8 at M = 1024 updates with 512 samples
        assert_eq!(apply_update_progress(&mut l, &PgnsCurve::constant(512.0), 1024.0, 512.0, 1.0), 0.5);
        assert_eq!(l.updates, 3);
        assert_eq!(l.progress, 2.0);
        assert_eq!(l.step(1024.0), 2);
    }

    #[test]
    fn step_follows_samples() {
        let curve = PgnsCurve::new(vec![(0, 0.0), (2, 1024.0)]);
        let mut l = ProgressLedger::default();
        let credits: Vec<f64> = (0..6).map(|_| apply_update_progress(&mut l, &curve, 1024.0, 512.0, 1.0)).collect();
        // the noise scale switches once four half-batches have been applied
        assert_eq!(credits, vec![1.0, 1.0, 1.0, 1.0, 1.0 / 3.0, 1.0 / 3.0]);
    }
}
