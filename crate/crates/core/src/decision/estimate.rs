//! Time to reach equal training progress under each candidate mode.
//!
//! One parameter update with batch `b` is worth `1 / (1 + phi / b)` of a
//! full-batch update, so the number of updates needed scales with
//! `1 + phi / b` and the time with that factor times the update interval.

use super::DecisionError;
use crate::model::ClusterPartition;

fn efficiency_factor(phi: f64, batch: f64) -> f64 {
    1.0 + phi / batch
}

fn check_times(times: &[f64]) -> Result<(), DecisionError> {
    if times.iter().all(|t| *t > 0.0 && t.is_finite()) {
        Ok(())
    } else {
        Err(DecisionError::InvalidTimes)
    }
}

/// Static x-order estimate. `sorted_times` ascending; the update interval is
/// the x-th smallest predicted time.
pub fn time_static_x(
    x: usize,
    n: usize,
    total_batch: f64,
    phi: f64,
    sorted_times: &[f64],
) -> Result<f64, DecisionError> {
    if x == 0 || x > n {
        return Err(DecisionError::OrderOutOfRange { x, n });
    }
    if sorted_times.len() != n {
        return Err(DecisionError::TimesLength { expected: n, got: sorted_times.len() });
    }
    check_times(sorted_times)?;
    let t_x = sorted_times[x - 1];
    Ok(efficiency_factor(phi, x as f64 * total_batch / n as f64) * t_x)
}

/// Dynamic x-order estimate: clusters progress in parallel, each at the rate
/// set by its own size and slowest member.
pub fn time_dynamic(partition: &ClusterPartition, n: usize, total_batch: f64, phi: f64) -> Result<f64, DecisionError> {
    if partition.clusters.is_empty() {
        return Err(DecisionError::EmptyPartition);
    }
    if !partition.clusters.iter().all(|c| c.max_time > 0.0 && c.max_time.is_finite()) {
        return Err(DecisionError::InvalidTimes);
    }
    if let [only] = partition.clusters.as_slice() {
        // same arithmetic as the static estimate so the two compare exactly
        let batch = only.size() as f64 * total_batch / n as f64;
        return Ok(efficiency_factor(phi, batch) * only.max_time);
    }
    let mut rate = 0.0;
    for c in &partition.clusters {
        let batch = c.size() as f64 * total_batch / n as f64;
        rate += 1.0 / (efficiency_factor(phi, batch) * c.max_time);
    }
    Ok(1.0 / rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArEstimate {
    pub est_time: f64,
    /// Slowest retained ring worker.
    pub t_ring: f64,
    /// Removed workers predicted to make the parent deadline.
    pub on_time: usize,
}

/// Ring all-reduce with the workers in `removed` re-attached as children.
/// A removed worker counts toward the batch if its predicted time is within
/// `t_ring + t_w`.
pub fn time_allreduce(
    t_w: f64,
    n: usize,
    total_batch: f64,
    phi: f64,
    times: &[f64],
    removed: &[usize],
) -> Result<ArEstimate, DecisionError> {
    let x = removed.len();
    if x >= n {
        return Err(DecisionError::RemoveOutOfRange { x, n });
    }
    if times.len() != n {
        return Err(DecisionError::TimesLength { expected: n, got: times.len() });
    }
    if !(t_w >= 0.0 && t_w.is_finite()) {
        return Err(DecisionError::NegativeWait(t_w));
    }
    check_times(times)?;
    let mut is_removed = vec![false; n];
    for &w in removed {
        if w >= n || is_removed[w] {
            return Err(DecisionError::RemoveOutOfRange { x, n });
        }
        is_removed[w] = true;
    }
    let t_ring = (0..n).filter(|&w| !is_removed[w]).map(|w| times[w]).fold(0.0, f64::max);
    let deadline = t_ring + t_w;
    let on_time = removed.iter().filter(|&&w| times[w] <= deadline).count();
    let batch = (n - x + on_time) as f64 * total_batch / n as f64;
    Ok(ArEstimate { est_time: efficiency_factor(phi, batch) * (t_ring + t_w), t_ring, on_time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::cluster_by_time;
    use crate::model::Cluster;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn static_examples() {
        for x in 1..=4 {
            assert_eq!(time_static_x(x, 4, 512.0, 0.0, &[1.0, 2.0, 3.0, 4.0]).unwrap(), x as f64);
        }
        let t = time_static_x(8, 8, 1024.0, 512.0, &[0.5; 8]).unwrap();
        assert!(rel(t, 0.75) < 1e-12);

        let mut times = vec![0.5; 7];
        times.push(5.0);
        let t4 = time_static_x(4, 8, 1024.0, 512.0, &times).unwrap();
        let t8 = time_static_x(8, 8, 1024.0, 512.0, &times).unwrap();
        assert!(rel(t4, 1.0) < 1e-12);
        assert!(rel(t8, 7.5) < 1e-12);
        assert!(matches!(time_static_x(9, 8, 1024.0, 512.0, &times), Err(DecisionError::OrderOutOfRange { .. })));
    }

    #[test]
    fn dynamic_examples() {
        let single = ClusterPartition::single(8, 0.5);
        let d = time_dynamic(&single, 8, 1024.0, 512.0).unwrap();
        let s = time_static_x(8, 8, 1024.0, 512.0, &[0.5; 8]).unwrap();
        assert!((d - s).abs() < 1e-12);

        let two = ClusterPartition {
            clusters: vec![
                Cluster { workers: vec![0, 1, 2], max_time: 1.0 },
                Cluster { workers: vec![3], max_time: 10.0 },
            ],
        };
        let d = time_dynamic(&two, 4, 512.0, 384.0).unwrap();
        assert!(rel(d, 1.0 / 0.525) < 1e-12);
        assert!(rel(d, 1.9048) < 1e-4);

        let d0 = time_dynamic(&two, 4, 512.0, 0.0).unwrap();
        assert!(rel(d0, 1.0 / (1.0 + 0.1)) < 1e-12);

        assert_eq!(
            time_dynamic(&ClusterPartition { clusters: vec![] }, 4, 512.0, 1.0),
            Err(DecisionError::EmptyPartition)
        );
    }

    #[test]
    fn allreduce_examples() {
        let times = [0.4, 0.5, 0.45, 0.3];
        let e = time_allreduce(0.0, 4, 512.0, 256.0, &times, &[]).unwrap();
        assert!(rel(e.est_time, 1.5 * 0.5) < 1e-12);

        // six ring workers at most 0.5 s, one removed worker within the
        // deadline and one beyond it
        let times = [0.5, 0.4, 0.5, 0.45, 0.3, 0.5, 0.55, 0.9];
        let e = time_allreduce(0.1, 8, 1024.0, 512.0, &times, &[6, 7]).unwrap();
        assert_eq!(e.on_time, 1);
        assert_eq!(e.t_ring, 0.5);
        assert!(rel(e.est_time, (1.0 + 512.0 / 896.0) * 0.6) < 1e-12);
        assert!(rel(e.est_time, 0.9429) < 1e-4);

        // everyone on time restores the full batch
        let e = time_allreduce(0.5, 8, 1024.0, 512.0, &times, &[6, 7]).unwrap();
        assert_eq!(e.on_time, 2);
        assert!(rel(e.est_time, 1.5 * 1.0) < 1e-12);

        let all: Vec<usize> = (0..8).collect();
        assert!(time_allreduce(0.1, 8, 1024.0, 512.0, &times, &all).is_err());
    }

    proptest! {
        #[test]
        fn single_cluster_reduces_to_ssgd(
            times in prop::collection::vec(0.01f64..10.0, 2..32),
            m_per in 1.0f64..512.0,
            phi in 0.0f64..1e4,
        ) {
            let n = times.len();
            let m = m_per * n as f64;
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            let tmax = *sorted.last().unwrap();
            let d = time_dynamic(&ClusterPartition::single(n, tmax), n, m, phi).unwrap();
            let s = time_static_x(n, n, m, phi, &sorted).unwrap();
            prop_assert!((d - s).abs() < 1e-12 * s.max(1.0));
        }

        #[test]
        fn efficiency_falls_and_interval_rises_with_x(
            times in prop::collection::vec(0.01f64..10.0, 2..32),
            phi in 0.001f64..1e4,
        ) {
            let n = times.len();
            let m = 128.0 * n as f64;
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            for x in 1..n {
                let f = |x: usize| 1.0 + phi / (x as f64 * m / n as f64);
                prop_assert!(f(x + 1) < f(x));
                prop_assert!(sorted[x] >= sorted[x - 1]);
            }
        }

        #[test]
        fn dynamic_with_zero_noise_is_harmonic(times in prop::collection::vec(0.05f64..10.0, 1..16)) {
            let p = cluster_by_time(&times, 0.2);
            let d = time_dynamic(&p, times.len(), 1024.0, 0.0).unwrap();
            let h = 1.0 / p.clusters.iter().map(|c| 1.0 / c.max_time).sum::<f64>();
            prop_assert!((d - h).abs() < 1e-12 * h);
        }
    }
}
