use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::cluster::{cluster_by_time, DEFAULT_CLUSTER_SPREAD};
use super::estimate::{time_allreduce, time_dynamic, time_static_x};
use super::{DecisionError, ModeCandidate};
use crate::model::{Architecture, ClusterPartition, SyncMode};
use crate::predictor::stragglers_of;

/// Parent wait times tried for all-reduce removal, seconds.
pub fn default_tw_grid() -> Vec<f64> {
    vec![0.03, 0.06, 0.09, 0.12, 0.15, 0.18, 0.21]
}

/// Everything the selector looks at for one job at one decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionInput {
    pub architecture: Architecture,
    pub total_batch: f64,
    pub phi: f64,
    /// Predicted iteration time per worker, indexed by worker.
    pub times: Vec<f64>,
    pub threshold: f64,
    pub tw_grid: Vec<f64>,
}

impl DecisionInput {
    pub fn workers(&self) -> usize {
        self.times.len()
    }

    /// Predicted stragglers, slowest first (ties by lower worker id).
    pub fn stragglers_slowest_first(&self) -> Result<Vec<usize>, DecisionError> {
        let mut s = stragglers_of(&self.times, self.threshold).map_err(|_| DecisionError::InvalidTimes)?;
        s.sort_by(|&a, &b| self.times[b].total_cmp(&self.times[a]).then(a.cmp(&b)));
        Ok(s)
    }
}

/// Ordering among equally fast candidates: more synchronous first.
fn preference(mode: &SyncMode, n: usize) -> (usize, usize, f64) {
    match mode {
        SyncMode::StaticX { x } => (0, n - x, 0.0),
        SyncMode::DynamicX { .. } => (1, 0, 0.0),
        SyncMode::ArRemoval { x, t_w } => (0, *x, *t_w),
    }
}

pub(crate) fn compare_candidates(a: &ModeCandidate, b: &ModeCandidate, n: usize) -> Ordering {
    a.est_time.total_cmp(&b.est_time).then_with(|| {
        let (pa, pb) = (preference(&a.mode, n), preference(&b.mode, n));
        pa.0.cmp(&pb.0).then(pa.1.cmp(&pb.1)).then(pa.2.total_cmp(&pb.2))
    })
}

/// Every candidate mode with its estimate, best first.
pub fn rank_candidates(input: &DecisionInput) -> Result<Vec<ModeCandidate>, DecisionError> {
    let n = input.workers();
    let mut out = match input.architecture {
        Architecture::ParameterServer => {
            let mut sorted = input.times.clone();
            sorted.sort_by(f64::total_cmp);
            let mut c = Vec::with_capacity(n + 1);
            for x in 1..=n {
                c.push(ModeCandidate {
                    mode: SyncMode::StaticX { x },
                    est_time: time_static_x(x, n, input.total_batch, input.phi, &sorted)?,
                });
            }
            let partition = cluster_by_time(&input.times, DEFAULT_CLUSTER_SPREAD);
            c.push(ModeCandidate {
                est_time: time_dynamic(&partition, n, input.total_batch, input.phi)?,
                mode: SyncMode::DynamicX { partition },
            });
            c
        }
        Architecture::AllReduce => {
            let stragglers = input.stragglers_slowest_first()?;
            let mut c = Vec::new();
            for x in 0..=stragglers.len() {
                let removed = &stragglers[..x];
                let waits: &[f64] = if x == 0 { &[0.0] } else { &input.tw_grid };
                for &t_w in waits {
                    let e = time_allreduce(t_w, n, input.total_batch, input.phi, &input.times, removed)?;
                    c.push(ModeCandidate { mode: SyncMode::ArRemoval { x, t_w }, est_time: e.est_time });
                }
            }
            c
        }
    };
    out.sort_by(|a, b| compare_candidates(a, b, n));
    Ok(out)
}

/// Mode with the least estimated time to equal progress.
pub fn select_mode_heuristic(input: &DecisionInput) -> Result<ModeCandidate, DecisionError> {
    Ok(rank_candidates(input)?.swap_remove(0))
}

/// Learning rate after switching to updates built from `reports` of `n`
/// workers' gradients.
pub fn scale_learning_rate(r_ssgd: f64, reports: usize, n: usize) -> f64 {
    r_ssgd * reports as f64 / n as f64
}

pub fn scale_learning_rate_per_cluster(r_ssgd: f64, partition: &ClusterPartition, n: usize) -> Vec<f64> {
    partition.clusters.iter().map(|c| scale_learning_rate(r_ssgd, c.size(), n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cluster;
    use proptest::prelude::*;

    fn ps(times: Vec<f64>, m: f64, phi: f64) -> DecisionInput {
        DecisionInput {
            architecture: Architecture::ParameterServer,
            total_batch: m,
            phi,
            times,
            threshold: 0.2,
            tw_grid: default_tw_grid(),
        }
    }

    /// Every candidate evaluated independently, straight from the formulas.
    fn brute_force(input: &DecisionInput) -> (SyncMode, f64) {
        let n = input.times.len() as f64;
        let m = input.total_batch;
        let mut sorted = input.times.clone();
        sorted.sort_by(f64::total_cmp);
        let mut best: Option<(SyncMode, f64)> = None;
        let mut consider = |mode: SyncMode, t: f64| {
            let better = match &best {
                None => true,
                Some((_, bt)) => t < *bt,
            };
            if better {
                best = Some((mode, t));
            }
        };
        // larger x first so that ties keep the more synchronous mode
        for x in (1..=input.times.len()).rev() {
            let t = (1.0 + input.phi / (x as f64 * m / n)) * sorted[x - 1];
            consider(SyncMode::StaticX { x }, t);
        }
        let partition = cluster_by_time(&input.times, 0.2);
        let cost = |c: &crate::model::Cluster| (1.0 + input.phi / (c.size() as f64 * m / n)) * c.max_time;
        let t = match partition.clusters.as_slice() {
            // one cluster is the static estimate itself, not 1/(1/x)
            [only] => cost(only),
            cs => 1.0 / cs.iter().map(|c| 1.0 / cost(c)).sum::<f64>(),
        };
        consider(SyncMode::DynamicX { partition }, t);
        best.unwrap()
    }

    #[test]
    fn equal_times_select_ssgd() {
        let c = select_mode_heuristic(&ps(vec![0.5; 8], 1024.0, 512.0)).unwrap();
        assert_eq!(c.mode, SyncMode::StaticX { x: 8 });
    }

    #[test]
    fn one_straggler_static_seven_beats_eight() {
        let mut times = vec![0.5; 7];
        times.push(5.0);
        let input = ps(times, 1024.0, 512.0);
        let ranked = rank_candidates(&input).unwrap();
        let t = |x| ranked.iter().find(|c| c.mode == SyncMode::StaticX { x }).unwrap().est_time;
        assert!(t(7) < t(8));
        assert!(((t(7) - (1.0 + 512.0 / 896.0) * 0.5) / t(7)).abs() < 1e-12);
        assert!(((t(8) - 7.5) / 7.5).abs() < 1e-12);
        // the clustered mode beats every static order here
        let (mode, est) = brute_force(&input);
        assert!(matches!(mode, SyncMode::DynamicX { .. }));
        assert_eq!(ranked[0].mode, mode);
        assert_eq!(ranked[0].est_time, est);
    }

    #[test]
    fn bimodal_instance_picks_dynamic() {
        let times = vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0];
        let input = ps(times, 1024.0, 256.0);
        let best = select_mode_heuristic(&input).unwrap();
        let expected = ClusterPartition {
            clusters: vec![
                Cluster { workers: vec![0, 1, 2, 3], max_time: 1.0 },
                Cluster { workers: vec![4, 5, 6, 7], max_time: 3.0 },
            ],
        };
        assert_eq!(best.mode, SyncMode::DynamicX { partition: expected });
        for c in rank_candidates(&input).unwrap().iter().skip(1) {
            assert!(c.est_time > best.est_time);
        }
    }

    #[test]
    fn allreduce_candidates() {
        let times = vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.65, 0.95];
        let input = DecisionInput { architecture: Architecture::AllReduce, ..ps(times, 1024.0, 512.0) };
        let ranked = rank_candidates(&input).unwrap();
        // x = 0 plus two stragglers over seven waits each
        assert_eq!(ranked.len(), 1 + 2 * 7);
        let best = &ranked[0];
        for c in &ranked {
            assert!(best.est_time <= c.est_time);
        }
        assert!(matches!(best.mode, SyncMode::ArRemoval { .. }));
    }

    #[test]
    fn learning_rate_examples() {
        assert_eq!(scale_learning_rate(0.1, 8, 8), 0.1);
        assert_eq!(scale_learning_rate(0.1, 4, 8), 0.05);
        let p = ClusterPartition {
            clusters: vec![
                Cluster { workers: vec![0, 1, 2], max_time: 1.0 },
                Cluster { workers: vec![3], max_time: 2.0 },
            ],
        };
        let r = scale_learning_rate_per_cluster(0.1, &p, 4);
        assert!((r[0] - 0.075).abs() < 1e-15 && (r[1] - 0.025).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            times in prop::collection::vec(0.05f64..5.0, 2..16),
            per in 1.0f64..256.0,
            phi in 0.0f64..4096.0,
        ) {
            let m = per * times.len() as f64;
            let input = ps(times, m, phi);
            let got = select_mode_heuristic(&input).unwrap();
            let (mode, est) = brute_force(&input);
            prop_assert_eq!(got.est_time, est);
            prop_assert_eq!(got.mode, mode);
        }

        #[test]
        fn equal_times_always_ssgd(
            n in 2usize..64,
            t in 0.01f64..100.0,
            per in 1.0f64..1024.0,
            phi in 1e-6f64..1e5,
        ) {
            let m = per * n as f64;
            let c = select_mode_heuristic(&ps(vec![t; n], m, phi)).unwrap();
            prop_assert_eq!(c.mode, SyncMode::StaticX { x: n });
        }

        #[test]
        fn scaling_composes(r in 1e-4f64..1.0, y1 in 1usize..16, y2 in 1usize..16) {
            let n = 16;
            let once = scale_learning_rate(r, y1, n);
            let twice = scale_learning_rate(once, y2, n);
            prop_assert!((once / r - y1 as f64 / n as f64).abs() < 1e-15);
            prop_assert!((twice / r - (y1 * y2) as f64 / (n * n) as f64).abs() < 1e-15);
        }
    }
}
