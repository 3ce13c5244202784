//! Contended CPU and bandwidth shares, and the mapping between shares and
//! iteration phase durations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Cpu,
    Bandwidth,
}

/// Demands competing for one resource pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSet {
    pub entries: Vec<(usize, f64)>,
    pub capacity: f64,
}

impl DemandSet {
    pub fn new(capacity: f64) -> Self {
        Self { entries: Vec::new(), capacity }
    }

    pub fn push(&mut self, task: usize, demand: f64) {
        self.entries.push((task, demand));
    }
}

/// Max-min fair (water-filling) shares, returned in entry order.
pub fn maxmin_allocate(demands: &DemandSet) -> Vec<f64> {
    let n = demands.entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| demands.entries[a].1.total_cmp(&demands.entries[b].1));
    let mut shares = vec![0.0; n];
    let mut left = demands.capacity.max(0.0);
    for (k, &i) in order.iter().enumerate() {
        let fair = left / (n - k) as f64;
        let want = demands.entries[i].1.max(0.0);
        let got = want.min(fair);
        shares[i] = got;
        left -= got;
    }
    shares
}

/// A demand that must pass through one or more capacity-limited links.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDemand {
    pub demand: f64,
    pub links: Vec<usize>,
}

/// Max-min fair rates for flows sharing several links (progressive filling).
/// A flow listing a link twice counts it once.
pub fn maxmin_allocate_flows(flows: &[FlowDemand], capacities: &[f64]) -> Vec<f64> {
    let n = flows.len();
    let links: Vec<Vec<usize>> = flows
        .iter()
        .map(|f| {
            let mut l = f.links.clone();
            l.sort_unstable();
            l.dedup();
            l
        })
        .collect();
    let mut rate = vec![0.0; n];
    let mut active: Vec<bool> = flows.iter().map(|f| f.demand > 0.0).collect();
    // Nothing but its own demand bounds a flow that crosses no link.
    for i in 0..n {
        if active[i] && links[i].is_empty() {
            rate[i] = flows[i].demand;
            active[i] = false;
        }
    }
    let mut spare: Vec<f64> = capacities.iter().map(|c| c.max(0.0)).collect();

    loop {
        let mut users = vec![0usize; capacities.len()];
        for (i, l) in links.iter().enumerate() {
            if active[i] {
                for &k in l {
                    users[k] += 1;
                }
            }
        }
        if users.iter().all(|&u| u == 0) {
            break;
        }
        let mut step = f64::INFINITY;
        for (k, &u) in users.iter().enumerate() {
            if u > 0 {
                step = step.min(spare[k] / u as f64);
            }
        }
        for i in 0..n {
            if active[i] {
                step = step.min(flows[i].demand - rate[i]);
            }
        }
        let step = step.max(0.0);
        for i in 0..n {
            if active[i] {
                rate[i] += step;
                for &k in &links[i] {
                    spare[k] -= step;
                }
            }
        }
        let mut froze = false;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let saturated = links[i].iter().any(|&k| spare[k] <= 1e-12 * capacities[k].abs().max(1.0));
            if saturated || rate[i] >= flows[i].demand {
                active[i] = false;
                froze = true;
            }
        }
        debug_assert!(froze, "progressive filling made no progress");
        if !froze {
            break;
        }
    }
    rate
}

/// Durations of the three phases of one worker iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseBreakdown {
    pub preproc: f64,
    pub compute: f64,
    pub comm: f64,
}

impl PhaseBreakdown {
    pub fn total(&self) -> f64 {
        self.preproc + self.compute + self.comm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum PhaseError {
    #[error("task starved of {0:?}: work remains but its share is zero")]
    Starved(ResourceKind),
    #[error("target {target}s is not above the fixed GPU time {gpu}s")]
    Infeasible { target: f64, gpu: f64 },
}

/// Phase durations for a worker holding the given shares.
pub fn phase_durations(
    cpu_share: f64,
    bw_share: f64,
    profile: &ModelProfile,
    comm_bytes: f64,
) -> Result<PhaseBreakdown, PhaseError> {
    let preproc = divide(profile.preproc_work, cpu_share).ok_or(PhaseError::Starved(ResourceKind::Cpu))?;
    let comm = divide(comm_bytes, bw_share).ok_or(PhaseError::Starved(ResourceKind::Bandwidth))?;
    Ok(PhaseBreakdown { preproc, compute: profile.gpu_compute_time, comm })
}

fn divide(work: f64, share: f64) -> Option<f64> {
    if work <= 0.0 {
        Some(0.0)
    } else if share > 0.0 && share.is_finite() {
        Some(work / share)
    } else {
        None
    }
}

/// Phase durations when the worker gets exactly what it asks for.
pub fn uncontended_phases(profile: &ModelProfile, comm_bytes: f64) -> PhaseBreakdown {
    PhaseBreakdown {
        preproc: profile.preproc_work / profile.worker_cpu_demand,
        compute: profile.gpu_compute_time,
        comm: comm_bytes / profile.worker_bw_demand,
    }
}

/// Smallest `(cpu_share, bw_share)` that makes an iteration take exactly
/// `target_total`. The time above the GPU phase is split between
/// pre-processing and communication in proportion to their uncontended
/// durations. A phase with no work gets a zero share.
pub fn invert_phase(target_total: f64, profile: &ModelProfile, comm_bytes: f64) -> Result<(f64, f64), PhaseError> {
    let gpu = profile.gpu_compute_time;
    if target_total.is_nan() || target_total <= gpu {
        return Err(PhaseError::Infeasible { target: target_total, gpu });
    }
    let nominal = uncontended_phases(profile, comm_bytes);
    let variable = nominal.preproc + nominal.comm;
    if variable <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let stretch = (target_total - gpu) / variable;
    let cpu = if profile.preproc_work > 0.0 { profile.preproc_work / (nominal.preproc * stretch) } else { 0.0 };
    let bw = if comm_bytes > 0.0 { comm_bytes / (nominal.comm * stretch) } else { 0.0 };
    Ok((cpu, bw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::profile;
    use proptest::prelude::*;

    fn set(demands: &[f64], cap: f64) -> DemandSet {
        DemandSet { entries: demands.iter().copied().enumerate().collect(), capacity: cap }
    }

    /// Water level found by bisection: every task gets min(demand, level).
    fn level_oracle(demands: &[f64], cap: f64) -> Vec<f64> {
        let total: f64 = demands.iter().sum();
        if total <= cap {
            return demands.to_vec();
        }
        let (mut lo, mut hi) = (0.0f64, demands.iter().cloned().fold(0.0, f64::max));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let used: f64 = demands.iter().map(|d| d.min(mid)).sum();
            if used > cap {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        demands.iter().map(|d| d.min(lo)).collect()
    }

    #[test]
    fn maxmin_examples() {
        assert_eq!(maxmin_allocate(&set(&[0.5, 0.5], 2.0)), vec![0.5, 0.5]);
        assert_eq!(maxmin_allocate(&set(&[2.0, 2.0], 2.0)), vec![1.0, 1.0]);
        let oracle = level_oracle(&[0.5, 3.0], 2.0);
        assert!((oracle[1] - 1.5).abs() < 1e-12);
        assert_eq!(maxmin_allocate(&set(&[0.5, 3.0], 2.0)), vec![0.5, 1.5]);
    }

    #[test]
    fn flows_reduce_to_single_link() {
        let flows: Vec<_> = [0.5, 3.0].iter().map(|&d| FlowDemand { demand: d, links: vec![0] }).collect();
        let r = maxmin_allocate_flows(&flows, &[2.0]);
        assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn flows_bottleneck_on_shared_link() {
        // Two flows share link 1 (cap 1); a third uses only link 0 (cap 10)
        // alongside the first.
        let flows = vec![
            FlowDemand { demand: 10.0, links: vec![0, 1] },
            FlowDemand { demand: 10.0, links: vec![1] },
            FlowDemand { demand: 10.0, links: vec![0] },
        ];
        let r = maxmin_allocate_flows(&flows, &[10.0, 1.0]);
        assert!((r[0] - 0.5).abs() < 1e-12);
        assert!((r[1] - 0.5).abs() < 1e-12);
        assert!((r[2] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn phase_examples() {
        let mut p = profile("m");
        p.preproc_work = 1.0;
        p.gpu_compute_time = 0.3;
        let ph = phase_durations(2.0, 1e9, &p, 1e8).unwrap();
        assert_eq!((ph.preproc, ph.compute, ph.comm), (0.5, 0.3, 0.1));

        let nominal = uncontended_phases(&p, 1e8);
        let at_demand = phase_durations(p.worker_cpu_demand, p.worker_bw_demand, &p, 1e8).unwrap();
        assert_eq!(at_demand, nominal);

        let half = phase_durations(2.0, 5e8, &p, 1e8).unwrap();
        assert_eq!(half.comm, 2.0 * ph.comm);
    }

    #[test]
    fn zero_share_is_starved() {
        let p = profile("m");
        assert_eq!(phase_durations(0.0, 1e9, &p, 1e8), Err(PhaseError::Starved(ResourceKind::Cpu)));
        assert_eq!(phase_durations(1.0, 0.0, &p, 1e8), Err(PhaseError::Starved(ResourceKind::Bandwidth)));
        // no work, no starvation
        assert_eq!(phase_durations(1.0, 0.0, &p, 0.0).unwrap().comm, 0.0);
    }

    #[test]
    fn invert_examples() {
        let p = profile("m");
        let bytes = p.default_comm_bytes();
        let nominal = uncontended_phases(&p, bytes).total();
        let (cpu, bw) = invert_phase(nominal, &p, bytes).unwrap();
        assert!((cpu - p.worker_cpu_demand).abs() < 1e-12);
        assert!((bw - p.worker_bw_demand).abs() < 1e-3);

        let mut no_gpu = p.clone();
        no_gpu.gpu_compute_time = 1e-300;
        let nominal = uncontended_phases(&no_gpu, bytes).total();
        let (cpu, bw) = invert_phase(2.0 * nominal, &no_gpu, bytes).unwrap();
        assert!((cpu - p.worker_cpu_demand / 2.0).abs() < 1e-12);
        assert!((bw / (p.worker_bw_demand / 2.0) - 1.0).abs() < 1e-12);

        assert!(matches!(invert_phase(0.2, &p, bytes), Err(PhaseError::Infeasible { .. })));
    }

    proptest! {
        #[test]
        fn maxmin_matches_level_oracle(
            demands in prop::collection::vec(0.0f64..10.0, 1..=6),
            cap in 0.1f64..20.0,
        ) {
            let got = maxmin_allocate(&set(&demands, cap));
            let want = level_oracle(&demands, cap);
            let sum: f64 = got.iter().sum();
            prop_assert!(sum <= cap * (1.0 + 1e-12));
            for (g, (w, d)) in got.iter().zip(want.iter().zip(&demands)) {
                prop_assert!(*g <= *d + 1e-12);
                prop_assert!((g - w).abs() < 1e-9, "{got:?} vs {want:?}");
            }
            // Pareto: if anyone is below demand, the pool is exhausted.
            if got.iter().zip(&demands).any(|(g, d)| g + 1e-9 < *d) {
                prop_assert!((sum - cap).abs() < 1e-9);
            }
        }

        #[test]
        fn maxmin_order_independent(
            demands in prop::collection::vec(0.0f64..10.0, 1..=6),
            cap in 0.1f64..20.0,
            rot in 0usize..6,
        ) {
            let got = maxmin_allocate(&set(&demands, cap));
            let mut rotated = demands.clone();
            let k = rot % demands.len();
            rotated.rotate_left(k);
            let mut got_rot = maxmin_allocate(&set(&rotated, cap));
            got_rot.rotate_right(k);
            for (a, b) in got.iter().zip(&got_rot) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn invert_then_forward_is_identity(
            preproc in 0.0f64..3.0,
            gpu in 0.01f64..1.0,
            bytes in 0.0f64..1e9,
            stretch in 0.2f64..10.0,
        ) {
            let mut p = profile("m");
            p.preproc_work = preproc;
            p.gpu_compute_time = gpu;
            prop_assume!(preproc > 0.0 || bytes > 0.0);
            let nominal = uncontended_phases(&p, bytes);
            let target = gpu + stretch * (nominal.preproc + nominal.comm);
            prop_assume!(target > gpu);
            let (cpu, bw) = invert_phase(target, &p, bytes).unwrap();
            let total = phase_durations(cpu, bw, &p, bytes).unwrap().total();
            prop_assert!(((total - target) / target).abs() < 1e-9);
        }
    }
}
