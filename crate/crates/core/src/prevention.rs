//! Straggler prevention: moving CPU and bandwidth toward a straggler from
//! co-located tasks, PS placement, parent choice for removed all-reduce
//! workers, and latency-layered communication trees.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decision::ModeCandidate;
use crate::model::{ModelProfile, SyncMode};
use crate::resource::{invert_phase, phase_durations};

/// Updates over which a job's recent progress gain is measured.
pub const DEFAULT_GAIN_WINDOW: usize = 50;
pub const DEFAULT_BRANCHING: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreventionError {
    #[error("no candidate tasks to take resources from")]
    NoCandidates,
    #[error("sensitivity times gain must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("no server can host the task")]
    NoFeasibleServer,
    #[error("branching factor must be at least 1")]
    ZeroBranching,
}

/// One worker's current allocation, as the planner sees it.
#[derive(Debug, Clone)]
pub struct TaskShare<'a> {
    pub job: usize,
    pub worker: usize,
    pub server: usize,
    pub cpu: f64,
    pub bw: f64,
    pub profile: &'a ModelProfile,
    pub comm_bytes: f64,
    /// The job's recent progress gain.
    pub progress_gain: f64,
    /// Most `(cpu, bw)` the task can use, e.g. under a throttle.
    pub cap: (f64, f64),
}

impl TaskShare<'_> {
    /// Iteration time at the current shares; infinite when starved.
    pub fn time(&self) -> f64 {
        self.time_with(self.cpu, self.bw)
    }

    pub fn time_with(&self, cpu: f64, bw: f64) -> f64 {
        phase_durations(cpu, bw, self.profile, self.comm_bytes).map(|p| p.total()).unwrap_or(f64::INFINITY)
    }
}

/// Resources a worker could give up and still finish by `target`.
/// Negative differences (the worker already needs more than it has of one
/// resource) are reported as zero.
pub fn slack_at(task: &TaskShare<'_>, target: f64) -> (f64, f64) {
    if task.time() >= target {
        return (0.0, 0.0);
    }
    match invert_phase(target, task.profile, task.comm_bytes) {
        Ok((cpu, bw)) => ((task.cpu - cpu).max(0.0), (task.bw - bw).max(0.0)),
        Err(_) => (0.0, 0.0),
    }
}

/// Harvestable `(cpu, bw)` per member of `group`, each slowed to the group's
/// slowest predicted time.
pub fn slack_from_fast_peers(group: &[TaskShare<'_>]) -> Vec<(f64, f64)> {
    let target = group.iter().map(TaskShare::time).fold(0.0, f64::max);
    group.iter().map(|t| slack_at(t, target)).collect()
}

/// Split `shortfall` over tasks in inverse proportion to
/// sensitivity × recent gain.
pub fn sensitivity_weighted_split(shortfall: f64, weights: &[f64]) -> Result<Vec<f64>, PreventionError> {
    if weights.is_empty() {
        return Err(PreventionError::NoCandidates);
    }
    if let Some(&w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(PreventionError::NonPositiveWeight(w));
    }
    let inv: Vec<f64> = weights.iter().map(|w| 1.0 / w).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|i| shortfall * i / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Accepted,
    /// The best mode could not be supported; this lower-ranked one can.
    Fallback(SyncMode),
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub job: usize,
    pub worker: usize,
    pub server: usize,
    pub cpu: f64,
    pub bw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReallocationPlan {
    /// `(job, worker)` of the straggler being helped.
    pub beneficiary: (usize, usize),
    pub deltas: Vec<TaskDelta>,
    pub donors: Vec<(usize, usize)>,
    pub verdict: Verdict,
    /// Summed job iteration times of the impacted jobs with and without the
    /// plan. Both zero when nothing had to move.
    pub s_with: f64,
    pub s_without: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanOptions {
    /// Also reject plans that push a stage-2 donor past the beneficiary's
    /// target time.
    pub strict: bool,
}

/// Try each ranked candidate in turn: find the shares the beneficiary needs
/// to meet `target(candidate)`, cover the shortfall first from co-located
/// workers' slack within their own jobs, then from other jobs' co-located
/// workers weighted by sensitivity and gain, and keep the plan only if the
/// impacted jobs' summed iteration time drops.
///
/// `tasks` must hold every worker of every job that shares the
/// beneficiary's server, so job iteration times (slowest worker) are known.
pub fn plan_reallocation(
    tasks: &[TaskShare<'_>],
    beneficiary: usize,
    candidates: &[ModeCandidate],
    target: impl Fn(&ModeCandidate) -> f64,
    opts: PlanOptions,
) -> ReallocationPlan {
    let b = &tasks[beneficiary];
    let mut rejected = ReallocationPlan {
        beneficiary: (b.job, b.worker),
        deltas: Vec::new(),
        donors: Vec::new(),
        verdict: Verdict::Rejected,
        s_with: 0.0,
        s_without: 0.0,
    };
    for (rank, cand) in candidates.iter().enumerate() {
        let Some(mut plan) = plan_for_target(tasks, beneficiary, target(cand), opts) else {
            continue;
        };
        if plan.deltas.is_empty() || plan.s_with < plan.s_without {
            plan.verdict = if rank == 0 { Verdict::Accepted } else { Verdict::Fallback(cand.mode.clone()) };
            return plan;
        }
        rejected.s_with = plan.s_with;
        rejected.s_without = plan.s_without;
    }
    rejected
}

fn plan_for_target(
    tasks: &[TaskShare<'_>],
    beneficiary: usize,
    target: f64,
    opts: PlanOptions,
) -> Option<ReallocationPlan> {
    let b = &tasks[beneficiary];
    let mut plan = ReallocationPlan {
        beneficiary: (b.job, b.worker),
        deltas: Vec::new(),
        donors: Vec::new(),
        verdict: Verdict::Rejected,
        s_with: 0.0,
        s_without: 0.0,
    };
    if b.time() <= target {
        return Some(plan);
    }
    let (need_cpu, need_bw) = invert_phase(target, b.profile, b.comm_bytes).ok()?;
    if need_cpu > b.cap.0 * (1.0 + 1e-12) || need_bw > b.cap.1 * (1.0 + 1e-12) {
        return None;
    }
    let shortfall = [(need_cpu - b.cpu).max(0.0), (need_bw - b.bw).max(0.0)];

    let colocated: Vec<usize> = (0..tasks.len()).filter(|&i| i != beneficiary && tasks[i].server == b.server).collect();
    let job_max = |job: usize| tasks.iter().filter(|t| t.job == job).map(TaskShare::time).fold(0.0, f64::max);

    // Stage 1: slack inside each donor's own job, taken proportionally.
    let slack: Vec<[f64; 2]> = colocated
        .iter()
        .map(|&i| {
            let t = &tasks[i];
            let mut s = slack_at(t, job_max(t.job));
            if t.job == b.job {
                // peers of the straggler only need to keep up with its new time
                s = slack_at(t, target.max(peer_max(tasks, beneficiary, i)));
            }
            [s.0, s.1]
        })
        .collect();
    let mut take = vec![[0.0f64; 2]; colocated.len()];
    let mut remainder = shortfall;
    for k in 0..2 {
        let total: f64 = slack.iter().map(|s| s[k]).sum();
        if total <= 0.0 || shortfall[k] <= 0.0 {
            continue;
        }
        let frac = (shortfall[k] / total).min(1.0);
        for (t, s) in take.iter_mut().zip(&slack) {
            t[k] = s[k] * frac;
        }
        remainder[k] = (shortfall[k] - total).max(0.0);
    }

    // Stage 2: the rest from other jobs, least sensitive and least
    // productive first.
    let others: Vec<usize> = (0..colocated.len()).filter(|&c| tasks[colocated[c]].job != b.job).collect();
    for k in 0..2 {
        if remainder[k] <= 0.0 {
            continue;
        }
        let weights: Vec<f64> = others
            .iter()
            .map(|&c| {
                let t = &tasks[colocated[c]];
                let s = if k == 0 { &t.profile.sensitivity_cpu } else { &t.profile.sensitivity_bw };
                s.sensitivity(crate::model::DEFAULT_SENSITIVITY_EPSILON) * t.progress_gain.max(f64::MIN_POSITIVE)
            })
            .collect();
        let cut = sensitivity_weighted_split(remainder[k], &weights).ok()?;
        for (&c, r) in others.iter().zip(cut) {
            take[c][k] += r;
            let held = if k == 0 { tasks[colocated[c]].cpu } else { tasks[colocated[c]].bw };
            if take[c][k] > held * (1.0 + 1e-12) {
                return None;
            }
        }
    }

    // Evaluate.
    let mut new_share: Vec<(f64, f64)> = tasks.iter().map(|t| (t.cpu, t.bw)).collect();
    new_share[beneficiary] = (b.cpu + shortfall[0], b.bw + shortfall[1]);
    let mut impacted = vec![b.job];
    for (c, &i) in colocated.iter().enumerate() {
        let [dc, db] = take[c];
        if dc <= 0.0 && db <= 0.0 {
            continue;
        }
        let t = &tasks[i];
        new_share[i] = ((t.cpu - dc).max(0.0), (t.bw - db).max(0.0));
        plan.donors.push((t.job, t.worker));
        plan.deltas.push(TaskDelta { job: t.job, worker: t.worker, server: t.server, cpu: -dc, bw: -db });
        if !impacted.contains(&t.job) {
            impacted.push(t.job);
        }
        if opts.strict && t.job != b.job && t.time_with(new_share[i].0, new_share[i].1) > target {
            return None;
        }
    }
    plan.deltas
        .insert(0, TaskDelta { job: b.job, worker: b.worker, server: b.server, cpu: shortfall[0], bw: shortfall[1] });
    for job in impacted {
        let (mut with, mut without) = (0.0f64, 0.0f64);
        for (i, t) in tasks.iter().enumerate().filter(|(_, t)| t.job == job) {
            without = without.max(t.time());
            with = with.max(t.time_with(new_share[i].0, new_share[i].1));
        }
        plan.s_with += with;
        plan.s_without += without;
    }
    Some(plan)
}

/// Slowest time among the straggler's job peers other than `beneficiary` and `me`.
fn peer_max(tasks: &[TaskShare<'_>], beneficiary: usize, me: usize) -> f64 {
    let job = tasks[beneficiary].job;
    tasks
        .iter()
        .enumerate()
        .filter(|(i, t)| t.job == job && *i != beneficiary && *i != me)
        .map(|(_, t)| t.time())
        .fold(0.0, f64::max)
}

/// Recent progress gain: the credit of the last `window` updates.
pub fn progress_gain(credits: &[f64], window: usize) -> f64 {
    credits[credits.len().saturating_sub(window)..].iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerLoad {
    pub id: usize,
    pub cpu_free: f64,
    pub bw_free: f64,
    pub cpu_capacity: f64,
    pub bw_capacity: f64,
    pub ps_count: usize,
}

impl ServerLoad {
    fn headroom(&self) -> f64 {
        self.cpu_free / self.cpu_capacity + self.bw_free / self.bw_capacity
    }
}

/// Server for a new PS: fewest PSs among those with room for its demand,
/// then most spare capacity, then lowest id.
pub fn place_high_load_task(servers: &[ServerLoad], cpu: f64, bw: f64) -> Result<usize, PreventionError> {
    servers
        .iter()
        .filter(|s| s.cpu_free >= cpu && s.bw_free >= bw)
        .min_by(|a, b| a.ps_count.cmp(&b.ps_count).then(b.headroom().total_cmp(&a.headroom())).then(a.id.cmp(&b.id)))
        .map(|s| s.id)
        .ok_or(PreventionError::NoFeasibleServer)
}

/// Parent for a worker removed from the ring: among the ring workers in the
/// top bandwidth quartile to it, the one with fewest children, then highest
/// bandwidth, then lowest id. `bandwidth[w]` is the bandwidth from the child
/// to `w`; `children[w]` its current child count.
pub fn assign_child_parent(ring: &[usize], bandwidth: &[f64], children: &[usize]) -> Option<usize> {
    let mut by_bw: Vec<f64> = ring.iter().map(|&w| bandwidth[w]).collect();
    by_bw.sort_by(|a, b| b.total_cmp(a));
    let cut = *by_bw.get(ring.len().div_ceil(4).max(1) - 1)?;
    ring.iter()
        .copied()
        .filter(|&w| bandwidth[w] >= cut)
        .min_by(|&a, &b| children[a].cmp(&children[b]).then(bandwidth[b].total_cmp(&bandwidth[a])).then(a.cmp(&b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub worker: usize,
    /// `None` is the root.
    pub parent: Option<usize>,
    pub depth: usize,
    pub edge_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommTree {
    /// Breadth-first order.
    pub nodes: Vec<TreeNode>,
}

impl CommTree {
    pub fn node(&self, worker: usize) -> Option<&TreeNode> {
        self.nodes.iter().find(|n| n.worker == worker)
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// Layered tree under a root: workers sorted by latency to the root fill
/// the tree breadth-first, `branching` children per node, so slower links
/// sit deeper. `latency(parent, child)` annotates edges; `None` is the root.
pub fn build_comm_tree(
    root_latency: &[(usize, f64)],
    branching: usize,
    latency: impl Fn(Option<usize>, usize) -> f64,
) -> Result<CommTree, PreventionError> {
    if branching == 0 {
        return Err(PreventionError::ZeroBranching);
    }
    let mut order = root_latency.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut nodes: Vec<TreeNode> = Vec::with_capacity(order.len());
    for (i, &(worker, _)) in order.iter().enumerate() {
        // the root takes slots 0..b, node k takes slots b(k+1)..b(k+2)
        let (parent, depth) = if i < branching {
            (None, 1)
        } else {
            let p = &nodes[i / branching - 1];
            (Some(p.worker), p.depth + 1)
        };
        nodes.push(TreeNode { worker, parent, depth, edge_latency: latency(parent, worker) });
    }
    Ok(CommTree { nodes })
}
