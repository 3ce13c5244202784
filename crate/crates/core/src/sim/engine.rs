use std::collections::{BTreeMap, VecDeque};

use super::ledger::{apply_update_progress, ProgressLedger};
use super::metrics::{IterationRecord, JobMetrics, RunMetrics, Tally, UpdateRecord};
use super::perturb::{PerturbKind, Resolved, Window};
use super::{SimConfig, SimError};
use crate::decision::{BaselineState, ModeRegressor, RegressorDataset};
use crate::model::{Architecture, ModeError, ModelProfile, Policy, SyncMode, World};
use crate::predictor::HistoryWindow;
use crate::prevention::{assign_child_parent, place_high_load_task, ServerLoad};
use crate::resource::{maxmin_allocate, maxmin_allocate_flows, DemandSet, FlowDemand};

/// Completions closer together than this are processed as one instant.
const SIMULTANEOUS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Owner {
    Worker { job: usize, worker: usize },
    Ps { job: usize, ps: usize },
    Job(usize),
}

impl Owner {
    fn job(self) -> usize {
        match self {
            Owner::Worker { job, .. } | Owner::Ps { job, .. } | Owner::Job(job) => job,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum What {
    Preproc,
    Compute,
    /// Gradient transfer to the PS shards or to a parent.
    Push,
    ParentWait,
    Ring,
    Update,
    Poll,
    Pause,
}

#[derive(Debug, Clone)]
pub(super) enum Kind {
    Cpu { server: usize, demand: f64 },
    Flow { links: Vec<usize>, demand: f64 },
    Timer,
}

#[derive(Debug, Clone)]
pub(super) struct Act {
    owner: Owner,
    what: What,
    kind: Kind,
    remaining: f64,
    rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Phase {
    Idle,
    Preproc,
    Compute,
    Push,
    ParentWait,
    Ready,
    Ring,
    /// Report delivered, waiting for it to be folded into an update.
    Waiting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Role {
    Ps,
    Ring,
    Child { parent: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(super) struct Report {
    pub worker: usize,
    pub batch: f64,
    /// Updates applied when the worker last received parameters.
    pub version: u64,
    pub at: f64,
}

#[derive(Debug, Clone)]
pub(super) struct WorkerState {
    pub server: usize,
    pub batch: u32,
    pub phase: Phase,
    pub role: Role,
    pub iteration: u64,
    pub iter_start: f64,
    pub phase_start: f64,
    /// Time in own phases this iteration.
    pub busy: f64,
    pub preproc_time: f64,
    pub comm_time: f64,
    pub pending_flows: usize,
    pub version: u64,
    pub history: HistoryWindow,
    /// Forecast shares and predicted time for the current iteration.
    pub forecast: Option<(f64, f64)>,
    pub prediction: Option<f64>,
    /// `(made_at, predicted time)`, oldest first.
    pub pred_log: VecDeque<(f64, f64)>,
    pub predicted_label: Option<bool>,
    pub rule_label: bool,
    pub last_realized: Option<f64>,
    pub straggling_since: Option<f64>,
}

#[derive(Debug, Clone)]
pub(super) struct Pool {
    pub members: Vec<usize>,
    pub need: usize,
    pub reports: VecDeque<Report>,
}

#[derive(Debug, Clone)]
pub(super) struct Round {
    pub ring: Vec<usize>,
    pub ready: usize,
    pub flows: usize,
    pub started: bool,
    pub collected: Vec<Report>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Status {
    Pending,
    Queued,
    Running,
    Done,
}

#[derive(Debug, Clone)]
pub(super) struct JobState {
    pub id: String,
    pub policy: Policy,
    pub arch: Architecture,
    pub submit: f64,
    pub profile: ModelProfile,
    pub nominal_batch: u32,
    pub total_batch: f64,
    pub comm_bytes: f64,
    pub learning_rate: f64,
    pub status: Status,
    pub workers: Vec<WorkerState>,
    pub ps_servers: Vec<usize>,
    pub mode: SyncMode,
    /// Workers outside the ring under all-reduce removal.
    pub removed: Vec<usize>,
    pub pending_mode: Option<(SyncMode, Vec<usize>)>,
    pub paused_until: f64,
    pub pools: Vec<Pool>,
    pub updating: Option<(Vec<Report>, usize)>,
    pub round: Option<Round>,
    /// Child reports at their parents: `(parent, report)`.
    pub mailbox: Vec<(usize, Report)>,
    pub ledger: ProgressLedger,
    pub credits: VecDeque<f64>,
    pub tta: Option<f64>,
    pub jct: Option<f64>,
    pub baseline: Option<BaselineState>,
    pub last_stragglers: Vec<usize>,
    /// Effective predictions behind the last decision.
    pub decided_times: Vec<f64>,
    /// Running a mode fixed by the configuration.
    pub pinned: bool,
    pub decisions: u64,
    pub overhead: f64,
    pub straggler_iterations: u64,
    pub predictor: Tally,
    pub rule: Tally,
}

#[derive(Debug, Clone)]
pub(super) struct ServerState {
    pub gpu_free: u32,
    pub cpu_reserved: f64,
    pub bw_reserved: f64,
    pub ps_count: usize,
    pub cpu_mult: f64,
    pub bw_mult: f64,
}

/// Donor caps per (job, worker): (planning job, cpu cap, bandwidth cap).
type PlanCaps = BTreeMap<(usize, usize), Vec<(usize, f64, f64)>>;

pub(super) struct Engine<'w> {
    pub world: &'w World,
    pub cfg: &'w SimConfig,
    pub seed: u64,
    pub now: f64,
    acts: BTreeMap<u64, Act>,
    next_act: u64,
    pub servers: Vec<ServerState>,
    pub jobs: Vec<JobState>,
    arrivals: Vec<usize>,
    next_arrival: usize,
    queue: VecDeque<usize>,
    windows: Vec<Window>,
    /// `(time, window, starts)` in time order.
    boundaries: Vec<(f64, usize, bool)>,
    next_boundary: usize,
    active: Vec<bool>,
    pub task_mult: BTreeMap<(usize, usize), (f64, f64)>,
    /// Reallocation caps on donors: `(job, worker) -> [(planner job, cpu, bw)]`.
    pub plan_caps: PlanCaps,
    pub datasets: BTreeMap<(Architecture, usize), RegressorDataset>,
    pub regressors: BTreeMap<(Architecture, usize), ModeRegressor>,
    pub trained_at: BTreeMap<(Architecture, usize), usize>,
    pub iterations: Vec<IterationRecord>,
    pub updates: Vec<UpdateRecord>,
}

impl<'w> Engine<'w> {
    pub fn new(world: &'w World, cfg: &'w SimConfig, windows: Vec<Window>, seed: u64) -> Result<Self, SimError> {
        let total_gpus: usize = world.servers().iter().map(|s| s.gpu_slots as usize).sum();
        let mut jobs = Vec::with_capacity(world.jobs().len());
        for spec in world.jobs() {
            if spec.num_workers > total_gpus {
                return Err(SimError::TooLarge {
                    job: spec.id.clone(),
                    needed: spec.num_workers,
                    available: total_gpus,
                });
            }
            let policy = cfg.policy.unwrap_or(spec.policy);
            let profile = world.model(&spec.model).expect("validated").clone();
            let batches = vec![spec.batch_per_worker; spec.num_workers];
            let pinned_mode = cfg.fixed_mode.as_ref().filter(|m| fits(spec.architecture, m));
            let pinned = pinned_mode.is_some();
            let (mode, baseline) = match (pinned_mode, policy) {
                (Some(m), _) => (m.clone(), None),
                (None, Policy::Star(_)) => (ssgd_mode(spec.architecture, spec.num_workers), None),
                (None, p) => {
                    let b = BaselineState::new(p, spec.architecture, batches, &cfg.baseline)
                        .map_err(|source| SimError::Policy { job: spec.id.clone(), source })?;
                    (b.mode.clone(), Some(b))
                }
            };
            let mode = with_tw(mode, cfg.fixed_tw);
            let mode_ok = if fits(spec.architecture, &mode) {
                mode.validate(spec.num_workers)
            } else {
                Err(ModeError::WrongArchitecture(spec.architecture))
            };
            mode_ok.map_err(|source| SimError::Mode { job: spec.id.clone(), source })?;
            let workers = (0..spec.num_workers)
                .map(|_| WorkerState {
                    server: 0,
                    batch: spec.batch_per_worker,
                    phase: Phase::Idle,
                    role: Role::Ps,
                    iteration: 0,
                    iter_start: 0.0,
                    phase_start: 0.0,
                    busy: 0.0,
                    preproc_time: 0.0,
                    comm_time: 0.0,
                    pending_flows: 0,
                    version: 0,
                    history: HistoryWindow::new(cfg.history.max(1)),
                    forecast: None,
                    prediction: None,
                    pred_log: VecDeque::new(),
                    predicted_label: None,
                    rule_label: false,
                    last_realized: None,
                    straggling_since: None,
                })
                .collect();
            jobs.push(JobState {
                id: spec.id.clone(),
                policy,
                arch: spec.architecture,
                submit: spec.submit_time,
                comm_bytes: profile.default_comm_bytes(),
                profile,
                nominal_batch: spec.batch_per_worker,
                total_batch: spec.total_batch(),
                learning_rate: spec.learning_rate,
                status: Status::Pending,
                workers,
                ps_servers: Vec::new(),
                mode,
                removed: Vec::new(),
                pending_mode: None,
                paused_until: f64::NEG_INFINITY,
                pools: Vec::new(),
                updating: None,
                round: None,
                mailbox: Vec::new(),
                ledger: ProgressLedger::default(),
                credits: VecDeque::new(),
                tta: None,
                jct: None,
                baseline,
                last_stragglers: Vec::new(),
                decided_times: Vec::new(),
                pinned,
                decisions: 0,
                overhead: 0.0,
                straggler_iterations: 0,
                predictor: Tally::default(),
                rule: Tally::default(),
            });
        }
        let mut arrivals: Vec<usize> = (0..jobs.len()).collect();
        arrivals.sort_by(|&a, &b| jobs[a].submit.total_cmp(&jobs[b].submit));
        let mut boundaries: Vec<(f64, usize, bool)> =
            windows.iter().enumerate().flat_map(|(i, w)| [(w.start, i, true), (w.end, i, false)]).collect();
        boundaries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(Self {
            world,
            cfg,
            seed,
            now: 0.0,
            acts: BTreeMap::new(),
            next_act: 0,
            servers: world
                .servers()
                .iter()
                .map(|s| ServerState {
                    gpu_free: s.gpu_slots,
                    cpu_reserved: 0.0,
                    bw_reserved: 0.0,
                    ps_count: 0,
                    cpu_mult: 1.0,
                    bw_mult: 1.0,
                })
                .collect(),
            jobs,
            arrivals,
            next_arrival: 0,
            queue: VecDeque::new(),
            active: vec![false; windows.len()],
            windows,
            boundaries,
            next_boundary: 0,
            task_mult: BTreeMap::new(),
            plan_caps: BTreeMap::new(),
            datasets: BTreeMap::new(),
            regressors: BTreeMap::new(),
            trained_at: BTreeMap::new(),
            iterations: Vec::new(),
            updates: Vec::new(),
        })
    }

    pub fn run(mut self) -> Result<RunMetrics, SimError> {
        let mut incomplete = false;
        loop {
            self.apply_boundaries();
            self.admit_arrivals();
            if self.jobs.iter().all(|j| j.status == Status::Done) {
                break;
            }
            self.allocate();
            let mut t_next = f64::INFINITY;
            for a in self.acts.values() {
                t_next = t_next.min(self.finish_time(a));
            }
            if let Some(&(t, _, _)) = self.boundaries.get(self.next_boundary) {
                t_next = t_next.min(t);
            }
            if let Some(&j) = self.arrivals.get(self.next_arrival) {
                t_next = t_next.min(self.jobs[j].submit);
            }
            if !t_next.is_finite() || t_next > self.cfg.horizon {
                // nothing can move, or we ran out of time
                incomplete = true;
                self.advance(self.cfg.horizon.min(t_next).max(self.now) - self.now);
                break;
            }
            let done: Vec<u64> = self
                .acts
                .iter()
                .filter(|(_, a)| self.finish_time(a) <= t_next + SIMULTANEOUS)
                .map(|(&id, _)| id)
                .collect();
            self.advance(t_next - self.now);
            for id in &done {
                if let Some(a) = self.acts.get_mut(id) {
                    a.remaining = 0.0;
                }
            }
            for id in done {
                if let Some(a) = self.acts.remove(&id) {
                    self.complete(a);
                }
            }
        }
        let end_time = self.now;
        let jobs = self
            .jobs
            .iter()
            .map(|j| JobMetrics {
                job_id: j.id.clone(),
                policy: j.policy,
                submit_time: j.submit,
                tta: j.tta,
                jct: j.jct,
                updates: j.ledger.updates,
                progress: j.ledger.progress,
                straggler_iterations: j.straggler_iterations,
                predictor: j.predictor,
                duration_rule: j.rule,
                decisions: j.decisions,
                decision_overhead: j.overhead,
                final_mode: j.mode.to_string(),
            })
            .collect();
        Ok(RunMetrics {
            seed: self.seed,
            jobs,
            iterations: self.iterations,
            updates: self.updates,
            incomplete,
            end_time,
        })
    }

    fn finish_time(&self, a: &Act) -> f64 {
        if a.remaining <= 0.0 {
            self.now
        } else if a.rate > 0.0 && a.remaining.is_finite() {
            self.now + a.remaining / a.rate
        } else {
            f64::INFINITY
        }
    }

    fn advance(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        for a in self.acts.values_mut() {
            if a.remaining.is_finite() {
                a.remaining = (a.remaining - a.rate * dt).max(0.0);
            }
        }
        self.now += dt;
    }

    // ---- perturbations and arrivals ----

    fn apply_boundaries(&mut self) {
        let mut changed = false;
        while let Some(&(t, w, starts)) = self.boundaries.get(self.next_boundary) {
            if t > self.now {
                break;
            }
            self.active[w] = starts;
            self.next_boundary += 1;
            changed = true;
        }
        if !changed {
            return;
        }
        for s in &mut self.servers {
            s.cpu_mult = 1.0;
            s.bw_mult = 1.0;
        }
        self.task_mult.clear();
        for (w, on) in self.windows.iter().zip(&self.active) {
            if !on {
                continue;
            }
            match w.target {
                Resolved::Server(s) => match w.kind {
                    PerturbKind::CpuThrottle => self.servers[s].cpu_mult *= w.fraction,
                    PerturbKind::BwThrottle => self.servers[s].bw_mult *= w.fraction,
                },
                Resolved::Task { job, worker } => {
                    let m = self.task_mult.entry((job, worker)).or_insert((1.0, 1.0));
                    match w.kind {
                        PerturbKind::CpuThrottle => m.0 *= w.fraction,
                        PerturbKind::BwThrottle => m.1 *= w.fraction,
                    }
                }
            }
        }
    }

    fn admit_arrivals(&mut self) {
        while let Some(&j) = self.arrivals.get(self.next_arrival) {
            if self.jobs[j].submit > self.now {
                break;
            }
            self.next_arrival += 1;
            self.jobs[j].status = Status::Queued;
            self.queue.push_back(j);
        }
        // first come, first served; a job that does not fit blocks later ones
        while let Some(&j) = self.queue.front() {
            if !self.try_place(j) {
                break;
            }
            self.queue.pop_front();
            self.start_job(j);
        }
    }

    fn try_place(&mut self, j: usize) -> bool {
        let n = self.jobs[j].workers.len();
        let free: usize = self.servers.iter().map(|s| s.gpu_free as usize).sum();
        if free < n {
            return false;
        }
        let p = self.jobs[j].profile.clone();
        for w in 0..n {
            // most free GPUs, lowest id on ties
            let s = (0..self.servers.len())
                .max_by(|&a, &b| self.servers[a].gpu_free.cmp(&self.servers[b].gpu_free).then(b.cmp(&a)))
                .expect("servers exist");
            self.servers[s].gpu_free -= 1;
            self.servers[s].cpu_reserved += p.worker_cpu_demand;
            self.servers[s].bw_reserved += p.worker_bw_demand;
            self.jobs[j].workers[w].server = s;
        }
        if self.jobs[j].arch == Architecture::ParameterServer {
            let shards = self.world.jobs()[j].num_ps.max(1);
            let cpu = p.ps_cpu_demand + p.busy_poll_cores;
            let bw = p.worker_bw_demand * n as f64 / shards as f64;
            let balanced = self.jobs[j].policy.is_star();
            for _ in 0..shards {
                let s = self.place_ps(cpu, bw, balanced);
                self.servers[s].ps_count += 1;
                self.servers[s].cpu_reserved += cpu;
                self.servers[s].bw_reserved += bw;
                self.jobs[j].ps_servers.push(s);
            }
        }
        true
    }

    fn place_ps(&self, cpu: f64, bw: f64, balanced: bool) -> usize {
        let loads: Vec<ServerLoad> = self
            .world
            .servers()
            .iter()
            .zip(&self.servers)
            .enumerate()
            .map(|(id, (spec, st))| ServerLoad {
                id,
                cpu_free: spec.cpu_capacity - st.cpu_reserved,
                bw_free: spec.bw_capacity - st.bw_reserved,
                cpu_capacity: spec.cpu_capacity,
                bw_capacity: spec.bw_capacity,
                ps_count: st.ps_count,
            })
            .collect();
        let first_fit = loads.iter().find(|l| l.cpu_free >= cpu && l.bw_free >= bw).map(|l| l.id);
        let chosen = if balanced { place_high_load_task(&loads, cpu, bw).ok() } else { first_fit };
        // when nothing fits, the roomiest server takes it
        chosen.unwrap_or_else(|| {
            loads
                .iter()
                .max_by(|a, b| {
                    let ha = a.cpu_free / a.cpu_capacity + a.bw_free / a.bw_capacity;
                    let hb = b.cpu_free / b.cpu_capacity + b.bw_free / b.bw_capacity;
                    ha.total_cmp(&hb).then(b.id.cmp(&a.id))
                })
                .map(|l| l.id)
                .expect("servers exist")
        })
    }

    fn start_job(&mut self, j: usize) {
        self.jobs[j].status = Status::Running;
        match self.jobs[j].arch {
            Architecture::ParameterServer => {
                for ps in 0..self.jobs[j].ps_servers.len() {
                    self.start_poll(j, ps);
                }
                let mode = self.jobs[j].mode.clone();
                self.rebuild_pools(j, &mode);
                for w in 0..self.jobs[j].workers.len() {
                    self.start_iteration(j, w, Role::Ps);
                }
            }
            Architecture::AllReduce => self.begin_round(j),
        }
    }

    fn finish_job(&mut self, j: usize) {
        self.jobs[j].status = Status::Done;
        self.acts.retain(|_, a| a.owner.job() != j);
        let p = self.jobs[j].profile.clone();
        let n = self.jobs[j].workers.len();
        for w in 0..n {
            let s = self.jobs[j].workers[w].server;
            self.servers[s].gpu_free += 1;
            self.servers[s].cpu_reserved -= p.worker_cpu_demand;
            self.servers[s].bw_reserved -= p.worker_bw_demand;
        }
        let shards = self.jobs[j].ps_servers.len().max(1);
        for s in self.jobs[j].ps_servers.clone() {
            self.servers[s].ps_count -= 1;
            self.servers[s].cpu_reserved -= p.ps_cpu_demand + p.busy_poll_cores;
            self.servers[s].bw_reserved -= p.worker_bw_demand * n as f64 / shards as f64;
        }
        self.clear_plan(j);
        self.plan_caps.retain(|&(job, _), _| job != j);
        // freed GPUs may let queued jobs in
        while let Some(&q) = self.queue.front() {
            if !self.try_place(q) {
                break;
            }
            self.queue.pop_front();
            self.start_job(q);
        }
    }

    // ---- activities and allocation ----

    pub(super) fn add(&mut self, owner: Owner, what: What, kind: Kind, amount: f64) {
        let id = self.next_act;
        self.next_act += 1;
        self.acts.insert(id, Act { owner, what, kind, remaining: amount.max(0.0), rate: 0.0 });
    }

    fn remove_where(&mut self, owner: Owner, what: What) {
        self.acts.retain(|_, a| !(a.owner == owner && a.what == what));
    }

    /// Demand cap after throttles and reallocation plans.
    fn capped(&self, owner: Owner, demand: f64, cpu: bool) -> f64 {
        let Owner::Worker { job, worker } = owner else {
            return demand;
        };
        let mut d = demand;
        if let Some(m) = self.task_mult.get(&(job, worker)) {
            d *= if cpu { m.0 } else { m.1 };
        }
        if let Some(caps) = self.plan_caps.get(&(job, worker)) {
            for &(_, c, b) in caps {
                d = d.min(if cpu { c } else { b });
            }
        }
        d
    }

    fn allocate(&mut self) {
        let specs = self.world.servers();
        let mut cpu: Vec<DemandSet> =
            specs.iter().zip(&self.servers).map(|(s, st)| DemandSet::new(s.cpu_capacity * st.cpu_mult)).collect();
        let mut cpu_ids: Vec<Vec<u64>> = vec![Vec::new(); specs.len()];
        let mut flows = Vec::new();
        let mut flow_ids = Vec::new();
        for (&id, a) in &self.acts {
            match &a.kind {
                Kind::Cpu { server, demand } => {
                    let d = self.capped(a.owner, *demand, true);
                    cpu[*server].push(cpu_ids[*server].len(), d);
                    cpu_ids[*server].push(id);
                }
                Kind::Flow { links, demand } => {
                    flows.push(FlowDemand { demand: self.capped(a.owner, *demand, false), links: links.clone() });
                    flow_ids.push(id);
                }
                Kind::Timer => {}
            }
        }
        let mut rates: Vec<(u64, f64)> = Vec::new();
        for (set, ids) in cpu.iter().zip(&cpu_ids) {
            rates.extend(ids.iter().copied().zip(maxmin_allocate(set)));
        }
        let caps: Vec<f64> = specs.iter().zip(&self.servers).map(|(s, st)| s.bw_capacity * st.bw_mult).collect();
        rates.extend(flow_ids.iter().copied().zip(maxmin_allocate_flows(&flows, &caps)));
        for a in self.acts.values_mut() {
            if matches!(a.kind, Kind::Timer) {
                a.rate = 1.0;
            }
        }
        for (id, r) in rates {
            if let Some(a) = self.acts.get_mut(&id) {
                a.rate = r;
            }
        }
    }

    /// Shares a worker would get right now for its CPU and bandwidth demand.
    pub(super) fn demand_caps(&self, j: usize, w: usize) -> (f64, f64) {
        let p = &self.jobs[j].profile;
        let owner = Owner::Worker { job: j, worker: w };
        (self.capped(owner, p.worker_cpu_demand, true), self.capped(owner, p.worker_bw_demand, false))
    }

    /// Shares the worker would get if it started a phase now: its capped
    /// demand water-filled against whatever already runs on its server.
    pub(super) fn probe_shares(&self, j: usize, w: usize) -> (f64, f64) {
        let (dc, db) = self.demand_caps(j, w);
        let server = self.jobs[j].workers[w].server;
        let specs = self.world.servers();
        let mut set = DemandSet::new(specs[server].cpu_capacity * self.servers[server].cpu_mult);
        let mut flows = Vec::new();
        for a in self.acts.values() {
            match &a.kind {
                Kind::Cpu { server: s, demand } if *s == server => {
                    set.push(set.entries.len(), self.capped(a.owner, *demand, true))
                }
                Kind::Flow { links, demand } => {
                    flows.push(FlowDemand { demand: self.capped(a.owner, *demand, false), links: links.clone() })
                }
                _ => {}
            }
        }
        set.push(set.entries.len(), dc);
        flows.push(FlowDemand { demand: db, links: vec![server] });
        let caps: Vec<f64> = specs.iter().zip(&self.servers).map(|(s, st)| s.bw_capacity * st.bw_mult).collect();
        let cpu = maxmin_allocate(&set).last().copied().unwrap_or(0.0);
        let bw = maxmin_allocate_flows(&flows, &caps).last().copied().unwrap_or(0.0);
        (cpu, bw)
    }

    fn complete(&mut self, a: Act) {
        match (a.owner, a.what) {
            (Owner::Worker { job, worker }, What::Preproc) => {
                let ws = &mut self.jobs[job].workers[worker];
                ws.preproc_time = self.now - ws.phase_start;
                ws.busy += ws.preproc_time;
                self.start_compute(job, worker);
            }
            (Owner::Worker { job, worker }, What::Compute) => {
                let ws = &mut self.jobs[job].workers[worker];
                ws.busy += self.now - ws.phase_start;
                self.after_compute(job, worker);
            }
            (Owner::Worker { job, worker }, What::Push) => {
                let ws = &mut self.jobs[job].workers[worker];
                ws.pending_flows -= 1;
                if ws.pending_flows == 0 {
                    ws.comm_time = self.now - ws.phase_start;
                    ws.busy += ws.comm_time;
                    self.deliver(job, worker);
                }
            }
            (Owner::Worker { job, worker }, What::ParentWait) => self.ring_ready(job, worker),
            (Owner::Worker { job, worker }, What::Ring) => {
                let ws = &mut self.jobs[job].workers[worker];
                ws.comm_time = self.now - ws.phase_start;
                ws.busy += ws.comm_time;
                self.complete_iteration(job, worker);
                let round = self.jobs[job].round.as_mut().expect("ring in a round");
                round.flows -= 1;
                if round.flows == 0 {
                    self.finish_round(job);
                }
            }
            (Owner::Ps { job, .. }, What::Update) => {
                let pending = &mut self.jobs[job].updating.as_mut().expect("update in flight").1;
                *pending -= 1;
                if *pending == 0 {
                    self.finish_update(job);
                }
            }
            (Owner::Job(job), What::Pause) => self.end_pause(job),
            (owner, what) => unreachable!("{what:?} completed for {owner:?}"),
        }
    }

    // ---- worker iterations ----

    pub(super) fn start_iteration(&mut self, j: usize, w: usize, role: Role) {
        let version = self.jobs[j].ledger.updates;
        let batch = self.jobs[j].baseline.as_ref().map(|b| b.batches[w]);
        {
            let ws = &mut self.jobs[j].workers[w];
            ws.role = role;
            ws.iteration += 1;
            ws.iter_start = self.now;
            ws.busy = 0.0;
            ws.version = version;
            if let Some(b) = batch {
                ws.batch = b;
            }
        }
        self.predict(j, w);
        let p = self.worker_profile(j, w);
        let ws = &mut self.jobs[j].workers[w];
        ws.phase = Phase::Preproc;
        ws.phase_start = self.now;
        let server = ws.server;
        self.add(
            Owner::Worker { job: j, worker: w },
            What::Preproc,
            Kind::Cpu { server, demand: p.worker_cpu_demand },
            p.preproc_work,
        );
    }

    pub(super) fn worker_profile(&self, j: usize, w: usize) -> ModelProfile {
        let job = &self.jobs[j];
        job.profile.scaled_to_batch(job.workers[w].batch, job.nominal_batch)
    }

    fn start_compute(&mut self, j: usize, w: usize) {
        let gpu = self.worker_profile(j, w).gpu_compute_time;
        let ws = &mut self.jobs[j].workers[w];
        ws.phase = Phase::Compute;
        ws.phase_start = self.now;
        self.add(Owner::Worker { job: j, worker: w }, What::Compute, Kind::Timer, gpu);
    }

    fn after_compute(&mut self, j: usize, w: usize) {
        let owner = Owner::Worker { job: j, worker: w };
        let demand = self.jobs[j].profile.worker_bw_demand;
        let bytes = self.jobs[j].comm_bytes;
        let here = self.jobs[j].workers[w].server;
        match self.jobs[j].workers[w].role {
            Role::Ps => {
                let shards = self.jobs[j].ps_servers.clone();
                let ws = &mut self.jobs[j].workers[w];
                ws.phase = Phase::Push;
                ws.phase_start = self.now;
                ws.pending_flows = shards.len();
                for s in &shards {
                    let links = link_pair(here, *s);
                    self.add(owner, What::Push, Kind::Flow { links, demand }, bytes / shards.len() as f64);
                }
            }
            Role::Child { parent } => {
                let there = self.jobs[j].workers[parent].server;
                let ws = &mut self.jobs[j].workers[w];
                ws.phase = Phase::Push;
                ws.phase_start = self.now;
                ws.pending_flows = 1;
                self.add(owner, What::Push, Kind::Flow { links: link_pair(here, there), demand }, bytes);
            }
            Role::Ring => {
                let is_parent =
                    self.jobs[j].workers.iter().any(|o| o.role == Role::Child { parent: w } && o.phase != Phase::Idle);
                let t_w = match self.jobs[j].mode {
                    SyncMode::ArRemoval { t_w, .. } => t_w,
                    _ => 0.0,
                };
                if is_parent && t_w > 0.0 {
                    self.jobs[j].workers[w].phase = Phase::ParentWait;
                    self.add(owner, What::ParentWait, Kind::Timer, t_w);
                } else {
                    self.ring_ready(j, w);
                }
            }
        }
    }

    /// Gradient report has fully arrived at the PS or parent.
    fn deliver(&mut self, j: usize, w: usize) {
        self.complete_iteration(j, w);
        let ws = &mut self.jobs[j].workers[w];
        ws.phase = Phase::Waiting;
        let report = Report { worker: w, batch: f64::from(ws.batch), version: ws.version, at: self.now };
        match ws.role {
            Role::Ps => {
                let pool =
                    self.jobs[j].pools.iter_mut().find(|p| p.members.contains(&w)).expect("every worker has a pool");
                pool.reports.push_back(report);
                self.try_fire(j);
            }
            Role::Child { parent } => self.jobs[j].mailbox.push((parent, report)),
            Role::Ring => unreachable!("ring workers do not push"),
        }
    }

    /// Close the bookkeeping for a worker's iteration: history, labels,
    /// confusion counts and the iteration record.
    fn complete_iteration(&mut self, j: usize, w: usize) {
        let thr = self.cfg.threshold;
        let job = &mut self.jobs[j];
        let ws = &mut job.workers[w];
        let realized = ws.busy;
        ws.last_realized = Some(realized);

        let latest: Option<Vec<f64>> = job.workers.iter().map(|o| o.last_realized).collect();
        let straggler = latest.filter(|t| t.len() > 1).map(|t| {
            let min = t.iter().copied().fold(f64::INFINITY, f64::min);
            (realized - min) / min > thr
        });
        let ws = &mut job.workers[w];
        if let Some(actual) = straggler {
            if let Some(pred) = ws.predicted_label {
                job.predictor.record(pred, actual);
                job.rule.record(ws.rule_label, actual);
            }
            if actual {
                ws.straggling_since.get_or_insert(self.now);
            } else {
                ws.straggling_since = None;
            }
        }
        if self.cfg.record_iterations {
            self.iterations.push(IterationRecord {
                job: j,
                worker: w,
                iteration: ws.iteration,
                start: ws.iter_start,
                end: self.now,
                time: realized,
                predicted: ws.prediction,
                straggler,
                predicted_straggler: ws.predicted_label,
            });
        }
    }

    // ---- parameter server ----

    fn start_poll(&mut self, j: usize, ps: usize) {
        let server = self.jobs[j].ps_servers[ps];
        let demand = self.jobs[j].profile.busy_poll_cores;
        if demand > 0.0 {
            self.add(Owner::Ps { job: j, ps }, What::Poll, Kind::Cpu { server, demand }, f64::INFINITY);
        }
    }

    pub(super) fn rebuild_pools(&mut self, j: usize, mode: &SyncMode) {
        let n = self.jobs[j].workers.len();
        let mut held: Vec<Report> = self.jobs[j].pools.drain(..).flat_map(|p| p.reports).collect();
        held.sort_by(|a, b| a.at.total_cmp(&b.at).then(a.worker.cmp(&b.worker)));
        let mut pools = match mode {
            SyncMode::StaticX { x } => vec![Pool { members: (0..n).collect(), need: *x, reports: VecDeque::new() }],
            SyncMode::DynamicX { partition } => partition
                .clusters
                .iter()
                .map(|c| Pool { members: c.workers.clone(), need: c.size(), reports: VecDeque::new() })
                .collect(),
            SyncMode::ArRemoval { .. } => unreachable!("removal is an all-reduce mode"),
        };
        for r in held {
            let p = pools.iter_mut().find(|p| p.members.contains(&r.worker)).expect("partition covers workers");
            p.reports.push_back(r);
        }
        self.jobs[j].pools = pools;
    }

    pub(super) fn try_fire(&mut self, j: usize) {
        let job = &self.jobs[j];
        if job.status != Status::Running || job.updating.is_some() || self.now < job.paused_until {
            return;
        }
        // the pool whose quorum completed first
        let Some(i) =
            (0..job.pools.len()).filter(|&i| job.pools[i].reports.len() >= job.pools[i].need).min_by(|&a, &b| {
                let ta = job.pools[a].reports[job.pools[a].need - 1].at;
                let tb = job.pools[b].reports[job.pools[b].need - 1].at;
                ta.total_cmp(&tb).then(a.cmp(&b))
            })
        else {
            return;
        };
        let need = job.pools[i].need;
        let reports: Vec<Report> = self.jobs[j].pools[i].reports.drain(..need).collect();
        let work = self.jobs[j].profile.ps_update_work;
        let demand = self.jobs[j].profile.ps_cpu_demand;
        let shards = self.jobs[j].ps_servers.clone();
        self.jobs[j].updating = Some((reports, shards.len()));
        for (ps, &server) in shards.iter().enumerate() {
            let owner = Owner::Ps { job: j, ps };
            self.remove_where(owner, What::Poll);
            self.add(owner, What::Update, Kind::Cpu { server, demand }, work / shards.len() as f64);
        }
    }

    fn finish_update(&mut self, j: usize) {
        let (reports, _) = self.jobs[j].updating.take().expect("update in flight");
        for ps in 0..self.jobs[j].ps_servers.len() {
            self.start_poll(j, ps);
        }
        if self.apply_update(j, &reports) {
            return;
        }
        for r in &reports {
            self.start_iteration(j, r.worker, Role::Ps);
        }
        self.update_boundary(j);
        self.try_fire(j);
    }

    /// Credit one update; returns true if the job just converged.
    fn apply_update(&mut self, j: usize, reports: &[Report]) -> bool {
        let job = &mut self.jobs[j];
        let batch: f64 = reports.iter().map(|r| r.batch).sum();
        let discount = match self.cfg.staleness_discount {
            Some(d) => {
                let mean =
                    reports.iter().map(|r| (job.ledger.updates - r.version) as f64).sum::<f64>() / reports.len() as f64;
                d.powf(mean)
            }
            None => 1.0,
        };
        let step = job.ledger.step(job.total_batch);
        let credit = apply_update_progress(&mut job.ledger, &job.profile.pgns, job.total_batch, batch, discount);
        job.credits.push_back(credit);
        if job.credits.len() > crate::prevention::DEFAULT_GAIN_WINDOW {
            job.credits.pop_front();
        }
        self.updates.push(UpdateRecord {
            job: j,
            time: self.now,
            batch,
            step,
            credit,
            progress: job.ledger.progress,
            mode: job.mode.to_string(),
        });
        let elapsed = self.now - job.submit;
        if job.tta.is_none() && job.ledger.progress >= job.profile.progress_target_tta {
            job.tta = Some(elapsed);
        }
        // straggler accounting on the latest realized times
        let latest: Option<Vec<f64>> = job.workers.iter().map(|w| w.last_realized).collect();
        if let Some(t) = latest.filter(|t| t.len() > 1) {
            let min = t.iter().copied().fold(f64::INFINITY, f64::min);
            if t.iter().any(|x| (x - min) / min > self.cfg.threshold) {
                job.straggler_iterations += 1;
            }
        }
        if job.ledger.progress >= job.profile.progress_target_conv {
            job.jct = Some(elapsed);
            self.finish_job(j);
            return true;
        }
        false
    }

    pub(super) fn start_pause(&mut self, j: usize, seconds: f64) {
        self.jobs[j].paused_until = self.now + seconds;
        self.jobs[j].overhead += seconds;
        self.add(Owner::Job(j), What::Pause, Kind::Timer, seconds);
    }

    fn end_pause(&mut self, j: usize) {
        if let Some((mode, removed)) = self.jobs[j].pending_mode.take() {
            self.set_mode(j, mode, removed);
        }
        match self.jobs[j].arch {
            Architecture::ParameterServer => self.try_fire(j),
            Architecture::AllReduce => self.try_start_ring(j),
        }
    }

    pub(super) fn set_mode(&mut self, j: usize, mode: SyncMode, removed: Vec<usize>) {
        let mode = with_tw(mode, self.cfg.fixed_tw);
        if self.jobs[j].arch == Architecture::ParameterServer {
            self.rebuild_pools(j, &mode);
            self.jobs[j].mode = mode;
            self.try_fire(j);
        } else {
            // all-reduce roles change at the next round
            self.jobs[j].mode = mode;
            self.jobs[j].removed = removed;
        }
    }

    // ---- ring all-reduce ----

    fn begin_round(&mut self, j: usize) {
        let n = self.jobs[j].workers.len();
        let free: Vec<usize> = (0..n).filter(|&w| self.jobs[j].workers[w].phase == Phase::Idle).collect();
        let removed = self.removal_set(j);
        let mut ring: Vec<usize> = free.iter().copied().filter(|w| !removed.contains(w)).collect();
        if ring.is_empty() {
            ring = free.clone();
        }
        let children: Vec<usize> = free.iter().copied().filter(|w| !ring.contains(w)).collect();
        let mut child_count = vec![0usize; n];
        for o in &self.jobs[j].workers {
            if let Role::Child { parent } = o.role {
                if o.phase != Phase::Idle {
                    child_count[parent] += 1;
                }
            }
        }
        self.jobs[j].round =
            Some(Round { ring: ring.clone(), ready: 0, flows: 0, started: false, collected: Vec::new() });
        for &c in &children {
            let bw: Vec<f64> = (0..n).map(|p| self.link_bw(j, c, p)).collect();
            let parent = assign_child_parent(&ring, &bw, &child_count).expect("ring is not empty");
            child_count[parent] += 1;
            self.jobs[j].workers[c].role = Role::Child { parent };
            self.jobs[j].workers[c].phase = Phase::Preproc;
        }
        for &w in &ring {
            self.jobs[j].workers[w].role = Role::Ring;
            self.jobs[j].workers[w].phase = Phase::Preproc;
        }
        for &c in &children {
            let role = self.jobs[j].workers[c].role;
            self.start_iteration(j, c, role);
        }
        for &w in &ring {
            self.start_iteration(j, w, Role::Ring);
        }
    }

    /// Bandwidth between two workers' servers.
    fn link_bw(&self, j: usize, a: usize, b: usize) -> f64 {
        let specs = self.world.servers();
        let (sa, sb) = (self.jobs[j].workers[a].server, self.jobs[j].workers[b].server);
        (specs[sa].bw_capacity * self.servers[sa].bw_mult).min(specs[sb].bw_capacity * self.servers[sb].bw_mult)
    }

    fn ring_ready(&mut self, j: usize, w: usize) {
        self.jobs[j].workers[w].phase = Phase::Ready;
        // a parent takes whatever its children have delivered by now
        let mut taken = Vec::new();
        self.jobs[j].mailbox.retain(|&(p, r)| {
            if p == w {
                taken.push(r);
                false
            } else {
                true
            }
        });
        let round = self.jobs[j].round.as_mut().expect("ring worker in a round");
        round.collected.extend(taken);
        round.ready += 1;
        self.try_start_ring(j);
    }

    fn try_start_ring(&mut self, j: usize) {
        if self.now < self.jobs[j].paused_until || self.jobs[j].status != Status::Running {
            return;
        }
        let Some(round) = &self.jobs[j].round else { return };
        if round.started || round.ready < round.ring.len() {
            return;
        }
        let ring = round.ring.clone();
        // reports whose parent is not in this ring are picked up here
        let mut orphans = Vec::new();
        self.jobs[j].mailbox.retain(|&(p, r)| {
            if ring.contains(&p) {
                true
            } else {
                orphans.push(r);
                false
            }
        });
        let round = self.jobs[j].round.as_mut().expect("checked above");
        round.collected.extend(orphans);
        round.started = true;
        round.flows = ring.len();
        let demand = self.jobs[j].profile.worker_bw_demand;
        let bytes = if ring.len() > 1 { self.jobs[j].comm_bytes } else { 0.0 };
        for (k, &w) in ring.iter().enumerate() {
            let next = ring[(k + 1) % ring.len()];
            let links = link_pair(self.jobs[j].workers[w].server, self.jobs[j].workers[next].server);
            let ws = &mut self.jobs[j].workers[w];
            ws.phase = Phase::Ring;
            ws.phase_start = self.now;
            self.add(Owner::Worker { job: j, worker: w }, What::Ring, Kind::Flow { links, demand }, bytes);
        }
    }

    fn finish_round(&mut self, j: usize) {
        let round = self.jobs[j].round.take().expect("round in flight");
        let mut reports: Vec<Report> = round
            .ring
            .iter()
            .map(|&w| {
                let ws = &self.jobs[j].workers[w];
                Report { worker: w, batch: f64::from(ws.batch), version: ws.version, at: self.now }
            })
            .collect();
        reports.extend(round.collected.iter().copied());
        if self.apply_update(j, &reports) {
            return;
        }
        for r in &reports {
            self.jobs[j].workers[r.worker].phase = Phase::Idle;
        }
        self.update_boundary(j);
        if self.jobs[j].status == Status::Running {
            self.begin_round(j);
        }
    }

    pub(super) fn now(&self) -> f64 {
        self.now
    }
}

fn link_pair(a: usize, b: usize) -> Vec<usize> {
    if a == b {
        vec![a]
    } else {
        vec![a, b]
    }
}

fn fits(arch: Architecture, mode: &SyncMode) -> bool {
    matches!(mode, SyncMode::ArRemoval { .. }) == (arch == Architecture::AllReduce)
}

pub(super) fn ssgd_mode(arch: Architecture, n: usize) -> SyncMode {
    match arch {
        Architecture::ParameterServer => SyncMode::ssgd(n),
        Architecture::AllReduce => SyncMode::ArRemoval { x: 0, t_w: 0.0 },
    }
}

fn with_tw(mode: SyncMode, fixed: Option<f64>) -> SyncMode {
    match (mode, fixed) {
        (SyncMode::ArRemoval { x, .. }, Some(t_w)) if x > 0 => SyncMode::ArRemoval { x, t_w },
        (m, _) => m,
    }
}
