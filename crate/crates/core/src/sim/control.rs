//! Per-iteration prediction, straggler labels and the mode decisions made
//! at update boundaries.

use super::engine::{Engine, Status};
use crate::decision::{
    baseline_policy_step, rank_candidates, select_mode_ml, train_mode_regressor, BaselineAction, BaselineObservation,
    DatasetRow, DecisionInput, DecisionSnapshot, ModeCandidate, HEURISTIC_LATENCY_S,
};
use crate::model::{DecisionTiming, Policy, SyncMode};
use crate::predictor::{forecast_resource, predict_iteration_time, stragglers_of, Channel, LinearAr, Observation};
use crate::prevention::{plan_reallocation, progress_gain, PlanOptions, TaskShare, Verdict, DEFAULT_GAIN_WINDOW};

/// Predictions older than this are never looked at again.
const PRED_LOG_SPAN: f64 = 10.0;

impl Engine<'_> {
    /// Forecast this worker's shares for the iteration it is starting and
    /// label it.
    pub(super) fn predict(&mut self, j: usize, w: usize) {
        let p = self.worker_profile(j, w);
        let (cpu_now, bw_now) = self.probe_shares(j, w);
        let comm = self.jobs[j].comm_bytes;
        let now = self.now();
        let ws = &mut self.jobs[j].workers[w];
        let last = ws.last_realized.unwrap_or(0.0);
        ws.history.push(Observation { cpu_share: cpu_now, bw_share: bw_now, iteration_time: last });
        let f = LinearAr::default();
        let cpu = forecast_resource(&ws.history, Channel::Cpu, p.worker_cpu_demand, &f).unwrap_or(cpu_now);
        let bw = forecast_resource(&ws.history, Channel::Bandwidth, p.worker_bw_demand, &f).unwrap_or(bw_now);
        let ws = &self.jobs[j].workers[w];
        let total = predict_iteration_time(cpu, bw, &p, comm)
            .map(|t| t.total)
            .ok()
            .or(ws.last_realized)
            .unwrap_or(f64::INFINITY);
        let rule_s = self.cfg.duration_rule_s;
        let ws = &mut self.jobs[j].workers[w];
        ws.forecast = Some((cpu, bw));
        ws.prediction = total.is_finite().then_some(total);
        if total.is_finite() {
            ws.pred_log.push_back((now, total));
        }
        while ws.pred_log.len() > 1 && ws.pred_log[0].0 < now - PRED_LOG_SPAN {
            ws.pred_log.pop_front();
        }
        ws.rule_label = ws.straggling_since.is_some_and(|t0| now - t0 >= rule_s);

        let thr = self.cfg.threshold;
        let eff: Vec<Option<f64>> = (0..self.jobs[j].workers.len()).map(|o| self.effective_prediction(j, o)).collect();
        let known: Vec<f64> = eff.iter().flatten().copied().collect();
        let label = match (eff[w], known.len()) {
            (Some(mine), k) if k > 1 => {
                let min = known.iter().copied().fold(f64::INFINITY, f64::min);
                Some((mine - min) / min > thr)
            }
            _ => None,
        };
        self.jobs[j].workers[w].predicted_label = label;
    }

    /// The prediction the job's policy acts on: the latest one, or under
    /// lookahead the latest made at least one decision latency ago.
    fn effective_prediction(&self, j: usize, w: usize) -> Option<f64> {
        let log = &self.jobs[j].workers[w].pred_log;
        if self.jobs[j].policy == Policy::Star(DecisionTiming::Lookahead) {
            let cutoff = self.now() - HEURISTIC_LATENCY_S;
            log.iter().rev().find(|(t, _)| *t <= cutoff).or(log.front()).map(|e| e.1)
        } else {
            log.back().map(|e| e.1)
        }
    }

    /// Workers left out of the ring this round.
    pub(super) fn removal_set(&self, j: usize) -> Vec<usize> {
        let job = &self.jobs[j];
        let SyncMode::ArRemoval { x, .. } = job.mode else {
            return Vec::new();
        };
        if x == 0 {
            return Vec::new();
        }
        if job.policy.is_star() && !job.pinned && job.removed.len() == x {
            return job.removed.clone();
        }
        // the x slowest by prediction, then by measurement, then highest ids
        let n = job.workers.len();
        let key = |w: usize| {
            let ws = &job.workers[w];
            ws.prediction.or(ws.last_realized).unwrap_or(0.0)
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(b.cmp(&a)));
        order.truncate(x);
        order
    }

    pub(super) fn clear_plan(&mut self, j: usize) {
        for caps in self.plan_caps.values_mut() {
            caps.retain(|c| c.0 != j);
        }
        self.plan_caps.retain(|_, c| !c.is_empty());
    }

    /// Called after every update of job `j`.
    pub(super) fn update_boundary(&mut self, j: usize) {
        if self.jobs[j].status != Status::Running || self.jobs[j].pinned {
            return;
        }
        match self.jobs[j].policy {
            Policy::Star(_) => self.star_boundary(j),
            _ => self.baseline_boundary(j),
        }
    }

    fn baseline_boundary(&mut self, j: usize) {
        let Some(times) = self.jobs[j].workers.iter().map(|w| w.last_realized).collect::<Option<Vec<f64>>>() else {
            return;
        };
        let now = self.now();
        let job = &mut self.jobs[j];
        let Some(state) = job.baseline.as_mut() else { return };
        let action = baseline_policy_step(state, &self.cfg.baseline, BaselineObservation { now, times: &times });
        match action {
            Ok(BaselineAction::SetMode(mode)) => {
                job.decisions += 1;
                self.set_mode(j, mode, Vec::new());
            }
            // new batch sizes take effect as workers start their next iteration
            Ok(BaselineAction::Resize(_)) => job.decisions += 1,
            Ok(BaselineAction::Keep) | Err(_) => {}
        }
    }

    fn star_boundary(&mut self, j: usize) {
        let now = self.now();
        if now < self.jobs[j].paused_until {
            return;
        }
        let n = self.jobs[j].workers.len();
        let Some(times) = (0..n).map(|w| self.effective_prediction(j, w)).collect::<Option<Vec<f64>>>() else {
            return;
        };
        if !times.iter().all(|t| *t > 0.0 && t.is_finite()) {
            return;
        }
        let mut stragglers =
            if n > 1 { stragglers_of(&times, self.cfg.threshold).unwrap_or_default() } else { Vec::new() };
        stragglers.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
        let mut sorted = stragglers.clone();
        sorted.sort_unstable();
        // same straggler set: only revisit if the times it was based on have moved a lot
        let job = &self.jobs[j];
        let drifted = !sorted.is_empty()
            && job.decided_times.len() == n
            && times.iter().zip(&job.decided_times).any(|(t, d)| (t - d).abs() > self.cfg.threshold * d);
        if sorted == job.last_stragglers && !drifted {
            return;
        }
        self.jobs[j].last_stragglers = sorted;
        self.jobs[j].decided_times = times.clone();
        self.decide(j, times, stragglers);
    }

    fn decide(&mut self, j: usize, times: Vec<f64>, stragglers: Vec<usize>) {
        let job = &self.jobs[j];
        let n = job.workers.len();
        let arch = job.arch;
        let Policy::Star(timing) = job.policy else { unreachable!("star decisions only") };
        let step = job.ledger.step(job.total_batch);
        let tw_grid = match self.cfg.fixed_tw {
            Some(tw) => vec![tw],
            None => self.cfg.tw_grid.clone(),
        };
        let input = DecisionInput {
            architecture: arch,
            total_batch: job.total_batch,
            phi: job.profile.pgns.phi_at(step),
            times: times.clone(),
            threshold: self.cfg.threshold,
            tw_grid: tw_grid.clone(),
        };
        let snapshot = DecisionSnapshot {
            architecture: arch,
            model: job.profile.name.clone(),
            batch_per_worker: job.nominal_batch,
            learning_rate: job.learning_rate,
            completed_steps: step,
            predicted_times: times.clone(),
            max_deviation_ratio: None,
            phi: Some(input.phi),
            threshold: Some(self.cfg.threshold),
            tw_grid: Some(tw_grid),
        };
        self.jobs[j].decisions += 1;

        let key = (arch, n);
        if let Ok(row) = DatasetRow::from_heuristic(snapshot.clone(), &input) {
            let data = self.datasets.entry(key).or_default();
            data.push(row);
            let rows = data.len();
            let due = match self.trained_at.get(&key) {
                Some(&at) => rows >= at + self.cfg.ml_retrain_every.max(1),
                None => rows >= self.cfg.ml_min_rows,
            };
            if due {
                if let Ok(model) = train_mode_regressor(data, self.cfg.ml_min_rows) {
                    self.regressors.insert(key, model);
                    self.trained_at.insert(key, rows);
                }
            }
        }

        if stragglers.is_empty() {
            self.clear_plan(j);
            let ssgd = super::engine::ssgd_mode(arch, n);
            if ssgd != self.jobs[j].mode {
                self.set_mode(j, ssgd, Vec::new());
            }
            return;
        }

        let Ok(ranked) = rank_candidates(&input) else { return };
        let learned = match (timing, self.regressors.get(&key)) {
            (DecisionTiming::Pause, _) | (_, None) => None,
            (_, Some(model)) => select_mode_ml(model, &snapshot).ok(),
        };
        let paid = learned.is_none();
        let mut candidates: Vec<ModeCandidate> = Vec::with_capacity(ranked.len() + 1);
        if let Some(top) = learned {
            candidates.push(top);
        }
        for c in ranked {
            if !candidates.iter().any(|k| k.mode == c.mode) {
                candidates.push(c);
            }
        }

        let mode = if self.cfg.prevention {
            self.prevent(j, &times, &stragglers, &candidates)
        } else {
            candidates[0].mode.clone()
        };
        let removed = match mode {
            SyncMode::ArRemoval { x, .. } => stragglers.iter().copied().take(x).collect(),
            _ => Vec::new(),
        };
        if paid {
            self.jobs[j].pending_mode = Some((mode, removed));
            self.start_pause(j, HEURISTIC_LATENCY_S);
        } else {
            self.set_mode(j, mode, removed);
        }
    }

    /// Plan a reallocation for the slowest straggler, install the donor caps
    /// and return the mode the plan supports.
    fn prevent(&mut self, j: usize, times: &[f64], stragglers: &[usize], candidates: &[ModeCandidate]) -> SyncMode {
        let n = times.len();
        let arch = self.jobs[j].arch;
        let b_worker = stragglers[0];
        let server = self.jobs[j].workers[b_worker].server;
        let jobs: Vec<usize> = (0..self.jobs.len())
            .filter(|&k| {
                self.jobs[k].status == Status::Running && self.jobs[k].workers.iter().any(|w| w.server == server)
            })
            .collect();
        let mut ids = Vec::new();
        let mut profiles = Vec::new();
        for &k in &jobs {
            for w in 0..self.jobs[k].workers.len() {
                ids.push((k, w));
                profiles.push(self.worker_profile(k, w));
            }
        }
        let tasks: Vec<TaskShare<'_>> = ids
            .iter()
            .zip(&profiles)
            .map(|(&(k, w), profile)| {
                let cap = self.demand_caps(k, w);
                let ws = &self.jobs[k].workers[w];
                let (cpu, bw) = ws.forecast.unwrap_or(cap);
                let credits: Vec<f64> = self.jobs[k].credits.iter().copied().collect();
                TaskShare {
                    job: k,
                    worker: w,
                    server: ws.server,
                    cpu,
                    bw,
                    profile,
                    comm_bytes: self.jobs[k].comm_bytes,
                    progress_gain: progress_gain(&credits, DEFAULT_GAIN_WINDOW),
                    cap,
                }
            })
            .collect();
        let beneficiary = ids.iter().position(|&id| id == (j, b_worker)).expect("beneficiary listed");

        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        // targets come from predictions; map them onto the share model's own
        // time scale so "as fast as predicted" needs no extra resources
        let scale = tasks[beneficiary].time() / times[b_worker];
        let predicted_target = |c: &ModeCandidate| match &c.mode {
            SyncMode::StaticX { x } => sorted[(*x).clamp(1, n) - 1],
            SyncMode::DynamicX { partition } => partition
                .clusters
                .iter()
                .find(|cl| cl.workers.contains(&b_worker))
                .map_or(times[b_worker], |cl| cl.max_time),
            SyncMode::ArRemoval { x, t_w } => {
                let removed: Vec<usize> = stragglers.iter().copied().take(*x).collect();
                let ring = (0..n).filter(|w| !removed.contains(w)).map(|w| times[w]).fold(0.0, f64::max);
                if removed.contains(&b_worker) {
                    ring + t_w
                } else {
                    ring
                }
            }
        };
        let target = |c: &ModeCandidate| predicted_target(c) * scale;
        let plan = plan_reallocation(
            &tasks,
            beneficiary,
            candidates,
            target,
            PlanOptions { strict: self.cfg.strict_verification },
        );
        drop(tasks);

        self.clear_plan(j);
        let mode = match &plan.verdict {
            Verdict::Accepted => candidates[0].mode.clone(),
            Verdict::Fallback(m) => m.clone(),
            Verdict::Rejected => return super::engine::ssgd_mode(arch, n),
        };
        for d in plan.deltas.iter().skip(1) {
            let k = ids.iter().position(|&id| id == (d.job, d.worker)).expect("donor listed");
            let (cpu, bw) = self.jobs[d.job].workers[d.worker].forecast.unwrap_or(self.demand_caps(d.job, d.worker));
            let floor = 1e-6 * profiles[k].worker_cpu_demand.max(profiles[k].worker_bw_demand);
            let cap_cpu = if d.cpu < 0.0 { (cpu + d.cpu).max(floor) } else { f64::INFINITY };
            let cap_bw = if d.bw < 0.0 { (bw + d.bw).max(floor) } else { f64::INFINITY };
            self.plan_caps.entry((d.job, d.worker)).or_default().push((j, cap_cpu, cap_bw));
        }
        mode
    }
}
