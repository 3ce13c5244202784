//! Shared domain types: the simulated cluster, model calibration profiles,
//! synchronization modes and the batch/noise-scale arithmetic every other
//! module builds on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to non-positive sensitivity factors.
pub const DEFAULT_SENSITIVITY_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub id: String,
    /// Normalized cores.
    pub cpu_capacity: f64,
    /// Bytes per second.
    pub bw_capacity: f64,
    #[serde(default)]
    pub gpu_slots: u32,
}

/// Step-indexed pre-conditioned gradient noise scale samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PgnsCurve {
    pub samples: Vec<(u64, f64)>,
}

impl PgnsCurve {
    pub fn new(samples: Vec<(u64, f64)>) -> Self {
        Self { samples }
    }

    pub fn constant(phi: f64) -> Self {
        Self { samples: vec![(0, phi)] }
    }

    /// Index of the sample that governs `step`: the last sample whose step is
    /// not past the query, or the first sample when the query precedes it.
    pub fn sample_index(&self, step: u64) -> usize {
        self.samples.partition_point(|&(s, _)| s <= step).saturating_sub(1)
    }

    pub fn phi_at(&self, step: u64) -> f64 {
        self.samples[self.sample_index(step)].1
    }

    fn check(&self) -> Result<(), String> {
        if self.samples.is_empty() {
            return Err("pgns curve has no samples".into());
        }
        for w in self.samples.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(format!("pgns steps must be strictly increasing ({} then {})", w[0].0, w[1].0));
            }
        }
        if let Some(&(s, phi)) = self.samples.iter().find(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
            return Err(format!("pgns phi at step {s} is invalid ({phi})"));
        }
        Ok(())
    }
}

/// Noise scale in effect after `step` completed steps.
pub fn pgns_at_step(curve: &PgnsCurve, step: u64) -> f64 {
    curve.phi_at(step)
}

/// TTA measured under a series of throttling levels of one resource type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    /// `(fraction of the resource left, TTA in seconds)`.
    pub throttle_points: Vec<(f64, f64)>,
    pub baseline_tta: f64,
}

impl SensitivityProfile {
    /// A profile whose sensitivity is `s` (one synthetic throttle point).
    pub fn with_sensitivity(s: f64) -> Self {
        Self { throttle_points: vec![(0.5, 1.0 + s)], baseline_tta: 1.0 }
    }

    /// Product of relative TTA inflations over the throttle points. Factors
    /// at or below zero are floored at `epsilon`.
    pub fn sensitivity(&self, epsilon: f64) -> f64 {
        self.throttle_points
            .iter()
            .map(|&(_, tta)| ((tta - self.baseline_tta) / self.baseline_tta).max(epsilon))
            .product()
    }

    fn check(&self) -> Result<(), String> {
        if !(self.baseline_tta > 0.0 && self.baseline_tta.is_finite()) {
            return Err(format!("baseline_tta must be positive, got {}", self.baseline_tta));
        }
        let mut seen = Vec::with_capacity(self.throttle_points.len());
        for &(fraction, tta) in &self.throttle_points {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(format!("throttle fraction {fraction} outside (0, 1]"));
            }
            if !(tta > 0.0 && tta.is_finite()) {
                return Err(format!("throttled tta must be positive, got {tta}"));
            }
            if seen.contains(&fraction) {
                return Err(format!("throttle fraction {fraction} repeated"));
            }
            seen.push(fraction);
        }
        let s = self.sensitivity(DEFAULT_SENSITIVITY_EPSILON);
        if !s.is_finite() {
            return Err("sensitivity is not finite".into());
        }
        Ok(())
    }
}

/// Calibration of one model: per-iteration work, transfer sizes, and the
/// statistical-efficiency curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    /// GPU seconds per iteration at the default batch.
    pub gpu_compute_time: f64,
    pub param_bytes: f64,
    /// Core-seconds of input pre-processing per iteration.
    pub preproc_work: f64,
    /// Core-seconds the parameter servers spend applying one update.
    pub ps_update_work: f64,
    /// Cores a receiver burns while polling for reports.
    pub busy_poll_cores: f64,
    /// Cores a worker asks for while pre-processing.
    pub worker_cpu_demand: f64,
    /// Bytes/s a worker asks for while communicating.
    pub worker_bw_demand: f64,
    /// Cores a parameter server asks for while applying an update.
    pub ps_cpu_demand: f64,
    pub pgns: PgnsCurve,
    pub progress_target_tta: f64,
    pub progress_target_conv: f64,
    pub sensitivity_cpu: SensitivityProfile,
    pub sensitivity_bw: SensitivityProfile,
}

impl ModelProfile {
    /// Bytes exchanged with the parameter servers per iteration: gradients up
    /// and parameters down.
    pub fn default_comm_bytes(&self) -> f64 {
        2.0 * self.param_bytes
    }

    /// Profile of the same model run at a different per-worker batch; the
    /// per-sample work scales linearly.
    pub fn scaled_to_batch(&self, batch: u32, nominal: u32) -> ModelProfile {
        if batch == nominal {
            return self.clone();
        }
        let ratio = f64::from(batch) / f64::from(nominal);
        ModelProfile {
            gpu_compute_time: self.gpu_compute_time * ratio,
            preproc_work: self.preproc_work * ratio,
            ..self.clone()
        }
    }

    fn check(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.gpu_compute_time > 0.0 && self.gpu_compute_time.is_finite()) {
            out.push(format!("gpu_compute_time must be positive, got {}", self.gpu_compute_time));
        }
        for (field, v) in [
            ("param_bytes", self.param_bytes),
            ("preproc_work", self.preproc_work),
            ("ps_update_work", self.ps_update_work),
            ("busy_poll_cores", self.busy_poll_cores),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{field} must be non-negative, got {v}"));
            }
        }
        for (field, v) in [
            ("worker_cpu_demand", self.worker_cpu_demand),
            ("worker_bw_demand", self.worker_bw_demand),
            ("ps_cpu_demand", self.ps_cpu_demand),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{field} must be positive, got {v}"));
            }
        }
        if !(self.progress_target_tta > 0.0 && self.progress_target_tta.is_finite()) {
            out.push(format!("progress_target_tta must be positive, got {}", self.progress_target_tta));
        }
        if !(self.progress_target_conv >= self.progress_target_tta && self.progress_target_conv.is_finite()) {
            out.push(format!(
                "progress_target_conv ({}) must be at least progress_target_tta ({})",
                self.progress_target_conv, self.progress_target_tta
            ));
        }
        if let Err(e) = self.pgns.check() {
            out.push(e);
        }
        if let Err(e) = self.sensitivity_cpu.check() {
            out.push(format!("sensitivity_cpu: {e}"));
        }
        if let Err(e) = self.sensitivity_bw.check() {
            out.push(format!("sensitivity_bw: {e}"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "ps")]
    ParameterServer,
    #[serde(rename = "ar")]
    AllReduce,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::ParameterServer => "ps",
            Architecture::AllReduce => "ar",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ps" => Ok(Architecture::ParameterServer),
            "ar" | "allreduce" | "all-reduce" => Ok(Architecture::AllReduce),
            other => Err(format!("unknown architecture `{other}`")),
        }
    }
}

/// How a mode decision's latency is paid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionTiming {
    /// Block the parameter server while the heuristic runs.
    Pause,
    /// Trained regressor inference overlapped with training.
    Overlap,
    /// Decide ahead of time from predictions that are one latency old.
    Lookahead,
}

impl FromStr for DecisionTiming {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pause" => Ok(DecisionTiming::Pause),
            "overlap" => Ok(DecisionTiming::Overlap),
            "lookahead" => Ok(DecisionTiming::Lookahead),
            other => Err(format!("unknown timing `{other}` (pause|overlap|lookahead)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    Ssgd,
    Asgd,
    SyncSwitch,
    LbBsp,
    Lgc,
    Star(DecisionTiming),
}

impl Policy {
    pub fn is_star(&self) -> bool {
        matches!(self, Policy::Star(_))
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Ssgd => "ssgd",
            Policy::Asgd => "asgd",
            Policy::SyncSwitch => "sync-switch",
            Policy::LbBsp => "lb-bsp",
            Policy::Lgc => "lgc",
            Policy::Star(DecisionTiming::Pause) => "star-h",
            Policy::Star(DecisionTiming::Overlap) => "star-ml",
            Policy::Star(DecisionTiming::Lookahead) => "star-la",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "ssgd" => Policy::Ssgd,
            "asgd" => Policy::Asgd,
            "sync-switch" | "syncswitch" => Policy::SyncSwitch,
            "lb-bsp" | "lbbsp" => Policy::LbBsp,
            "lgc" => Policy::Lgc,
            "star" | "star-h" => Policy::Star(DecisionTiming::Pause),
            "star-ml" => Policy::Star(DecisionTiming::Overlap),
            "star-la" | "star-" => Policy::Star(DecisionTiming::Lookahead),
            other => return Err(format!("unknown policy `{other}`")),
        })
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: String,
    pub submit_time: f64,
    pub model: String,
    pub num_workers: usize,
    #[serde(default = "one")]
    pub num_ps: usize,
    pub architecture: Architecture,
    pub batch_per_worker: u32,
    pub learning_rate: f64,
    pub policy: Policy,
}

fn one() -> usize {
    1
}

impl JobSpec {
    /// Total batch across all workers.
    pub fn total_batch(&self) -> f64 {
        self.num_workers as f64 * f64::from(self.batch_per_worker)
    }
}

/// Workers grouped by similar predicted iteration time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub workers: Vec<usize>,
    /// Largest predicted iteration time in the cluster.
    pub max_time: f64,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.workers.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub clusters: Vec<Cluster>,
}

impl ClusterPartition {
    pub fn single(n: usize, max_time: f64) -> Self {
        Self { clusters: vec![Cluster { workers: (0..n).collect(), max_time }] }
    }

    pub fn check(&self, n: usize) -> Result<(), ModeError> {
        if self.clusters.is_empty() {
            return Err(ModeError::EmptyPartition);
        }
        let mut seen = BTreeSet::new();
        for c in &self.clusters {
            if c.workers.is_empty() {
                return Err(ModeError::EmptyCluster);
            }
            for &w in &c.workers {
                if w >= n || !seen.insert(w) {
                    return Err(ModeError::PartitionNotCover { workers: n });
                }
            }
        }
        if seen.len() != n {
            return Err(ModeError::PartitionNotCover { workers: n });
        }
        if self.clusters.windows(2).any(|w| w[0].max_time > w[1].max_time) {
            return Err(ModeError::PartitionOrder);
        }
        Ok(())
    }
}

/// Synchronization mode of one job. SSGD is `StaticX { x: N }` and ASGD is
/// `StaticX { x: 1 }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyncMode {
    StaticX { x: usize },
    DynamicX { partition: ClusterPartition },
    ArRemoval { x: usize, t_w: f64 },
}

impl SyncMode {
    pub fn ssgd(n: usize) -> Self {
        SyncMode::StaticX { x: n }
    }

    pub fn asgd() -> Self {
        SyncMode::StaticX { x: 1 }
    }

    pub fn validate(&self, n: usize) -> Result<(), ModeError> {
        match self {
            SyncMode::StaticX { x } => {
                if *x == 0 || *x > n {
                    return Err(ModeError::OrderOutOfRange { x: *x, n });
                }
            }
            SyncMode::DynamicX { partition } => partition.check(n)?,
            SyncMode::ArRemoval { x, t_w } => {
                if *x >= n {
                    return Err(ModeError::OrderOutOfRange { x: *x, n });
                }
                if !(*t_w >= 0.0 && t_w.is_finite()) {
                    return Err(ModeError::NegativeWait(*t_w));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for SyncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyncMode::StaticX { x } => write!(f, "StaticX({x})"),
            SyncMode::DynamicX { partition } => {
                f.write_str("DynamicX[")?;
                for (i, c) in partition.clusters.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    f.write_str("{")?;
                    for (j, w) in c.workers.iter().enumerate() {
                        if j > 0 {
                            f.write_str(",")?;
                        }
                        write!(f, "{w}")?;
                    }
                    f.write_str("}")?;
                }
                f.write_str("]")
            }
            SyncMode::ArRemoval { x, t_w } => write!(f, "ARRemoval(x={x}, t_w={t_w})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModeError {
    #[error("order {x} outside the valid range for {n} workers")]
    OrderOutOfRange { x: usize, n: usize },
    #[error("partition has no clusters")]
    EmptyPartition,
    #[error("partition contains an empty cluster")]
    EmptyCluster,
    #[error("partition is not a disjoint cover of {workers} workers")]
    PartitionNotCover { workers: usize },
    #[error("partition clusters are not ordered by ascending max time")]
    PartitionOrder,
    #[error("parent wait {0} must be non-negative")]
    NegativeWait(f64),
    #[error("mode does not apply to the {0} architecture")]
    WrongArchitecture(Architecture),
    #[error("on-time removed workers ({q}) exceed removed workers ({x})")]
    OnTimeExceedsRemoved { q: usize, x: usize },
}

/// Batch credited to one parameter update under `mode`: one value, or one per
/// cluster for `DynamicX`. `on_time_removed` is the number of removed
/// all-reduce workers that made the parent deadline and is ignored otherwise.
pub fn effective_batch(
    mode: &SyncMode,
    n: usize,
    total_batch: f64,
    on_time_removed: usize,
) -> Result<Vec<f64>, ModeError> {
    mode.validate(n)?;
    let per_worker = total_batch / n as f64;
    Ok(match mode {
        SyncMode::StaticX { x } if *x == n => vec![total_batch],
        SyncMode::StaticX { x } => vec![*x as f64 * per_worker],
        SyncMode::DynamicX { partition } => partition.clusters.iter().map(|c| c.size() as f64 * per_worker).collect(),
        SyncMode::ArRemoval { x, .. } => {
            if on_time_removed > *x {
                return Err(ModeError::OnTimeExceedsRemoved { q: on_time_removed, x: *x });
            }
            vec![(n - x + on_time_removed) as f64 * per_worker]
        }
    })
}

/// Everything a simulation runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub servers: Vec<ServerSpec>,
    pub models: Vec<ModelProfile>,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("duplicate server id `{0}`")]
    DuplicateServer(String),
    #[error("server `{server}`: {field} must be positive, got {value}")]
    NonPositiveCapacity { server: String, field: &'static str, value: f64 },
    #[error("duplicate model `{0}`")]
    DuplicateModel(String),
    #[error("model `{model}`: {reason}")]
    InvalidModel { model: String, reason: String },
    #[error("duplicate job id `{0}`")]
    DuplicateJob(String),
    #[error("job `{job}`: {reason}")]
    InvalidJob { job: String, reason: String },
    #[error("job `{job}` references unknown model `{model}`")]
    UnknownModel { job: String, model: String },
}

/// All violations found in a world, in discovery order.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{} world validation error(s): {}", .0.len(), join(.0))]
pub struct ValidationErrors(pub Vec<WorldError>);

fn join(errors: &[WorldError]) -> String {
    errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// A world that passed [`validate_world`]. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    spec: WorldSpec,
    model_index: BTreeMap<String, usize>,
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn servers(&self) -> &[ServerSpec] {
        &self.spec.servers
    }

    pub fn jobs(&self) -> &[JobSpec] {
        &self.spec.jobs
    }

    pub fn model(&self, name: &str) -> Option<&ModelProfile> {
        self.model_index.get(name).map(|&i| &self.spec.models[i])
    }

    pub fn model_names(&self) -> impl Iterator<Item = &str> {
        self.model_index.keys().map(String::as_str)
    }

    /// Index of a model in sorted-name order (stable one-hot position).
    pub fn model_rank(&self, name: &str) -> Option<usize> {
        self.model_index.keys().position(|k| k == name)
    }

    /// Same servers and models, different jobs. Revalidates.
    pub fn with_jobs(&self, jobs: Vec<JobSpec>) -> Result<World, ValidationErrors> {
        validate_world(WorldSpec { jobs, ..self.spec.clone() })
    }
}

pub fn validate_world(world: WorldSpec) -> Result<World, ValidationErrors> {
    let mut errors = Vec::new();

    let mut server_ids = BTreeSet::new();
    for s in &world.servers {
        if !server_ids.insert(s.id.as_str()) {
            errors.push(WorldError::DuplicateServer(s.id.clone()));
        }
        for (field, value) in [("cpu_capacity", s.cpu_capacity), ("bw_capacity", s.bw_capacity)] {
            if !(value > 0.0 && value.is_finite()) {
                errors.push(WorldError::NonPositiveCapacity { server: s.id.clone(), field, value });
            }
        }
    }

    let mut model_index = BTreeMap::new();
    for (i, m) in world.models.iter().enumerate() {
        if model_index.insert(m.name.clone(), i).is_some() {
            errors.push(WorldError::DuplicateModel(m.name.clone()));
        }
        for reason in m.check() {
            errors.push(WorldError::InvalidModel { model: m.name.clone(), reason });
        }
    }

    let mut job_ids = BTreeSet::new();
    for j in &world.jobs {
        if !job_ids.insert(j.id.as_str()) {
            errors.push(WorldError::DuplicateJob(j.id.clone()));
        }
        let mut bad = |reason: String| {
            errors.push(WorldError::InvalidJob { job: j.id.clone(), reason });
        };
        if j.num_workers < 2 {
            bad(format!("needs at least 2 workers, got {}", j.num_workers));
        }
        if j.architecture == Architecture::ParameterServer && j.num_ps == 0 {
            bad("parameter-server job needs at least one PS".into());
        }
        if j.batch_per_worker == 0 {
            bad("batch_per_worker must be positive".into());
        }
        if !(j.submit_time >= 0.0 && j.submit_time.is_finite()) {
            bad(format!("submit_time must be non-negative, got {}", j.submit_time));
        }
        if !(j.learning_rate > 0.0 && j.learning_rate.is_finite()) {
            bad(format!("learning_rate must be positive, got {}", j.learning_rate));
        }
        if !model_index.contains_key(&j.model) {
            errors.push(WorldError::UnknownModel { job: j.id.clone(), model: j.model.clone() });
        }
    }

    if errors.is_empty() {
        Ok(World { spec: world, model_index })
    } else {
        Err(ValidationErrors(errors))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn profile(name: &str) -> ModelProfile {
        ModelProfile {
            name: name.into(),
            gpu_compute_time: 0.3,
            param_bytes: 5e7,
            preproc_work: 1.0,
            ps_update_work: 0.05,
            busy_poll_cores: 0.5,
            worker_cpu_demand: 2.0,
            worker_bw_demand: 1e9,
            ps_cpu_demand: 1.0,
            pgns: PgnsCurve::new(vec![(0, 64.0), (1000, 256.0)]),
            progress_target_tta: 100.0,
            progress_target_conv: 150.0,
            sensitivity_cpu: SensitivityProfile {
                throttle_points: vec![(0.75, 120.0), (0.5, 150.0)],
                baseline_tta: 100.0,
            },
            sensitivity_bw: SensitivityProfile::with_sensitivity(0.3),
        }
    }

    pub fn world() -> WorldSpec {
        WorldSpec {
            servers: vec![
                ServerSpec { id: "s0".into(), cpu_capacity: 96.0, bw_capacity: 1.25e9, gpu_slots: 8 },
                ServerSpec { id: "s1".into(), cpu_capacity: 96.0, bw_capacity: 1.25e9, gpu_slots: 8 },
            ],
            models: vec![profile("resnet")],
            jobs: vec![JobSpec {
                id: "j0".into(),
                submit_time: 0.0,
                model: "resnet".into(),
                num_workers: 4,
                num_ps: 1,
                architecture: Architecture::ParameterServer,
                batch_per_worker: 128,
                learning_rate: 0.1,
                policy: Policy::Ssgd,
            }],
        }
    }
}
