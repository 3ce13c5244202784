//! File formats: job traces (CSV), cluster and calibration files (JSON),
//! perturbation schedules (JSON) and metrics exports.
//!
//! Reals are written with Rust's shortest round-trip formatting, so every
//! exported number parses back to the exact value held in memory.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_world, Architecture, JobSpec, ModelProfile, Policy, ServerSpec, ValidationErrors, World, WorldSpec,
};
use crate::sim::{Perturbation, RunMetrics};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("trace has no header row")]
    MissingHeader,
    #[error("trace has {} bad row(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Rows(Vec<RowError>),
    #[error(transparent)]
    World(#[from] ValidationErrors),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {message}")]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

/// One job of a workload trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub job_id: String,
    pub submit_time_s: f64,
    pub model: String,
    pub num_workers: usize,
    pub num_ps: usize,
    pub arch: Architecture,
    pub batch_per_worker: u32,
    pub learning_rate: f64,
    pub policy: Policy,
}

impl TraceRow {
    pub fn to_job(&self) -> JobSpec {
        JobSpec {
            id: self.job_id.clone(),
            submit_time: self.submit_time_s,
            model: self.model.clone(),
            num_workers: self.num_workers,
            num_ps: self.num_ps,
            architecture: self.arch,
            batch_per_worker: self.batch_per_worker,
            learning_rate: self.learning_rate,
            policy: self.policy,
        }
    }
}

const TRACE_HEADER: [&str; 9] = [
    "job_id",
    "submit_time_s",
    "model",
    "num_workers",
    "num_ps",
    "arch",
    "batch_per_worker",
    "learning_rate",
    "policy",
];

/// Parse a trace, checking model names against `models`. Rows come back in
/// submit-time order; rows with equal times keep their file order. Every bad
/// row is reported, not just the first.
pub fn parse_trace<R: Read>(input: R, models: &BTreeSet<String>) -> Result<Vec<TraceRow>, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
    let header = reader.headers()?.clone();
    if header.is_empty() || !TRACE_HEADER.iter().all(|h| header.iter().any(|c| c == *h)) {
        return Err(IoError::MissingHeader);
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        match record.deserialize::<TraceRow>(Some(&header)) {
            Ok(row) if !models.contains(&row.model) => {
                errors.push(RowError { line, message: format!("unknown model `{}`", row.model) });
            }
            Ok(row) => rows.push(row),
            Err(e) => errors.push(RowError { line, message: e.to_string() }),
        }
    }
    if !errors.is_empty() {
        return Err(IoError::Rows(errors));
    }
    rows.sort_by(|a, b| a.submit_time_s.total_cmp(&b.submit_time_s));
    Ok(rows)
}

pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFile {
    pub servers: Vec<ServerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub models: Vec<ModelProfile>,
}

/// Servers and models from their JSON files, validated, with no jobs yet.
pub fn load_world(cluster: &Path, calibration: &Path) -> Result<World, IoError> {
    let c: ClusterFile = read_json(cluster)?;
    let m: CalibrationFile = read_json(calibration)?;
    Ok(validate_world(WorldSpec { servers: c.servers, models: m.models, jobs: Vec::new() })?)
}

/// Cluster, calibration and trace files as one validated world.
pub fn load_scenario(trace: &Path, cluster: &Path, calibration: &Path) -> Result<World, IoError> {
    let base = load_world(cluster, calibration)?;
    let models: BTreeSet<String> = base.model_names().map(str::to_owned).collect();
    let rows = parse_trace(open(trace)?, &models)?;
    Ok(base.with_jobs(rows.iter().map(TraceRow::to_job).collect())?)
}

pub fn load_perturbations(path: &Path) -> Result<Vec<Perturbation>, IoError> {
    read_json(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    serde_json::from_reader(open(path)?)
        .map_err(|e| IoError::Parse { path: path.display().to_string(), message: e.to_string() })
}

fn open(path: &Path) -> Result<fs::File, IoError> {
    fs::File::open(path).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

/// Create `path` for writing.
pub fn create(path: &Path) -> Result<fs::File, IoError> {
    fs::File::create(path).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

/// One summary line per job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub job_id: String,
    pub policy: Policy,
    pub seed: u64,
    pub tta_s: Option<f64>,
    pub jct_s: Option<f64>,
    pub stragglers: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub decision_overhead_s: f64,
}

pub fn summary_rows(metrics: &RunMetrics) -> Vec<SummaryRow> {
    metrics
        .jobs
        .iter()
        .map(|j| SummaryRow {
            job_id: j.job_id.clone(),
            policy: j.policy,
            seed: metrics.seed,
            tta_s: j.tta,
            jct_s: j.jct,
            stragglers: j.straggler_iterations,
            fp: j.predictor.fp,
            fn_: j.predictor.fn_,
            decision_overhead_s: j.decision_overhead,
        })
        .collect()
}

/// A summary row tagged with the swept parameter value. Kept flat because
/// the CSV writer cannot serialize nested structs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub job_id: String,
    pub policy: Policy,
    pub seed: u64,
    pub tta_s: Option<f64>,
    pub jct_s: Option<f64>,
    pub stragglers: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub decision_overhead_s: f64,
}

impl SweepRow {
    pub fn new(param: &str, value: f64, row: SummaryRow) -> Self {
        let SummaryRow { job_id, policy, seed, tta_s, jct_s, stragglers, fp, fn_, decision_overhead_s } = row;
        SweepRow {
            param: param.into(),
            value,
            job_id,
            policy,
            seed,
            tta_s,
            jct_s,
            stragglers,
            fp,
            fn_,
            decision_overhead_s,
        }
    }
}

pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<SummaryRow>, IoError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Full metrics, every iteration and update included.
pub fn write_structured<W: Write>(out: W, metrics: &RunMetrics) -> Result<(), IoError> {
    serde_json::to_writer_pretty(out, metrics)?;
    Ok(())
}

pub fn read_structured<R: Read>(input: R) -> Result<RunMetrics, IoError> {
    Ok(serde_json::from_reader(input)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Rows,
    Structured,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rows" | "csv" => Ok(Format::Rows),
            "structured" | "json" => Ok(Format::Structured),
            other => Err(format!("unknown format `{other}` (rows|structured)")),
        }
    }
}

pub fn export_metrics(path: &Path, metrics: &RunMetrics, format: Format) -> Result<(), IoError> {
    let f = create(path)?;
    match format {
        Format::Rows => write_rows(f, &summary_rows(metrics)),
        Format::Structured => write_structured(std::io::BufWriter::new(f), metrics),
    }
}
