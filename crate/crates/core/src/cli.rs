//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::decision::{select_mode_heuristic, DecisionSnapshot};
use crate::io::{
    create, export_metrics, load_perturbations, load_scenario, read_json, summary_rows, write_rows, Format, IoError,
    SummaryRow, SweepRow,
};
use crate::model::{DecisionTiming, Policy, SyncMode, World};
use crate::sim::{run_simulation, Perturbation, SimConfig};

#[derive(Debug, Parser)]
#[command(name = "straggler-sim", version, about = "Straggler-tolerant distributed training simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and export its metrics.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides every job's policy.
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rows")]
        format: Format,
    },
    /// Run the same scenario under several policies with one seed.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<Policy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun a scenario over a grid of one parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        policy: Option<Policy>,
        /// Only `tw` (all-reduce parent wait) is supported.
        #[arg(long)]
        param: String,
        /// `start:end:step`, inclusive.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a mode for one serialized prediction snapshot.
    Decide {
        #[arg(long)]
        snapshot: PathBuf,
        /// Print the full candidate as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub cluster: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub perturb: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decision timing for STAR jobs.
    #[arg(long)]
    pub timing: Option<DecisionTiming>,
    /// Simulation settings as JSON; fields left out keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Pin all-reduce jobs to removing this many workers.
    #[arg(long)]
    pub remove: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Decision(#[from] crate::decision::DecisionError),
    #[error("{0}")]
    Usage(String),
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    kind: &'a str,
}

/// Parse `argv`, run the command and return the process exit status.
/// Failures are reported on stderr as one JSON object.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if e.use_stderr() {
                report("usage", &e.to_string());
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    let stdout = std::io::stdout();
    match dispatch(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e {
                CliError::Io(_) => "io",
                CliError::Sim(_) => "simulation",
                CliError::Decision(_) => "decision",
                CliError::Usage(_) => "usage",
            };
            report(kind, &e.to_string());
            1
        }
    }
}

fn report(kind: &str, message: &str) {
    let json = serde_json::to_string(&ErrorReport { error: message.trim(), kind }).expect("plain strings serialize");
    eprintln!("{json}");
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate { run, policy, out: path, format } => {
            let (world, perturbations, cfg) = prepare(&run, policy)?;
            let metrics = run_simulation(&world, &perturbations, &cfg, run.seed)?;
            export_metrics(&path, &metrics, format)?;
        }
        Command::Compare { run, policies, out: path } => {
            let mut seen = Vec::new();
            for p in &policies {
                if seen.contains(p) {
                    return Err(CliError::Usage(format!("policy `{p}` listed twice")));
                }
                seen.push(*p);
            }
            let prepared = policies.iter().map(|&p| prepare(&run, Some(p))).collect::<Result<Vec<_>, _>>()?;
            // every policy sees the same perturbation realization
            let results: Vec<_> =
                prepared.par_iter().map(|(world, pert, cfg)| run_simulation(world, pert, cfg, run.seed)).collect();
            let mut rows: Vec<SummaryRow> = Vec::new();
            for r in results {
                rows.extend(summary_rows(&r?));
            }
            rows.sort_by(|a, b| a.job_id.cmp(&b.job_id));
            write_rows(create(&path)?, &rows)?;
        }
        Command::Sweep { run, policy, param, grid, out: path } => {
            if param != "tw" {
                return Err(CliError::Usage(format!("cannot sweep `{param}`; supported: tw")));
            }
            let values = parse_grid(&grid)?;
            let (world, perturbations, base) = prepare(&run, policy)?;
            let results: Vec<_> = values
                .par_iter()
                .map(|&v| {
                    let cfg = SimConfig { fixed_tw: Some(v), ..base.clone() };
                    run_simulation(&world, &perturbations, &cfg, run.seed).map(|m| (v, m))
                })
                .collect();
            let mut rows = Vec::new();
            for r in results {
                let (v, m) = r?;
                rows.extend(summary_rows(&m).into_iter().map(|row| SweepRow::new(&param, v, row)));
            }
            write_rows(create(&path)?, &rows)?;
        }
        Command::Decide { snapshot, json } => {
            let snap: DecisionSnapshot = read_json(&snapshot)?;
            let input =
                snap.decision_input(None).ok_or_else(|| CliError::Usage("snapshot needs a `phi` value".into()))?;
            let best = select_mode_heuristic(&input)?;
            let line =
                if json { serde_json::to_string(&best).expect("candidates serialize") } else { best.mode.to_string() };
            writeln!(out, "{line}").map_err(|source| IoError::File { path: "stdout".into(), source })?;
        }
    }
    Ok(())
}

fn prepare(run: &RunArgs, policy: Option<Policy>) -> Result<(World, Vec<Perturbation>, SimConfig), CliError> {
    let world = load_scenario(&run.trace, &run.cluster, &run.calib)?;
    let perturbations = match &run.perturb {
        Some(p) => load_perturbations(p)?,
        None => Vec::new(),
    };
    let mut cfg: SimConfig = match &run.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(h) = run.horizon {
        cfg.horizon = h;
    }
    if let Some(p) = policy {
        cfg.policy = Some(p);
    }
    if let Some(t) = run.timing {
        match cfg.policy {
            Some(Policy::Star(_)) | None => cfg.policy = Some(Policy::Star(t)),
            Some(other) => {
                return Err(CliError::Usage(format!("--timing {t:?} conflicts with policy `{other}`")));
            }
        }
    }
    if let Some(x) = run.remove {
        cfg.fixed_mode = Some(SyncMode::ArRemoval { x, t_w: 0.0 });
    }
    Ok((world, perturbations, cfg))
}

/// `start:end:step`, endpoints included. Points are computed as
/// `start + i * step` so they do not drift.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("bad grid `{spec}`; expected start:end:step"));
    let parts: Vec<f64> =
        spec.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let [start, end, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0 && start.is_finite() && end >= start) {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}
