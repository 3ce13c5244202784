//! Scheduled CPU and bandwidth throttles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    CpuThrottle,
    BwThrottle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PerturbTarget {
    /// Scales the server's capacity.
    Server { server: String },
    /// Scales one worker's demand cap.
    Task { job: String, worker: usize },
}

/// On/off switching inside the window with exponentially distributed
/// durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    pub mean_on: f64,
    pub mean_off: f64,
    #[serde(default = "yes")]
    pub start_on: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub target: PerturbTarget,
    /// Remaining fraction of capacity or demand, in (0, 1].
    pub fraction: f64,
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markov: Option<MarkovSpec>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerturbError {
    #[error("perturbation {index}: fraction {fraction} outside (0, 1]")]
    Fraction { index: usize, fraction: f64 },
    #[error("perturbation {index}: window [{start}, {end}) is empty or invalid")]
    Window { index: usize, start: f64, end: f64 },
    #[error("perturbation {index}: unknown server `{server}`")]
    UnknownServer { index: usize, server: String },
    #[error("perturbation {index}: unknown job `{job}`")]
    UnknownJob { index: usize, job: String },
    #[error("perturbation {index}: job `{job}` has no worker {worker}")]
    UnknownWorker { index: usize, job: String, worker: usize },
    #[error("perturbation {index}: markov means must be positive")]
    Markov { index: usize },
}

/// Where a window applies, by index into the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolved {
    Server(usize),
    Task { job: usize, worker: usize },
}

/// One concrete throttle interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub kind: PerturbKind,
    pub target: Resolved,
    pub fraction: f64,
    pub start: f64,
    pub end: f64,
}

pub fn validate_perturbations(perturbations: &[Perturbation], world: &World) -> Result<(), Vec<PerturbError>> {
    let errs: Vec<PerturbError> =
        perturbations.iter().enumerate().filter_map(|(i, p)| resolve(i, p, world).err()).collect();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

fn resolve(index: usize, p: &Perturbation, world: &World) -> Result<Resolved, PerturbError> {
    if !(p.fraction > 0.0 && p.fraction <= 1.0) {
        return Err(PerturbError::Fraction { index, fraction: p.fraction });
    }
    if !(p.start.is_finite() && p.start >= 0.0 && p.end > p.start) {
        return Err(PerturbError::Window { index, start: p.start, end: p.end });
    }
    if let Some(m) = &p.markov {
        if !(m.mean_on > 0.0 && m.mean_off > 0.0 && m.mean_on.is_finite() && m.mean_off.is_finite()) {
            return Err(PerturbError::Markov { index });
        }
    }
    match &p.target {
        PerturbTarget::Server { server } => world
            .servers()
            .iter()
            .position(|s| &s.id == server)
            .map(Resolved::Server)
            .ok_or_else(|| PerturbError::UnknownServer { index, server: server.clone() }),
        PerturbTarget::Task { job, worker } => {
            let j = world
                .jobs()
                .iter()
                .position(|s| &s.id == job)
                .ok_or_else(|| PerturbError::UnknownJob { index, job: job.clone() })?;
            if *worker >= world.jobs()[j].num_workers {
                return Err(PerturbError::UnknownWorker { index, job: job.clone(), worker: *worker });
            }
            Ok(Resolved::Task { job: j, worker: *worker })
        }
    }
}

/// Concrete windows, with Markov-switched perturbations realized from
/// `seed` (one independent stream per perturbation).
pub fn expand(perturbations: &[Perturbation], world: &World, seed: u64) -> Result<Vec<Window>, Vec<PerturbError>> {
    validate_perturbations(perturbations, world)?;
    let mut out = Vec::new();
    for (i, p) in perturbations.iter().enumerate() {
        let target = resolve(i, p, world).expect("validated");
        let window = |start: f64, end: f64| Window { kind: p.kind, target, fraction: p.fraction, start, end };
        match &p.markov {
            None => out.push(window(p.start, p.end)),
            Some(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let on = Exp::new(1.0 / m.mean_on).expect("positive mean");
                let off = Exp::new(1.0 / m.mean_off).expect("positive mean");
                let (mut t, mut active) = (p.start, m.start_on);
                while t < p.end {
                    let d = if active { on.sample(&mut rng) } else { off.sample(&mut rng) };
                    let next = (t + d).min(p.end);
                    if active && next > t {
                        out.push(window(t, next));
                    }
                    t = next;
                    active = !active;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixtures, validate_world};

    fn world() -> World {
        validate_world(fixtures::world()).unwrap()
    }

    fn throttle(target: PerturbTarget, fraction: f64) -> Perturbation {
        Perturbation { kind: PerturbKind::CpuThrottle, target, fraction, start: 1.0, end: 2.0, markov: None }
    }

    #[test]
    fn validation() {
        let w = world();
        let ok = throttle(PerturbTarget::Task { job: "j0".into(), worker: 1 }, 0.75);
        assert!(validate_perturbations(std::slice::from_ref(&ok), &w).is_ok());
        let errs = validate_perturbations(
            &[
                Perturbation { fraction: 0.0, ..ok.clone() },
                Perturbation { start: 3.0, ..ok.clone() },
                throttle(PerturbTarget::Server { server: "nope".into() }, 0.5),
                throttle(PerturbTarget::Task { job: "j0".into(), worker: 9 }, 0.5),
            ],
            &w,
        )
        .unwrap_err();
        assert_eq!(errs.len(), 4);
    }

    #[test]
    fn markov_windows_are_seeded_and_inside() {
        let w = world();
        let p = Perturbation {
            markov: Some(MarkovSpec { mean_on: 2.0, mean_off: 3.0, start_on: true }),
            start: 10.0,
            end: 100.0,
            ..throttle(PerturbTarget::Server { server: "s1".into() }, 0.5)
        };
        let a = expand(std::slice::from_ref(&p), &w, 7).unwrap();
        assert_eq!(a, expand(std::slice::from_ref(&p), &w, 7).unwrap());
        assert_ne!(a, expand(&[p], &w, 8).unwrap());
        assert!(a.len() > 3);
        assert_eq!(a[0].start, 10.0);
        for x in a.windows(2) {
            assert!(x[0].end < x[1].start);
        }
        assert!(a.iter().all(|x| x.start >= 10.0 && x.end <= 100.0 && x.target == Resolved::Server(1)));
    }
}
