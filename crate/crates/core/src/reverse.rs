//! Reverse-time generation: a deterministic ODE integrator and an
//! Euler-Maruyama SDE integrator over singularity-aware time schedules.
//!
//! The ODE `dX/dt = -s(X, t)` is integrated in the substituted variable
//! `tau = log t`, where the `1/t` drift becomes order one; the SDE uses
//! plain Euler-Maruyama on the node intervals. Both march from `T` down to
//! a strictly positive `t_min`.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use std::io::{self, Write};

use crate::score::ScoreField;

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("t_min must be strictly positive, got {0}")]
    NonPositiveTmin(f64),
    #[error("t_min {t_min} must be below the horizon {t_horizon}")]
    TminAboveHorizon { t_min: f64, t_horizon: f64 },
    #[error("schedule needs at least one step")]
    NoSteps,
}

#[derive(Debug, thiserror::Error)]
pub enum IntegrateError {
    #[error("state became non-finite at node {node_index} (t = {time})")]
    NonFinite { node_index: usize, time: f64 },
    #[error("initial state has dimension {found}, score field has {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("ensemble needs at least one trajectory")]
    EmptyEnsemble,
    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<IntegrateError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Geometric,
    LogUniform,
    Uniform,
}

/// Strictly decreasing time nodes from `T` down to `t_min > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule {
    nodes: Vec<f64>,
    spacing: Spacing,
}

impl TimeSchedule {
    pub fn new(
        t_horizon: f64,
        t_min: f64,
        n_steps: usize,
        spacing: Spacing,
    ) -> Result<Self, ScheduleError> {
        if !(t_min > 0.0) {
            return Err(ScheduleError::NonPositiveTmin(t_min));
        }
        if !(t_min < t_horizon) {
            return Err(ScheduleError::TminAboveHorizon { t_min, t_horizon });
        }
        if n_steps == 0 {
            return Err(ScheduleError::NoSteps);
        }
        let mut nodes = Vec::with_capacity(n_steps + 1);
        for k in 0..=n_steps {
            let frac = k as f64 / n_steps as f64;
            let t = match spacing {
                // Identical node sets; geometric is the constant-ratio view of
                // a log-uniform subdivision.
                Spacing::Geometric | Spacing::LogUniform => {
                    t_horizon * (t_min / t_horizon).powf(frac)
                }
                Spacing::Uniform => t_horizon + (t_min - t_horizon) * frac,
            };
            nodes.push(t);
        }
        nodes[0] = t_horizon;
        nodes[n_steps] = t_min;
        Ok(Self { nodes, spacing })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn t_horizon(&self) -> f64 {
        self.nodes[0]
    }

    pub fn t_min(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// A reverse-time path sampled at the schedule nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub epsilon: f64,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn initial_state(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }
}

/// Independent reverse-time trajectories sharing a schedule and epsilon.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub trajectories: Vec<Trajectory>,
}

impl Ensemble {
    pub fn terminal_states(&self) -> Vec<DVector<f64>> {
        self.trajectories
            .iter()
            .map(|t| t.terminal_state().clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Initial condition of an ensemble at `t = T`.
#[derive(Debug, Clone)]
pub enum InitSpec {
    /// `x_T ~ N(mean, sigma^2 I)`.
    Gaussian { mean: DVector<f64>, sigma: f64 },
    /// Explicit initial points, one trajectory each (cycled if n is larger).
    Points(Vec<DVector<f64>>),
}

fn check_dim(field: &dyn ScoreField, x: &DVector<f64>) -> Result<(), IntegrateError> {
    if x.len() != field.dim() {
        return Err(IntegrateError::DimensionMismatch {
            found: x.len(),
            expected: field.dim(),
        });
    }
    Ok(())
}

/// Integrates `dX/dt = -s(X, t)` from the horizon down to `t_min` with
/// classical RK4 in `tau = log t`, one step per node interval.
pub fn integrate_ode(
    field: &dyn ScoreField,
    x_horizon: &DVector<f64>,
    schedule: &TimeSchedule,
) -> Result<Trajectory, IntegrateError> {
    check_dim(field, x_horizon)?;
    let nodes = schedule.nodes();
    let mut states = Vec::with_capacity(nodes.len());
    let mut x = x_horizon.clone();
    states.push(x.clone());
    // In tau = log t the right-hand side is  dX/dtau = -t s(X, t).
    let rhs = |x: &DVector<f64>, tau: f64| -> DVector<f64> {
        let t = tau.exp();
        field.eval(x, t) * (-t)
    };
    for k in 0..nodes.len() - 1 {
        let tau0 = nodes[k].ln();
        let tau1 = nodes[k + 1].ln();
        let h = tau1 - tau0;
        let k1 = rhs(&x, tau0);
        let k2 = rhs(&(&x + &k1 * (0.5 * h)), tau0 + 0.5 * h);
        let k3 = rhs(&(&x + &k2 * (0.5 * h)), tau0 + 0.5 * h);
        let k4 = rhs(&(&x + &k3 * h), tau1);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|c| !c.is_finite()) {
            return Err(IntegrateError::NonFinite {
                node_index: k + 1,
                time: nodes[k + 1],
            });
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: nodes.to_vec(),
        states,
        epsilon: 0.0,
        seed: None,
    })
}

/// Euler-Maruyama step over each node interval, marching backward in time:
/// `X_{t-dt} = X_t + (1+eps) s(X_t, t) dt + sqrt(2 eps dt) xi`.
///
/// With `epsilon = 0` no noise is drawn and this is the explicit Euler
/// discretization of the reverse ODE.
pub fn integrate_sde(
    field: &dyn ScoreField,
    x_horizon: &DVector<f64>,
    schedule: &TimeSchedule,
    epsilon: f64,
    seed: u64,
) -> Result<Trajectory, IntegrateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut traj = integrate_sde_with_rng(field, x_horizon, schedule, epsilon, &mut rng)?;
    traj.seed = Some(seed);
    Ok(traj)
}

fn integrate_sde_with_rng(
    field: &dyn ScoreField,
    x_horizon: &DVector<f64>,
    schedule: &TimeSchedule,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, IntegrateError> {
    check_dim(field, x_horizon)?;
    let nodes = schedule.nodes();
    let d = field.dim();
    let mut states = Vec::with_capacity(nodes.len());
    let mut x = x_horizon.clone();
    states.push(x.clone());
    for k in 0..nodes.len() - 1 {
        let t = nodes[k];
        let dt = t - nodes[k + 1];
        let drift = field.eval(&x, t);
        x += drift * ((1.0 + epsilon) * dt);
        if epsilon > 0.0 {
            let amp = (2.0 * epsilon * dt).sqrt();
            for i in 0..d {
                let xi: f64 = StandardNormal.sample(rng);
                x[i] += amp * xi;
            }
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(IntegrateError::NonFinite {
                node_index: k + 1,
                time: nodes[k + 1],
            });
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        times: nodes.to_vec(),
        states,
        epsilon,
        seed: None,
    })
}

/// Runs `n` independent SDE trajectories in parallel. Each trajectory uses
/// the counter-based RNG stream `i` of the master seed (the initial draw,
/// when Gaussian, comes from the same stream), so results are reproducible
/// and independent of thread scheduling; output order is by index.
pub fn run_ensemble(
    field: &(dyn ScoreField + Sync),
    init: &InitSpec,
    schedule: &TimeSchedule,
    epsilon: f64,
    n: usize,
    seed: u64,
) -> Result<Ensemble, IntegrateError> {
    if n == 0 {
        return Err(IntegrateError::EmptyEnsemble);
    }
    if let InitSpec::Gaussian { mean, .. } = init {
        check_dim(field, mean)?;
    }
    let trajectories: Vec<Trajectory> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x0 = match init {
                InitSpec::Gaussian { mean, sigma } => {
                    let mut x = mean.clone();
                    for c in x.iter_mut() {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        *c += sigma * xi;
                    }
                    x
                }
                InitSpec::Points(points) => points[i % points.len()].clone(),
            };
            let mut traj = integrate_sde_with_rng(field, &x0, schedule, epsilon, &mut rng)
                .map_err(|source| IntegrateError::Trajectory {
                    index: i,
                    source: Box::new(source),
                })?;
            traj.seed = Some(seed);
            Ok(traj)
        })
        .collect::<Result<_, IntegrateError>>()?;
    Ok(Ensemble { trajectories })
}

/// Writes one CSV row per node per trajectory: `traj_id,t,x1..xd`.
pub fn write_trajectories_csv<W: Write>(
    mut out: W,
    trajectories: &[Trajectory],
) -> io::Result<()> {
    let dim = trajectories.first().map_or(0, |t| t.states[0].len());
    write!(out, "traj_id,t")?;
    for i in 1..=dim {
        write!(out, ",x{i}")?;
    }
    writeln!(out)?;
    for (id, traj) in trajectories.iter().enumerate() {
        for (t, state) in traj.times.iter().zip(&traj.states) {
            write!(out, "{id},{t}")?;
            for c in state.iter() {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    traj_id: usize,
    epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    times: &'a [f64],
    states: Vec<Vec<f64>>,
}

/// Writes one JSON object per line per trajectory.
pub fn write_trajectories_jsonl<W: Write>(
    mut out: W,
    trajectories: &[Trajectory],
) -> io::Result<()> {
    for (traj_id, traj) in trajectories.iter().enumerate() {
        let record = TrajectoryRecord {
            traj_id,
            epsilon: traj.epsilon,
            seed: traj.seed,
            times: &traj.times,
            states: traj
                .states
                .iter()
                .map(|s| s.iter().copied().collect())
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    Ok(())
}
