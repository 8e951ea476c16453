//! Gradient backends over a batch of initial states.
//!
//! Every backend returns the batch mean of per-sample directions together
//! with work and memory counters. A work unit is one reverse pass through a
//! single operator application.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{FixedPointOperator, Session};
use crate::problems::ControlProblem;
use crate::rollout::{rollout, Grid, RolloutOptions, TrackMode, Trajectory, DENSE_SOLVE_LIMIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Jfb,
    Implicit,
    Unrolled,
    FiniteDiff,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Jfb => "jfb",
            Backend::Implicit => "implicit",
            Backend::Unrolled => "unrolled",
            Backend::FiniteDiff => "finite_diff",
        }
    }

    fn track_mode(self) -> TrackMode {
        match self {
            Backend::Jfb => TrackMode::Jfb,
            Backend::Implicit => TrackMode::Implicit,
            Backend::Unrolled => TrackMode::Unrolled,
            Backend::FiniteDiff => TrackMode::None,
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradOptions {
    pub rollout: RolloutOptions,
    /// Keep per-step `h`, `v` and `w` for every sample.
    pub retain_integrands: bool,
}

/// Per-step quantities of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StepIntegrand {
    pub t: f64,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// `grad_u L + (d f / d u)^T p`, read off the reverse sweep.
    pub h: Vec<f64>,
    /// `M^T (I - dT/du)^{-T} h`.
    pub v: Vec<f64>,
    /// `M^T h`.
    pub w: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub backend: Backend,
    /// Batch mean direction.
    pub direction: Vec<f64>,
    /// Batch mean objective.
    pub loss: f64,
    pub sample_losses: Vec<f64>,
    pub sample_directions: Vec<Vec<f64>>,
    pub work_units: usize,
    /// Largest tape over the batch.
    pub peak_nodes: usize,
    pub solves: usize,
    pub nonconverged: usize,
    pub inner_iterations: usize,
    pub integrands: Option<Vec<Vec<StepIntegrand>>>,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.direction.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn nonconverged_rate(&self) -> f64 {
        if self.solves == 0 {
            0.0
        } else {
            self.nonconverged as f64 / self.solves as f64
        }
    }
}

/// Per-step `h`, `v`, `w` of a swept trajectory.
pub fn integrands(
    op: &dyn FixedPointOperator,
    theta: &[f64],
    traj: &Trajectory,
    control_cotangents: &[Vec<f64>],
) -> Result<Vec<StepIntegrand>> {
    let m = op.control_dim();
    if m > DENSE_SOLVE_LIMIT {
        return Err(Error::ControlDimTooLarge { m, limit: DENSE_SOLVE_LIMIT });
    }
    let mut session = Session::new(op, theta)?;
    let dt = traj.grid.dt();
    let mut out = Vec::with_capacity(control_cotangents.len());
    for (k, cot) in control_cotangents.iter().enumerate() {
        let t = traj.grid.time(k);
        let (z, u) = (&traj.states[k], &traj.fixed_points[k]);
        let h: Vec<f64> = cot.iter().map(|c| c / dt).collect();
        let jac = session.jacobian_u(t, z, u)?;
        let spectral_norm = jac.singular_values().max();
        if !(spectral_norm < 1.0) {
            return Err(Error::SingularJacobian { spectral_norm });
        }
        let y = (DMatrix::identity(m, m) - jac)
            .transpose()
            .lu()
            .solve(&DVector::from_column_slice(&h))
            .ok_or(Error::SingularJacobian { spectral_norm })?;
        let v = session.vjp_theta(t, z, u, y.as_slice())?;
        let w = session.vjp_theta(t, z, u, &h)?;
        out.push(StepIntegrand { t, z: z.clone(), u: u.clone(), h, v, w });
    }
    Ok(out)
}

/// Runs `backend` over `batch` at parameters `theta`.
pub fn estimate(
    backend: Backend,
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    opts: &GradOptions,
) -> Result<GradientEstimate> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if backend == Backend::FiniteDiff {
        let coords: Vec<usize> = (0..theta.len()).collect();
        return finite_diff_estimate(problem, op, theta, batch, grid, &coords, 1e-6, &opts.rollout);
    }
    let p = theta.len();
    let m = op.control_dim();
    let mut est = GradientEstimate {
        backend,
        direction: vec![0.0; p],
        loss: 0.0,
        sample_losses: Vec::with_capacity(batch.len()),
        sample_directions: Vec::with_capacity(batch.len()),
        work_units: 0,
        peak_nodes: 0,
        solves: 0,
        nonconverged: 0,
        inner_iterations: 0,
        integrands: opts.retain_integrands.then(Vec::new),
    };
    for (i, x) in batch.iter().enumerate() {
        let mut sample = || -> Result<()> {
            let mut traj = rollout(problem, op, theta, x, grid, &opts.rollout, backend.track_mode())?;
            let sweep = traj.sweep()?;
            let extra = if backend == Backend::Implicit { m * traj.tracked_applications } else { 0 };
            est.work_units += sweep.work_units + extra;
            est.peak_nodes = est.peak_nodes.max(traj.tape_stats().map_or(0, |s| s.peak_node_count));
            est.solves += traj.solves.len();
            est.nonconverged += traj.nonconverged();
            est.inner_iterations += traj.total_inner_iterations();
            est.sample_losses.push(traj.objective);
            if let Some(all) = est.integrands.as_mut() {
                all.push(integrands(op, theta, &traj, &sweep.control_cotangents)?);
            }
            for (d, g) in est.direction.iter_mut().zip(&sweep.theta_grad) {
                *d += g;
            }
            est.sample_directions.push(sweep.theta_grad);
            Ok(())
        };
        sample().map_err(|e| e.in_sample(i))?;
    }
    let b = batch.len() as f64;
    est.direction.iter_mut().for_each(|d| *d /= b);
    est.loss = est.sample_losses.iter().sum::<f64>() / b;
    if est.direction.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDirection);
    }
    Ok(est)
}

pub fn grad_jfb(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    opts: &GradOptions,
) -> Result<GradientEstimate> {
    estimate(Backend::Jfb, problem, op, theta, batch, grid, opts)
}

pub fn grad_implicit(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    opts: &GradOptions,
) -> Result<GradientEstimate> {
    estimate(Backend::Implicit, problem, op, theta, batch, grid, opts)
}

pub fn grad_unrolled(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    opts: &GradOptions,
) -> Result<GradientEstimate> {
    estimate(Backend::Unrolled, problem, op, theta, batch, grid, opts)
}

/// Mean objective over `batch` without recording a tape.
pub fn batch_objective(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    opts: &RolloutOptions,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, x) in batch.iter().enumerate() {
        total += rollout(problem, op, theta, x, grid, opts, TrackMode::None).map_err(|e| e.in_sample(i))?.objective;
    }
    Ok(total / batch.len() as f64)
}

/// Central differences of `f` at `theta` along the listed coordinates.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let mut x = theta.to_vec();
    coords
        .iter()
        .map(|&i| {
            if i >= theta.len() {
                return Err(Error::Dimension { what: "coordinate", expected: theta.len(), got: i });
            }
            x[i] = theta[i] + step;
            let plus = f(&x)?;
            x[i] = theta[i] - step;
            let minus = f(&x)?;
            x[i] = theta[i];
            Ok((plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Central differences of the batch objective along `coords`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_grad(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    coords: &[usize],
    step: f64,
    opts: &RolloutOptions,
) -> Result<Vec<f64>> {
    central_differences(|th| batch_objective(problem, op, th, batch, grid, opts), theta, coords, step)
}

#[allow(clippy::too_many_arguments)]
fn finite_diff_estimate(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    coords: &[usize],
    step: f64,
    opts: &RolloutOptions,
) -> Result<GradientEstimate> {
    let loss = batch_objective(problem, op, theta, batch, grid, opts)?;
    let direction = finite_diff_grad(problem, op, theta, batch, grid, coords, step, opts)?;
    Ok(GradientEstimate {
        backend: Backend::FiniteDiff,
        direction,
        loss,
        sample_losses: Vec::new(),
        sample_directions: Vec::new(),
        work_units: 0,
        peak_nodes: 0,
        solves: 0,
        nonconverged: 0,
        inner_iterations: 0,
        integrands: None,
    })
}

/// `|a - b| / |b|` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
