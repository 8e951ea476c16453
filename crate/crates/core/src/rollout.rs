//! Forward simulation with per-step fixed-point controls.
//!
//! A rollout integrates the state forward, solving the inner fixed point at
//! each step, and accumulates `J = sum_k dt L_k + G(z_N)`. Depending on the
//! tracking mode the controls are recorded on a tape so that one reverse
//! sweep yields a parameter gradient:
//!
//! * `Jfb`: the solve is detached and a single operator application at the
//!   fixed point is recorded.
//! * `Implicit`: as `Jfb`, but the recorded application carries the exact
//!   implicit-function correction `(I - dT/du)^{-T}` on its reverse pass.
//! * `Unrolled`: every inner iteration is recorded.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{FixedPointOperator, Session};
use crate::problems::ControlProblem;
use crate::tape::{NodeId, Tape, TapeStats, Tensor};
use crate::valuenet::Binding;

/// Control dimension above which dense implicit solves are refused.
pub const DENSE_SOLVE_LIMIT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub steps: usize,
    pub horizon: f64,
}

impl Grid {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        let g = Self { steps, horizon };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackMode {
    None,
    Jfb,
    Implicit,
    Unrolled,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutOptions {
    /// Feed the recorded operator application a detached copy of the state.
    pub detach_z: bool,
    pub integrator: Integrator,
    /// Maximum number of tape nodes a tracked rollout may hold.
    pub node_budget: Option<usize>,
    /// Adds a fixed offset to the control applied at one step.
    pub perturb: Option<(usize, Vec<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iters: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Tape of a tracked rollout.
pub struct Recording {
    pub tape: Tape,
    pub theta: NodeId,
    /// `z_0..z_N`.
    pub states: Vec<NodeId>,
    /// Applied controls `u_0..u_{N-1}`.
    pub controls: Vec<NodeId>,
    pub objective: NodeId,
}

pub struct Trajectory {
    pub grid: Grid,
    pub mode: TrackMode,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Point each step's recorded application was evaluated at: the inner
    /// fixed point for `Jfb` and `Implicit`, the final iterate otherwise.
    pub fixed_points: Vec<Vec<f64>>,
    pub running_costs: Vec<f64>,
    pub objective: f64,
    /// One entry per inner solve (four per step with RK4).
    pub solves: Vec<SolveStats>,
    /// Tracked operator applications recorded on the tape.
    pub tracked_applications: usize,
    pub recording: Option<Recording>,
}

/// Result of one reverse sweep of a tracked rollout.
#[derive(Clone, Debug)]
pub struct Sweep {
    /// Discrete adjoints `p_0..p_N`: cotangents of `J` at the states.
    pub adjoints: Vec<Vec<f64>>,
    /// Cotangents of `J` at the applied controls, i.e. `dt * h_k`.
    pub control_cotangents: Vec<Vec<f64>>,
    pub theta_grad: Vec<f64>,
    pub work_units: usize,
}

impl Trajectory {
    pub fn nonconverged(&self) -> usize {
        self.solves.iter().filter(|s| !s.converged).count()
    }

    pub fn total_inner_iterations(&self) -> usize {
        self.solves.iter().map(|s| s.iters).sum()
    }

    pub fn tape_stats(&self) -> Option<TapeStats> {
        self.recording.as_ref().map(|r| r.tape.stats())
    }

    /// One reverse sweep from `J`.
    pub fn sweep(&mut self) -> Result<Sweep> {
        let rec = self.recording.as_mut().ok_or(Error::Untracked)?;
        let before = rec.tape.stats().vjp_count;
        let cots = rec.tape.backward(rec.objective, Tensor::scalar(1.0))?;
        let adjoints = rec.states.iter().map(|&n| cots.get_or_zeros(n).into_data()).collect();
        let control_cotangents = rec.controls.iter().map(|&n| cots.get_or_zeros(n).into_data()).collect();
        let theta_grad = cots.get_or_zeros(rec.theta).into_data();
        let work_units = rec.tape.stats().vjp_count - before;
        Ok(Sweep { adjoints, control_cotangents, theta_grad, work_units })
    }

    /// Writes `k, t, z.., u.., L, p..` rows; the last row has no control.
    pub fn write_csv(&self, sweep: Option<&Sweep>, mut out: impl Write) -> Result<()> {
        let n = self.states[0].len();
        let m = self.controls.first().map_or(0, Vec::len);
        let mut header = vec!["k".to_string(), "t".to_string()];
        header.extend((0..n).map(|i| format!("z{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.push("L".into());
        if sweep.is_some() {
            header.extend((0..n).map(|i| format!("p{i}")));
        }
        writeln!(out, "{}", header.join(","))?;
        for (k, z) in self.states.iter().enumerate() {
            let mut row = vec![k.to_string(), format!("{}", self.grid.time(k))];
            row.extend(z.iter().map(|v| format!("{v}")));
            match self.controls.get(k) {
                Some(u) => {
                    row.extend(u.iter().map(|v| format!("{v}")));
                    row.push(format!("{}", self.running_costs[k]));
                }
                None => row.extend(std::iter::repeat_n(String::new(), m + 1)),
            }
            if let Some(s) = sweep {
                row.extend(s.adjoints[k].iter().map(|v| format!("{v}")));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Reverse sweep of a tracked trajectory.
pub fn discrete_adjoint(trajectory: &mut Trajectory) -> Result<Sweep> {
    trajectory.sweep()
}

struct Recorder<'a> {
    op: &'a dyn FixedPointOperator,
    mode: TrackMode,
    opts: &'a RolloutOptions,
    session: Session<'a>,
    tape: Tape,
    binding: Binding,
    solves: Vec<SolveStats>,
    tracked_applications: usize,
    anchor: Vec<f64>,
}

impl Recorder<'_> {
    fn tracked(&self) -> bool {
        self.mode != TrackMode::None
    }

    fn check_budget(&self) -> Result<()> {
        match self.opts.node_budget {
            Some(budget) if self.tape.len() > budget => {
                Err(Error::NodeBudgetExceeded { nodes: self.tape.len(), budget })
            }
            _ => Ok(()),
        }
    }

    fn operator_input(&mut self, z: NodeId) -> NodeId {
        if self.opts.detach_z {
            self.tape.detach(z)
        } else {
            z
        }
    }

    /// Control at `(t, z)` starting from `init` (values, and the tracked node
    /// when unrolling with warm starts).
    fn control(&mut self, t: f64, z: NodeId, init: &[f64], init_node: Option<NodeId>) -> Result<NodeId> {
        let zv = self.tape.value(z).data().to_vec();
        match self.mode {
            TrackMode::None => {
                let r = self.session.solve(t, &zv, init)?;
                self.record_solve(r.iters, r.residual, r.converged);
                self.anchor = r.u_star.clone();
                Ok(self.tape.vector(r.u_star))
            }
            TrackMode::Jfb | TrackMode::Implicit => {
                let r = self.session.solve(t, &zv, init)?;
                self.record_solve(r.iters, r.residual, r.converged);
                let jac = if self.mode == TrackMode::Implicit {
                    Some(self.implicit_adjoint(t, &zv, &r.u_star)?)
                } else {
                    None
                };
                let zin = self.operator_input(z);
                self.anchor = r.u_star.clone();
                let u0 = self.tape.vector(r.u_star);
                let out = self.op.apply(&mut self.tape, &self.binding, t, zin, u0)?;
                self.tape.mark_operator_application(out);
                self.tracked_applications += 1;
                match jac {
                    Some(adj) => Ok(self.tape.linear_adjoint(out, adj)?),
                    None => Ok(out),
                }
            }
            TrackMode::Unrolled => {
                let cfg = self.op.config().clone();
                let zin = self.operator_input(z);
                let mut u = match init_node {
                    Some(n) => n,
                    None => self.tape.vector(init.to_vec()),
                };
                let mut residual = f64::INFINITY;
                let mut iters = 0;
                while iters < cfg.max_iter {
                    let prev = self.tape.value(u).data().to_vec();
                    let next = self.op.apply(&mut self.tape, &self.binding, t, zin, u)?;
                    self.tape.mark_operator_application(next);
                    self.tracked_applications += 1;
                    iters += 1;
                    self.check_budget()?;
                    let nv = self.tape.value(next).data();
                    if nv.iter().any(|v| !v.is_finite()) {
                        return Err(Error::FixedPointNonFinite { t, iteration: iters, z: zv });
                    }
                    residual = nv.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    u = next;
                    if residual <= cfg.tol {
                        break;
                    }
                }
                self.record_solve(iters, residual, residual <= cfg.tol);
                self.anchor = self.tape.value(u).data().to_vec();
                Ok(u)
            }
        }
    }

    fn record_solve(&mut self, iters: usize, residual: f64, converged: bool) {
        self.solves.push(SolveStats { iters, residual, converged });
    }

    /// `(I - dT/du)^{-T}` at the fixed point.
    fn implicit_adjoint(&mut self, t: f64, z: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
        let m = u.len();
        if m > DENSE_SOLVE_LIMIT {
            return Err(Error::ControlDimTooLarge { m, limit: DENSE_SOLVE_LIMIT });
        }
        let jac = self.session.jacobian_u(t, z, u)?;
        let spectral_norm = jac.singular_values().max();
        if !(spectral_norm < 1.0) {
            return Err(Error::SingularJacobian { spectral_norm });
        }
        let system = DMatrix::identity(m, m) - jac;
        let inv = system.try_inverse().ok_or(Error::SingularJacobian { spectral_norm })?;
        Ok(inv.transpose())
    }

    fn perturbed(&mut self, k: usize, u: NodeId) -> Result<NodeId> {
        match &self.opts.perturb {
            Some((step, delta)) if *step == k => {
                let d = self.tape.vector(delta.clone());
                Ok(self.tape.add(u, d)?)
            }
            _ => Ok(u),
        }
    }

    /// `z + c * f`.
    fn axpy(&mut self, z: NodeId, c: f64, f: NodeId) -> Result<NodeId> {
        let s = self.tape.scale(f, c);
        Ok(self.tape.add(z, s)?)
    }
}

/// Simulates from `x` over `grid` with controls from `op` at parameters
/// `theta`.
pub fn rollout(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    x: &[f64],
    grid: Grid,
    opts: &RolloutOptions,
    mode: TrackMode,
) -> Result<Trajectory> {
    grid.validate()?;
    if x.len() != problem.state_dim() || op.state_dim() != problem.state_dim() {
        return Err(Error::Dimension { what: "initial state", expected: problem.state_dim(), got: x.len() });
    }
    if op.control_dim() != problem.control_dim() {
        return Err(Error::Dimension {
            what: "operator control",
            expected: problem.control_dim(),
            got: op.control_dim(),
        });
    }
    let session = Session::new(op, theta)?;
    let mut tape = Tape::new();
    let theta_node = if mode == TrackMode::None {
        tape.constant(Tensor::vector(theta.to_vec()))
    } else {
        tape.leaf(Tensor::vector(theta.to_vec()))
    };
    let binding = op.bind(&mut tape, theta_node)?;
    let base = tape.checkpoint();
    let mut rec = Recorder {
        op,
        mode,
        opts,
        session,
        tape,
        binding,
        solves: Vec::new(),
        tracked_applications: 0,
        anchor: Vec::new(),
    };

    let dt = grid.dt();
    let warm = op.config().warm_start;
    let mut z = if rec.tracked() { rec.tape.leaf(Tensor::vector(x.to_vec())) } else { rec.tape.vector(x.to_vec()) };
    let mut states = vec![x.to_vec()];
    let mut controls = Vec::with_capacity(grid.steps);
    let mut fixed_points = Vec::with_capacity(grid.steps);
    let mut running_costs = Vec::with_capacity(grid.steps);
    let mut state_nodes = vec![z];
    let mut control_nodes = Vec::with_capacity(grid.steps);
    let mut objective = 0.0;
    let mut objective_node: Option<NodeId> = None;
    let mut prev: Option<(Vec<f64>, NodeId)> = None;

    for k in 0..grid.steps {
        if !rec.tracked() {
            rec.tape.truncate(base);
            z = rec.tape.vector(states[k].clone());
        }
        let t = grid.time(k);
        let (init, init_node) = match (&prev, warm) {
            (Some((u, node)), true) => (u.clone(), Some(*node)),
            _ => (op.initial_control(&states[k]), None),
        };
        let init_node = if mode == TrackMode::Unrolled { init_node } else { None };
        let u = rec.control(t, z, &init, init_node)?;
        fixed_points.push(std::mem::take(&mut rec.anchor));
        let u = rec.perturbed(k, u)?;
        let uv = rec.tape.value(u).data().to_vec();

        let l = problem.running_cost(&mut rec.tape, t, z, u)?;
        let next = match opts.integrator {
            Integrator::Euler => {
                let f = problem.dynamics(&mut rec.tape, t, z, u)?;
                rec.axpy(z, dt, f)?
            }
            Integrator::Rk4 => {
                let th = t + 0.5 * dt;
                let k1 = problem.dynamics(&mut rec.tape, t, z, u)?;
                let z2 = rec.axpy(z, 0.5 * dt, k1)?;
                let u2 = rec.control(th, z2, &uv, Some(u))?;
                let k2 = problem.dynamics(&mut rec.tape, th, z2, u2)?;
                let z3 = rec.axpy(z, 0.5 * dt, k2)?;
                let u3 = rec.control(th, z3, &uv, Some(u))?;
                let k3 = problem.dynamics(&mut rec.tape, th, z3, u3)?;
                let z4 = rec.axpy(z, dt, k3)?;
                let u4 = rec.control(t + dt, z4, &uv, Some(u))?;
                let k4 = problem.dynamics(&mut rec.tape, t + dt, z4, u4)?;
                let a = rec.tape.add(k1, k4)?;
                let b = rec.tape.add(k2, k3)?;
                let b = rec.tape.scale(b, 2.0);
                let s = rec.tape.add(a, b)?;
                rec.axpy(z, dt / 6.0, s)?
            }
        };
        let zv = rec.tape.value(next).data().to_vec();
        if zv.iter().any(|v| !v.is_finite()) {
            let norm = zv.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            return Err(Error::NonFiniteState { step: k + 1, norm });
        }
        let lv = rec.tape.value(l).item();
        objective += dt * lv;
        if rec.tracked() {
            let w = rec.tape.scale(l, dt);
            objective_node = Some(match objective_node {
                Some(acc) => rec.tape.add(acc, w)?,
                None => w,
            });
        }
        rec.check_budget()?;

        running_costs.push(lv);
        controls.push(uv.clone());
        states.push(zv);
        prev = Some((uv, u));
        control_nodes.push(u);
        z = next;
        state_nodes.push(z);
    }

    let t_end = grid.horizon;
    if !rec.tracked() {
        rec.tape.truncate(base);
        z = rec.tape.vector(states[grid.steps].clone());
    }
    let g = problem.terminal_cost(&mut rec.tape, t_end, z)?;
    objective += rec.tape.value(g).item();

    let recording = if rec.tracked() {
        let total = match objective_node {
            Some(acc) => rec.tape.add(acc, g)?,
            None => g,
        };
        Some(Recording {
            tape: rec.tape,
            theta: theta_node,
            states: state_nodes,
            controls: control_nodes,
            objective: total,
        })
    } else {
        None
    };

    Ok(Trajectory {
        grid,
        mode,
        states,
        controls,
        fixed_points,
        running_costs,
        objective,
        solves: rec.solves,
        tracked_applications: rec.tracked_applications,
        recording,
    })
}
