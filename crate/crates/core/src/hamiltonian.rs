//! The fixed-point operator `T(u) = proj(u + eta * grad_u H)` and its inner
//! solver.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::ControlProblem;
use crate::tape::{NodeId, Tape, Tensor};
use crate::valuenet::{Binding, ValueFunction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    /// Inner ascent step.
    pub eta: f64,
    /// Stopping tolerance on the sup-norm of the last update.
    pub tol: f64,
    pub max_iter: usize,
    /// Start each inner solve from the previous step's fixed point.
    pub warm_start: bool,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self { eta: 0.01, tol: 1e-6, max_iter: 500, warm_start: true }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointResult {
    pub u_star: Vec<f64>,
    /// Operator applications performed.
    pub iters: usize,
    /// Sup-norm of the last update.
    pub residual: f64,
    pub converged: bool,
}

/// A parameterized operator whose fixed point in `u` defines the control.
pub trait FixedPointOperator: Send + Sync {
    fn state_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    fn param_count(&self) -> usize;

    fn config(&self) -> &OperatorConfig;

    fn bind(&self, tape: &mut Tape, theta: NodeId) -> Result<Binding>;

    fn apply(&self, tape: &mut Tape, binding: &Binding, t: f64, z: NodeId, u: NodeId) -> Result<NodeId>;

    fn initial_control(&self, z: &[f64]) -> Vec<f64>;
}

/// `T(u) = proj(u + eta * grad_u H(t, z, u, grad_z phi(t, z)))`.
#[derive(Clone, Copy)]
pub struct HamiltonianOperator<'a> {
    pub problem: &'a dyn ControlProblem,
    pub value: &'a dyn ValueFunction,
    pub config: &'a OperatorConfig,
}

impl<'a> HamiltonianOperator<'a> {
    pub fn new(
        problem: &'a dyn ControlProblem,
        value: &'a dyn ValueFunction,
        config: &'a OperatorConfig,
    ) -> Result<Self> {
        config.validate()?;
        if problem.state_dim() != value.state_dim() {
            return Err(Error::Dimension {
                what: "value function state",
                expected: problem.state_dim(),
                got: value.state_dim(),
            });
        }
        Ok(Self { problem, value, config })
    }

    /// `grad_u H` with the costate taken from the value function.
    pub fn grad_u_h(&self, tape: &mut Tape, binding: &Binding, t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let p = self.value.grad_z(tape, binding, t, z)?;
        self.problem.hamiltonian_grad_u(tape, t, z, u, p)
    }
}

impl FixedPointOperator for HamiltonianOperator<'_> {
    fn state_dim(&self) -> usize {
        self.problem.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.problem.control_dim()
    }

    fn param_count(&self) -> usize {
        self.value.param_count()
    }

    fn config(&self) -> &OperatorConfig {
        self.config
    }

    fn bind(&self, tape: &mut Tape, theta: NodeId) -> Result<Binding> {
        self.value.bind(tape, theta)
    }

    fn apply(&self, tape: &mut Tape, binding: &Binding, t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let g = self.grad_u_h(tape, binding, t, z, u)?;
        let step = tape.scale(g, self.config.eta);
        let moved = tape.add(u, step)?;
        self.problem.project(tape, z, moved)
    }

    fn initial_control(&self, z: &[f64]) -> Vec<f64> {
        self.problem.initial_control(z)
    }
}

/// Scratch tape with the parameters bound once; every evaluation rewinds to
/// that point, so inner iterations never accumulate.
pub struct Session<'o> {
    op: &'o dyn FixedPointOperator,
    tape: Tape,
    theta: NodeId,
    binding: Binding,
    base: usize,
}

impl<'o> Session<'o> {
    pub fn new(op: &'o dyn FixedPointOperator, theta: &[f64]) -> Result<Self> {
        if theta.len() != op.param_count() {
            return Err(Error::Dimension { what: "parameter vector", expected: op.param_count(), got: theta.len() });
        }
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(theta.to_vec()));
        let binding = op.bind(&mut tape, theta)?;
        let base = tape.checkpoint();
        Ok(Self { op, tape, theta, binding, base })
    }

    pub fn operator(&self) -> &'o dyn FixedPointOperator {
        self.op
    }

    fn check(&self, z: &[f64], u: &[f64]) -> Result<()> {
        if z.len() != self.op.state_dim() {
            return Err(Error::Dimension { what: "state", expected: self.op.state_dim(), got: z.len() });
        }
        if u.len() != self.op.control_dim() {
            return Err(Error::Dimension { what: "control", expected: self.op.control_dim(), got: u.len() });
        }
        Ok(())
    }

    /// `T(u)` as plain numbers.
    pub fn apply(&mut self, t: f64, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check(z, u)?;
        self.tape.truncate(self.base);
        let zn = self.tape.vector(z.to_vec());
        let un = self.tape.vector(u.to_vec());
        let out = self.op.apply(&mut self.tape, &self.binding, t, zn, un)?;
        Ok(self.tape.value(out).data().to_vec())
    }

    /// Iterates `u <- T(u)` from `u_init` until the update is below `tol`
    /// or `max_iter` applications have been made.
    pub fn solve(&mut self, t: f64, z: &[f64], u_init: &[f64]) -> Result<FixedPointResult> {
        let cfg = self.op.config().clone();
        let mut u = u_init.to_vec();
        let mut residual = f64::INFINITY;
        for iter in 1..=cfg.max_iter {
            let next = self.apply(t, z, &u)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::FixedPointNonFinite { t, iteration: iter, z: z.to_vec() });
            }
            residual = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            u = next;
            if residual <= cfg.tol {
                return Ok(FixedPointResult { u_star: u, iters: iter, residual, converged: true });
            }
        }
        Ok(FixedPointResult { u_star: u, iters: cfg.max_iter, residual, converged: false })
    }

    /// Records `T` at `(t, z, u)` with `u` as a leaf; returns `(u, T(u))`.
    fn record(&mut self, t: f64, z: &[f64], u: &[f64]) -> Result<(NodeId, NodeId)> {
        self.check(z, u)?;
        self.tape.truncate(self.base);
        let zn = self.tape.vector(z.to_vec());
        let un = self.tape.leaf(Tensor::vector(u.to_vec()));
        let out = self.op.apply(&mut self.tape, &self.binding, t, zn, un)?;
        Ok((un, out))
    }

    /// Dense `dT/du` (m x m), one reverse sweep per row.
    pub fn jacobian_u(&mut self, t: f64, z: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
        let (un, out) = self.record(t, z, u)?;
        let m = u.len();
        let mut jac = DMatrix::zeros(m, m);
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let row = self.tape.vjp(out, &[un], Tensor::vector(e))?.remove(0);
            jac.row_mut(i).copy_from_slice(row.data());
        }
        Ok(jac)
    }

    /// Dense `M = dT/dtheta` (m x p), one reverse sweep per row.
    pub fn jacobian_theta(&mut self, t: f64, z: &[f64], u: &[f64]) -> Result<DMatrix<f64>> {
        let (_, out) = self.record(t, z, u)?;
        let (m, p) = (u.len(), self.op.param_count());
        let mut jac = DMatrix::zeros(m, p);
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let row = self.tape.vjp(out, &[self.theta], Tensor::vector(e))?.remove(0);
            jac.row_mut(i).copy_from_slice(row.data());
        }
        Ok(jac)
    }

    /// `M^T c` for a cotangent `c` on the operator output.
    pub fn vjp_theta(&mut self, t: f64, z: &[f64], u: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        let (_, out) = self.record(t, z, u)?;
        let g = self.tape.vjp(out, &[self.theta], Tensor::vector(c.to_vec()))?.remove(0);
        Ok(g.into_data())
    }
}

/// One-shot fixed-point solve at parameters `theta`.
pub fn solve_fixed_point(
    op: &dyn FixedPointOperator,
    theta: &[f64],
    t: f64,
    z: &[f64],
    u_init: &[f64],
) -> Result<FixedPointResult> {
    Session::new(op, theta)?.solve(t, z, u_init)
}
