use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, positive, ControlProblem};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Tensor};
use crate::valuenet::QuadraticValue;

/// A matrix given either as a multiple of the identity or by rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    /// Scalars become `k * I` (rectangular identity for non-square sizes).
    pub fn build(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(k) => Ok(DMatrix::identity(rows, cols) * *k),
            MatrixSpec::Rows(r) => {
                if r.len() != rows || r.iter().any(|row| row.len() != cols) {
                    return Err(Error::InvalidParameter(format!("matrix `{name}` must be {rows}x{cols}")));
                }
                Ok(DMatrix::from_fn(rows, cols, |i, j| r[i][j]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrParams {
    pub n: usize,
    pub m: usize,
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub q_t: MatrixSpec,
    /// Optional box `|u_i| <= u_max`.
    pub u_max: Option<f64>,
    /// Initial states are uniform in `[-x0_range, x0_range]^n`.
    pub x0_range: f64,
}

impl Default for LqrParams {
    fn default() -> Self {
        Self {
            n: 1,
            m: 1,
            a: MatrixSpec::Scalar(0.0),
            b: MatrixSpec::Scalar(1.0),
            q: MatrixSpec::Scalar(0.0),
            r: MatrixSpec::Scalar(1.0),
            q_t: MatrixSpec::Scalar(1.0),
            u_max: None,
            x0_range: 1.0,
        }
    }
}

/// `f = A z + B u`, `L = 1/2 z^T Q z + 1/2 u^T R u`, `G = 1/2 z^T Q_T z`.
/// Several agents give a block-diagonal system.
#[derive(Clone, Debug)]
pub struct Lqr {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_t: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    u_max: Option<f64>,
    x0_range: f64,
    agents: usize,
}

fn block_diag(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * copies, c * copies);
    for k in 0..copies {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

impl Lqr {
    pub fn new(params: LqrParams, agents: usize) -> Result<Self> {
        let (n, m) = (params.n, params.m);
        if n == 0 || m == 0 {
            return Err(Error::InvalidParameter("lqr needs n >= 1 and m >= 1".into()));
        }
        positive("x0_range", params.x0_range)?;
        if let Some(b) = params.u_max {
            positive("u_max", b)?;
        }
        let a = params.a.build("a", n, n)?;
        let b = params.b.build("b", n, m)?;
        let q = params.q.build("q", n, n)?;
        let r = params.r.build("r", m, m)?;
        let q_t = params.q_t.build("q_t", n, n)?;
        Self::from_matrices(a, b, q, r, q_t, agents, params.u_max, params.x0_range)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_matrices(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_t: DMatrix<f64>,
        agents: usize,
        u_max: Option<f64>,
        x0_range: f64,
    ) -> Result<Self> {
        check_shapes(&a, &b, &q, &r, &q_t)?;
        let r_inv = r.clone().cholesky().ok_or(Error::NotPositiveDefinite("R"))?.inverse();
        Ok(Self {
            a: block_diag(&a, agents),
            b: block_diag(&b, agents),
            q: block_diag(&q, agents),
            r: block_diag(&r, agents),
            q_t: block_diag(&q_t, agents),
            r_inv: block_diag(&r_inv, agents),
            u_max,
            x0_range,
            agents,
        })
    }

    fn constant(tape: &mut Tape, m: &DMatrix<f64>) -> NodeId {
        tape.constant(Tensor::from_matrix(m))
    }

    fn half_quadratic(tape: &mut Tape, m: &DMatrix<f64>, v: NodeId) -> Result<NodeId> {
        let mn = Self::constant(tape, m);
        let mv = tape.matmul(mn, v)?;
        let s = tape.dot(v, mv)?;
        Ok(tape.scale(s, 0.5))
    }

    pub fn u_max(&self) -> Option<f64> {
        self.u_max
    }

    /// Riccati solution of this system on a uniform grid.
    pub fn riccati(&self, horizon: f64, steps: usize) -> Result<RiccatiSolution> {
        lqr_riccati(&self.a, &self.b, &self.q, &self.r, &self.q_t, horizon, steps)
    }
}

fn check_shapes(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_t: &DMatrix<f64>,
) -> Result<()> {
    let n = a.nrows();
    check_len("A columns", n, a.ncols())?;
    check_len("B rows", n, b.nrows())?;
    let m = b.ncols();
    check_len("Q rows", n, q.nrows())?;
    check_len("Q columns", n, q.ncols())?;
    check_len("Q_T rows", n, q_t.nrows())?;
    check_len("Q_T columns", n, q_t.ncols())?;
    check_len("R rows", m, r.nrows())?;
    check_len("R columns", m, r.ncols())?;
    Ok(())
}

impl ControlProblem for Lqr {
    fn name(&self) -> &'static str {
        "lqr"
    }

    fn agents(&self) -> usize {
        self.agents
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn dynamics(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let a = Self::constant(tape, &self.a);
        let b = Self::constant(tape, &self.b);
        let az = tape.matmul(a, z)?;
        let bu = tape.matmul(b, u)?;
        Ok(tape.add(az, bu)?)
    }

    fn running_cost(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let lz = Self::half_quadratic(tape, &self.q, z)?;
        let lu = Self::half_quadratic(tape, &self.r, u)?;
        Ok(tape.add(lz, lu)?)
    }

    fn terminal_cost(&self, tape: &mut Tape, _t: f64, z: NodeId) -> Result<NodeId> {
        Self::half_quadratic(tape, &self.q_t, z)
    }

    fn hamiltonian_grad_u(&self, tape: &mut Tape, _t: f64, _z: NodeId, u: NodeId, p: NodeId) -> Result<NodeId> {
        let r = Self::constant(tape, &self.r);
        let b = Self::constant(tape, &self.b);
        let ru = tape.matmul(r, u)?;
        let btp = tape.matmul_t(b, p)?;
        let s = tape.add(ru, btp)?;
        Ok(tape.neg(s))
    }

    fn project(&self, tape: &mut Tape, _z: NodeId, u: NodeId) -> Result<NodeId> {
        match self.u_max {
            Some(b) => Ok(tape.clamp(u, -b, b)?),
            None => Ok(u),
        }
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let r = self.x0_range;
        (0..self.state_dim()).map(|_| rng.gen_range(-r..=r)).collect()
    }

    fn check_admissible(&self, _z: &[f64], u: &[f64]) -> Result<()> {
        if let Some(b) = self.u_max {
            if let Some((index, &value)) = u.iter().enumerate().find(|(_, v)| v.abs() > b) {
                return Err(Error::Domain { index, value, bound: b });
            }
        }
        Ok(())
    }

    /// `u* = -R^{-1} B^T p` (clipped to the box when one is set).
    fn exact_maximizer(&self, _t: f64, _z: &[f64], p: &[f64]) -> Option<Vec<f64>> {
        let p = nalgebra::DVector::from_column_slice(p);
        let u = -(&self.r_inv * self.b.transpose() * p);
        let b = self.u_max.unwrap_or(f64::INFINITY);
        Some(u.iter().map(|v| v.clamp(-b, b)).collect())
    }
}

/// Discrete Riccati recursion for the Euler discretization of an LQR
/// problem on `steps` uniform steps.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub dt: f64,
    /// Feedback gains: the discrete-optimal control is `u_k = -K_k z_k`.
    pub gains: Vec<DMatrix<f64>>,
    /// Value matrices `P_0..P_N`; the optimal cost-to-go at step `k` is
    /// `1/2 z^T P_k z`.
    pub values: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// Optimal discrete cost from `x` at time zero.
    pub fn cost(&self, x: &[f64]) -> f64 {
        let x = nalgebra::DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.values[0] * &x))
    }

    /// Value function `1/2 z^T P_k z` on the same grid.
    pub fn value_function(&self) -> QuadraticValue {
        QuadraticValue::new(self.dt, self.values.clone()).expect("grid is nonempty")
    }
}

/// Solves the discrete Riccati recursion of
/// `z_{k+1} = (I + dt A) z_k + dt B u_k` with stage cost
/// `dt (1/2 z^T Q z + 1/2 u^T R u)` and terminal cost `1/2 z^T Q_T z`.
pub fn lqr_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_t: &DMatrix<f64>,
    horizon: f64,
    steps: usize,
) -> Result<RiccatiSolution> {
    check_shapes(a, b, q, r, q_t)?;
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    positive("horizon", horizon)?;
    r.clone().cholesky().ok_or(Error::NotPositiveDefinite("R"))?;
    for (name, m) in [("Q", q), ("Q_T", q_t)] {
        let sym = (m + m.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        if (m - &sym).norm() > 1e-12 * (1.0 + m.norm()) || min_eig < -1e-12 * (1.0 + m.norm()) {
            return Err(Error::InvalidParameter(format!("{name} must be symmetric positive semidefinite")));
        }
    }
    let n = a.nrows();
    let dt = horizon / steps as f64;
    let ad = DMatrix::identity(n, n) + a * dt;
    let bd = b * dt;
    let qd = q * dt;
    let rd = r * dt;

    let mut values = vec![DMatrix::zeros(n, n); steps + 1];
    let mut gains = vec![DMatrix::zeros(b.ncols(), n); steps];
    values[steps] = q_t.clone();
    for k in (0..steps).rev() {
        let next = &values[k + 1];
        let btp = bd.transpose() * next;
        let s = &rd + &btp * &bd;
        let chol = s.cholesky().ok_or(Error::NotPositiveDefinite("R + B^T P B"))?;
        let gain = chol.solve(&(&btp * &ad));
        let p = &qd + ad.transpose() * next * (&ad - &bd * &gain);
        values[k] = (&p + p.transpose()) * 0.5;
        gains[k] = gain;
    }
    Ok(RiccatiSolution { dt, gains, values })
}
