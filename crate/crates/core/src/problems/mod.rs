//! Control problem suite.
//!
//! Every problem is stated in minimization form: a running cost `L`, a
//! terminal cost `G` and dynamics `f`, all built from tape primitives. The
//! control gradient of the generalized Hamiltonian
//! `H(t, z, u, p) = -<p, f(t, z, u)> - L(t, z, u)` is written out by hand
//! for each problem so that it stays differentiable in `p`, `z` and `u`.

mod bicycle;
mod consumption;
mod lqr;
mod quadrotor;

pub use bicycle::{Bicycle, BicycleParams};
pub use consumption::{consumption_foc_residual, Consumption, ConsumptionParams};
pub use lqr::{lqr_riccati, Lqr, LqrParams, MatrixSpec, RiccatiSolution};
pub use quadrotor::{Quadrotor, QuadrotorParams};

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

pub trait ControlProblem: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn agents(&self) -> usize;

    fn state_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    fn dynamics(&self, tape: &mut Tape, t: f64, z: NodeId, u: NodeId) -> Result<NodeId>;

    fn running_cost(&self, tape: &mut Tape, t: f64, z: NodeId, u: NodeId) -> Result<NodeId>;

    /// Terminal cost at final time `t`.
    fn terminal_cost(&self, tape: &mut Tape, t: f64, z: NodeId) -> Result<NodeId>;

    /// `grad_u H(t, z, u, p) = -(grad_u L + (d f / d u)^T p)`.
    fn hamiltonian_grad_u(&self, tape: &mut Tape, t: f64, z: NodeId, u: NodeId, p: NodeId) -> Result<NodeId>;

    /// Projection onto the admissible control set, which may depend on the
    /// state.
    fn project(&self, _tape: &mut Tape, _z: NodeId, u: NodeId) -> Result<NodeId> {
        Ok(u)
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Starting point of the inner solve at the first time step.
    fn initial_control(&self, _z: &[f64]) -> Vec<f64> {
        vec![0.0; self.control_dim()]
    }

    fn check_admissible(&self, _z: &[f64], _u: &[f64]) -> Result<()> {
        Ok(())
    }

    /// Closed-form maximizer of the Hamiltonian, when one exists.
    fn exact_maximizer(&self, _t: f64, _z: &[f64], _p: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Builds a problem by name. `params` holds problem-specific keys; unknown
/// keys are rejected.
pub fn make_problem(name: &str, agents: usize, params: &toml::Table) -> Result<Box<dyn ControlProblem>> {
    if agents == 0 {
        return Err(Error::InvalidParameter("agents must be at least 1".into()));
    }
    Ok(match name {
        "lqr" => Box::new(Lqr::new(parse_params(params)?, agents)?),
        "quadrotor" => Box::new(Quadrotor::new(parse_params(params)?, agents)?),
        "bicycle" => Box::new(Bicycle::new(parse_params(params)?, agents)?),
        "consumption" => Box::new(Consumption::new(parse_params(params)?, agents)?),
        other => return Err(Error::UnknownProblem(other.to_string())),
    })
}

pub const PROBLEM_NAMES: [&str; 4] = ["lqr", "quadrotor", "bicycle", "consumption"];

/// Typed parameters from a `problem.params` table.
pub fn parse_params<P: DeserializeOwned>(params: &toml::Table) -> Result<P> {
    let value = toml::Value::Table(params.clone());
    serde_path_to_error::deserialize(value)
        .map_err(|e| Error::Config { path: format!("problem.params.{}", e.path()), message: e.inner().to_string() })
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be nonnegative, got {v}")))
    }
}

/// Scalar nodes for each entry of a vector node.
fn components(tape: &mut Tape, v: NodeId) -> Result<Vec<NodeId>> {
    (0..tape.shape(v).numel()).map(|i| tape.index(v, i).map_err(Error::from)).collect()
}

/// `c * sum_{i<j} exp(-|pos_i - pos_j|^2 / sigma^2)` over agent positions
/// `z[a * stride .. a * stride + dim]`.
fn interaction_cost(
    tape: &mut Tape,
    z: NodeId,
    agents: usize,
    stride: usize,
    dim: usize,
    c: f64,
    sigma: f64,
) -> Result<Option<NodeId>> {
    if c == 0.0 || agents < 2 {
        return Ok(None);
    }
    let pos = (0..agents).map(|a| tape.slice(z, a * stride, dim)).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut terms = Vec::new();
    for i in 0..agents {
        for j in i + 1..agents {
            let d = tape.sub(pos[i], pos[j])?;
            let d2 = tape.dot(d, d)?;
            let e = tape.scale(d2, -1.0 / (sigma * sigma));
            terms.push(tape.exp(e));
        }
    }
    let all = tape.concat(&terms)?;
    let s = tape.sum(all);
    Ok(Some(tape.scale(s, c)))
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}

#[cfg(test)]
mod tests;
