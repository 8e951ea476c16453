use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{components, interaction_cost, nonnegative, positive, ControlProblem};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

const STATE: usize = 4;
const CONTROL: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BicycleParams {
    pub wheelbase: f64,
    pub c_u: f64,
    pub c_z: f64,
    pub c_t: f64,
    pub target: [f64; 2],
    /// Steering angles are projected onto `[-steer_max, steer_max]`.
    pub steer_max: f64,
    /// Optional bound on the acceleration.
    pub accel_max: Option<f64>,
    pub c_int: f64,
    pub sigma_int: f64,
    pub pos_range: f64,
    pub speed_range: [f64; 2],
}

impl Default for BicycleParams {
    fn default() -> Self {
        Self {
            wheelbase: 1.0,
            c_u: 0.5,
            c_z: 1.0,
            c_t: 10.0,
            target: [0.0; 2],
            steer_max: 1.2,
            accel_max: None,
            c_int: 0.0,
            sigma_int: 0.5,
            pos_range: 2.0,
            speed_range: [0.5, 1.5],
        }
    }
}

/// Kinematic bicycle per agent: state `(x, y, heading, speed)`, control
/// `(acceleration, steering angle)`.
#[derive(Clone, Debug)]
pub struct Bicycle {
    params: BicycleParams,
    agents: usize,
}

impl Bicycle {
    pub fn new(params: BicycleParams, agents: usize) -> Result<Self> {
        positive("wheelbase", params.wheelbase)?;
        for (name, v) in [("c_u", params.c_u), ("c_z", params.c_z), ("c_t", params.c_t), ("c_int", params.c_int)] {
            nonnegative(name, v)?;
        }
        if !(params.steer_max > 0.0 && params.steer_max < PI / 2.0) {
            return Err(Error::InvalidParameter(format!("steer_max must lie in (0, pi/2), got {}", params.steer_max)));
        }
        if let Some(b) = params.accel_max {
            positive("accel_max", b)?;
        }
        positive("sigma_int", params.sigma_int)?;
        positive("pos_range", params.pos_range)?;
        let [lo, hi] = params.speed_range;
        if !(lo <= hi) {
            return Err(Error::InvalidParameter("speed_range must be ordered".into()));
        }
        Ok(Self { params, agents })
    }

    fn position_errors(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let target = tape.vector(self.params.target.to_vec());
        let errs = (0..self.agents)
            .map(|a| {
                let pos = tape.slice(z, a * STATE, 2)?;
                let d = tape.sub(pos, target)?;
                Ok(tape.dot(d, d)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let v = tape.concat(&errs)?;
        Ok(tape.sum(v))
    }
}

impl ControlProblem for Bicycle {
    fn name(&self) -> &'static str {
        "bicycle"
    }

    fn agents(&self) -> usize {
        self.agents
    }

    fn state_dim(&self) -> usize {
        STATE * self.agents
    }

    fn control_dim(&self) -> usize {
        CONTROL * self.agents
    }

    fn dynamics(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let zs = components(tape, z)?;
        let us = components(tape, u)?;
        let mut out = Vec::with_capacity(self.state_dim());
        for a in 0..self.agents {
            let (psi, v) = (zs[a * STATE + 2], zs[a * STATE + 3]);
            let (acc, steer) = (us[a * CONTROL], us[a * CONTROL + 1]);
            let (s, c) = (tape.sin(psi), tape.cos(psi));
            out.push(tape.mul(v, c)?);
            out.push(tape.mul(v, s)?);
            let (ss, cs) = (tape.sin(steer), tape.cos(steer));
            let tan = tape.div(ss, cs)?;
            let vt = tape.mul(v, tan)?;
            out.push(tape.scale(vt, 1.0 / self.params.wheelbase));
            out.push(acc);
        }
        Ok(tape.concat(&out)?)
    }

    fn running_cost(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let uu = tape.dot(u, u)?;
        let effort = tape.scale(uu, p.c_u);
        let pe = self.position_errors(tape, z)?;
        let track = tape.scale(pe, p.c_z);
        let mut total = tape.add(effort, track)?;
        if let Some(c) = interaction_cost(tape, z, self.agents, STATE, 2, p.c_int, p.sigma_int)? {
            total = tape.add(total, c)?;
        }
        Ok(total)
    }

    fn terminal_cost(&self, tape: &mut Tape, _t: f64, z: NodeId) -> Result<NodeId> {
        let pe = self.position_errors(tape, z)?;
        Ok(tape.scale(pe, self.params.c_t))
    }

    fn hamiltonian_grad_u(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId, p: NodeId) -> Result<NodeId> {
        let prm = &self.params;
        let zs = components(tape, z)?;
        let us = components(tape, u)?;
        let ps = components(tape, p)?;
        let mut out = Vec::with_capacity(self.control_dim());
        for a in 0..self.agents {
            let v = zs[a * STATE + 3];
            let (acc, steer) = (us[a * CONTROL], us[a * CONTROL + 1]);
            let (p_psi, p_v) = (ps[a * STATE + 2], ps[a * STATE + 3]);

            let ga = tape.scale(acc, 2.0 * prm.c_u);
            let ga = tape.add(ga, p_v)?;
            out.push(tape.neg(ga));

            let cs = tape.cos(steer);
            let sec2 = tape.powf(cs, -2.0);
            let pv = tape.mul(p_psi, v)?;
            let f_d = tape.mul(pv, sec2)?;
            let f_d = tape.scale(f_d, 1.0 / prm.wheelbase);
            let gd = tape.scale(steer, 2.0 * prm.c_u);
            let gd = tape.add(gd, f_d)?;
            out.push(tape.neg(gd));
        }
        Ok(tape.concat(&out)?)
    }

    fn project(&self, tape: &mut Tape, _z: NodeId, u: NodeId) -> Result<NodeId> {
        let acc_max = self.params.accel_max.unwrap_or(f64::INFINITY);
        let steer_max = self.params.steer_max;
        let us = components(tape, u)?;
        let mut out = Vec::with_capacity(us.len());
        for pair in us.chunks(CONTROL) {
            out.push(tape.clamp(pair[0], -acc_max, acc_max)?);
            out.push(tape.clamp(pair[1], -steer_max, steer_max)?);
        }
        Ok(tape.concat(&out)?)
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let r = self.params.pos_range;
        let [lo, hi] = self.params.speed_range;
        let mut z = Vec::with_capacity(self.state_dim());
        for _ in 0..self.agents {
            z.push(rng.gen_range(-r..=r));
            z.push(rng.gen_range(-r..=r));
            z.push(rng.gen_range(-PI..=PI));
            z.push(rng.gen_range(lo..=hi));
        }
        z
    }

    fn check_admissible(&self, _z: &[f64], u: &[f64]) -> Result<()> {
        let acc_max = self.params.accel_max.unwrap_or(f64::INFINITY);
        for (index, &value) in u.iter().enumerate() {
            let bound = if index % CONTROL == 0 { acc_max } else { self.params.steer_max };
            if value.abs() > bound {
                return Err(Error::Domain { index, value, bound });
            }
        }
        Ok(())
    }
}
