use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{components, interaction_cost, nonnegative, positive, ControlProblem};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

const STATE: usize = 12;
const CONTROL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub gravity: f64,
    /// Diagonal of the body inertia.
    pub inertia: [f64; 3],
    pub c_u: f64,
    pub c_e: f64,
    pub kappa_e: f64,
    pub c_z: f64,
    pub c_t: f64,
    pub target: [f64; 3],
    /// Optional box `|u_i| <= u_max`.
    pub u_max: Option<f64>,
    pub c_int: f64,
    pub sigma_int: f64,
    /// Initial positions are uniform in `[-pos_range, pos_range]^3`.
    pub pos_range: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.81,
            inertia: [0.5, 0.5, 1.0],
            c_u: 0.1,
            c_e: 0.01,
            kappa_e: 1.0,
            c_z: 1.0,
            c_t: 50.0,
            target: [0.0; 3],
            u_max: None,
            c_int: 0.0,
            sigma_int: 0.5,
            pos_range: 2.0,
        }
    }
}

/// Rigid-body quadrotor per agent. State: position, velocity, Euler angles
/// (roll, pitch, yaw), body rates. Control: thrust deviation from hover
/// `m g` followed by three body torques.
#[derive(Clone, Debug)]
pub struct Quadrotor {
    params: QuadrotorParams,
    agents: usize,
}

struct Agent {
    vel: [NodeId; 3],
    angle: [NodeId; 3],
    rate: [NodeId; 3],
}

impl Quadrotor {
    pub fn new(params: QuadrotorParams, agents: usize) -> Result<Self> {
        positive("mass", params.mass)?;
        nonnegative("gravity", params.gravity)?;
        for (i, &v) in params.inertia.iter().enumerate() {
            positive(&format!("inertia[{i}]"), v)?;
        }
        for (name, v) in [
            ("c_u", params.c_u),
            ("c_e", params.c_e),
            ("kappa_e", params.kappa_e),
            ("c_z", params.c_z),
            ("c_t", params.c_t),
            ("c_int", params.c_int),
        ] {
            nonnegative(name, v)?;
        }
        positive("sigma_int", params.sigma_int)?;
        positive("pos_range", params.pos_range)?;
        if let Some(b) = params.u_max {
            positive("u_max", b)?;
        }
        Ok(Self { params, agents })
    }

    pub fn params(&self) -> &QuadrotorParams {
        &self.params
    }

    fn agent(z: &[NodeId], a: usize) -> Agent {
        let s = &z[a * STATE..(a + 1) * STATE];
        Agent { vel: [s[3], s[4], s[5]], angle: [s[6], s[7], s[8]], rate: [s[9], s[10], s[11]] }
    }

    /// Third column of the body-to-world rotation, `R e_3`.
    fn thrust_axis(tape: &mut Tape, angle: [NodeId; 3]) -> Result<[NodeId; 3]> {
        let [phi, th, psi] = angle;
        let (sphi, cphi) = (tape.sin(phi), tape.cos(phi));
        let (sth, cth) = (tape.sin(th), tape.cos(th));
        let (spsi, cpsi) = (tape.sin(psi), tape.cos(psi));
        let cphi_sth = tape.mul(cphi, sth)?;
        let t1 = tape.mul(cphi_sth, cpsi)?;
        let t2 = tape.mul(sphi, spsi)?;
        let x = tape.add(t1, t2)?;
        let t3 = tape.mul(cphi_sth, spsi)?;
        let t4 = tape.mul(sphi, cpsi)?;
        let y = tape.sub(t3, t4)?;
        let zc = tape.mul(cphi, cth)?;
        Ok([x, y, zc])
    }

    fn position_error(&self, tape: &mut Tape, z: NodeId, a: usize) -> Result<NodeId> {
        let pos = tape.slice(z, a * STATE, 3)?;
        let target = tape.vector(self.params.target.to_vec());
        let d = tape.sub(pos, target)?;
        Ok(tape.dot(d, d)?)
    }

    fn sum_position_errors(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let errs = (0..self.agents).map(|a| self.position_error(tape, z, a)).collect::<Result<Vec<_>>>()?;
        let v = tape.concat(&errs)?;
        Ok(tape.sum(v))
    }
}

impl ControlProblem for Quadrotor {
    fn name(&self) -> &'static str {
        "quadrotor"
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
        let p = &self.params;
        let [ix, iy, iz] = p.inertia;
        let zs = components(tape, z)?;
        let us = components(tape, u)?;
        let mut out = Vec::with_capacity(self.state_dim());
        for a in 0..self.agents {
            let s = Self::agent(&zs, a);
            let c = &us[a * CONTROL..(a + 1) * CONTROL];
            out.extend(s.vel);

            let axis = Self::thrust_axis(tape, s.angle)?;
            let du = tape.scale(c[0], 1.0 / p.mass);
            let acc = tape.offset(du, p.gravity);
            for (k, e) in axis.into_iter().enumerate() {
                let f = tape.mul(acc, e)?;
                out.push(if k == 2 { tape.offset(f, -p.gravity) } else { f });
            }

            let [phi, th, _] = s.angle;
            let [wp, wq, wr] = s.rate;
            let (sphi, cphi) = (tape.sin(phi), tape.cos(phi));
            let (sth, cth) = (tape.sin(th), tape.cos(th));
            let qs = tape.mul(wq, sphi)?;
            let rc = tape.mul(wr, cphi)?;
            let qr = tape.add(qs, rc)?;
            let tan = tape.div(sth, cth)?;
            let roll = tape.mul(qr, tan)?;
            out.push(tape.add(wp, roll)?);
            let qc = tape.mul(wq, cphi)?;
            let rs = tape.mul(wr, sphi)?;
            out.push(tape.sub(qc, rs)?);
            out.push(tape.div(qr, cth)?);

            for (torque, (x, y), (i_self, k)) in
                [(c[1], (wq, wr), (ix, iy - iz)), (c[2], (wp, wr), (iy, iz - ix)), (c[3], (wp, wq), (iz, ix - iy))]
            {
                let xy = tape.mul(x, y)?;
                let gyro = tape.scale(xy, k);
                let sum = tape.add(torque, gyro)?;
                out.push(tape.scale(sum, 1.0 / i_self));
            }
        }
        Ok(tape.concat(&out)?)
    }

    fn running_cost(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let uu = tape.dot(u, u)?;
        let quad = tape.scale(uu, p.c_u);
        let ku = tape.scale(u, p.kappa_e);
        let e = tape.exp(ku);
        let es = tape.sum(e);
        let expo = tape.scale(es, p.c_e);
        let pe = self.sum_position_errors(tape, z)?;
        let track = tape.scale(pe, p.c_z);
        let mut total = tape.add(quad, expo)?;
        total = tape.add(total, track)?;
        if let Some(c) = interaction_cost(tape, z, self.agents, STATE, 3, p.c_int, p.sigma_int)? {
            total = tape.add(total, c)?;
        }
        Ok(total)
    }

    fn terminal_cost(&self, tape: &mut Tape, _t: f64, z: NodeId) -> Result<NodeId> {
        let pe = self.sum_position_errors(tape, z)?;
        Ok(tape.scale(pe, self.params.c_t))
    }

    fn hamiltonian_grad_u(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId, p: NodeId) -> Result<NodeId> {
        let prm = &self.params;
        let lin = tape.scale(u, 2.0 * prm.c_u);
        let ku = tape.scale(u, prm.kappa_e);
        let e = tape.exp(ku);
        let ex = tape.scale(e, prm.c_e * prm.kappa_e);
        let grad_l = tape.add(lin, ex)?;

        let zs = components(tape, z)?;
        let ps = components(tape, p)?;
        let mut ftp = Vec::with_capacity(self.control_dim());
        for a in 0..self.agents {
            let s = Self::agent(&zs, a);
            let pa = &ps[a * STATE..(a + 1) * STATE];
            let axis = Self::thrust_axis(tape, s.angle)?;
            let pv = tape.concat(&pa[3..6])?;
            let ax = tape.concat(&axis)?;
            let proj = tape.dot(ax, pv)?;
            ftp.push(tape.scale(proj, 1.0 / prm.mass));
            for (k, &i) in prm.inertia.iter().enumerate() {
                ftp.push(tape.scale(pa[9 + k], 1.0 / i));
            }
        }
        let ftp = tape.concat(&ftp)?;
        let s = tape.add(grad_l, ftp)?;
        Ok(tape.neg(s))
    }

    fn project(&self, tape: &mut Tape, _z: NodeId, u: NodeId) -> Result<NodeId> {
        match self.params.u_max {
            Some(b) => Ok(tape.clamp(u, -b, b)?),
            None => Ok(u),
        }
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let r = self.params.pos_range;
        let mut z = vec![0.0; self.state_dim()];
        for a in 0..self.agents {
            for k in 0..3 {
                z[a * STATE + k] = rng.gen_range(-r..=r);
            }
        }
        z
    }

    fn check_admissible(&self, _z: &[f64], u: &[f64]) -> Result<()> {
        if let Some(b) = self.params.u_max {
            if let Some((index, &value)) = u.iter().enumerate().find(|(_, v)| v.abs() > b) {
                return Err(Error::Domain { index, value, bound: b });
            }
        }
        Ok(())
    }
}
