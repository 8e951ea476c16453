use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, components, nonnegative, positive, ControlProblem};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsumptionParams {
    /// Risk-free rate.
    pub r: f64,
    /// Habit growth (diagonal entries, shared by every product).
    pub a: f64,
    /// Habit decay (diagonal entries, shared by every product).
    pub b: f64,
    pub eta: f64,
    pub theta_habit: f64,
    pub delta: f64,
    pub gamma_crra: f64,
    pub epsilon_term: f64,
    /// Products per agent.
    pub products: usize,
    /// Consumption is kept at least `domain_eps` above the habit level.
    pub domain_eps: f64,
    pub u_max: f64,
    /// Terminal utility is continued linearly below this wealth.
    pub wealth_floor: f64,
    pub x0_range: [f64; 2],
    pub h0_range: [f64; 2],
}

impl Default for ConsumptionParams {
    fn default() -> Self {
        Self {
            r: 0.03,
            a: 0.5,
            b: 0.5,
            eta: 0.5,
            theta_habit: 1.0,
            delta: 0.05,
            gamma_crra: 2.0,
            epsilon_term: 1.0,
            products: 1,
            domain_eps: 1e-4,
            u_max: 10.0,
            wealth_floor: 1e-2,
            x0_range: [1.0, 2.0],
            h0_range: [0.1, 0.3],
        }
    }
}

impl ConsumptionParams {
    fn validate(&self) -> Result<()> {
        positive("gamma_crra", self.gamma_crra)?;
        if (self.gamma_crra - 1.0).abs() < 1e-12 {
            return Err(Error::InvalidParameter("gamma_crra must differ from 1".into()));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("theta_habit", self.theta_habit),
            ("delta", self.delta),
            ("epsilon_term", self.epsilon_term),
            ("domain_eps", self.domain_eps),
            ("u_max", self.u_max),
            ("wealth_floor", self.wealth_floor),
        ] {
            positive(name, v)?;
        }
        nonnegative("a", self.a)?;
        nonnegative("b", self.b)?;
        if self.products == 0 {
            return Err(Error::InvalidParameter("products must be at least 1".into()));
        }
        for (name, [lo, hi]) in [("x0_range", self.x0_range), ("h0_range", self.h0_range)] {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be ordered and nonnegative")));
            }
        }
        if self.h0_range[1] + self.domain_eps >= self.u_max {
            return Err(Error::InvalidParameter("u_max must exceed the initial habit range".into()));
        }
        Ok(())
    }
}

/// First-order condition of the consumption Hamiltonian in utility
/// (maximization) form with costates `p_x`, `p_h`:
/// `e^{-delta t} (u - h)^{-gamma} - p_x + a eta p_h u^{eta - 1}`.
pub fn consumption_foc_residual(
    params: &ConsumptionParams,
    t: f64,
    _x: f64,
    h: &[f64],
    u: &[f64],
    p_x: f64,
    p_h: &[f64],
) -> Result<Vec<f64>> {
    check_len("habit", u.len(), h.len())?;
    check_len("habit costate", u.len(), p_h.len())?;
    let disc = (-params.delta * t).exp();
    u.iter()
        .zip(h)
        .zip(p_h)
        .enumerate()
        .map(|(index, ((&ui, &hi), &phi))| {
            if !(ui > hi) || !(ui > 0.0) {
                return Err(Error::Domain { index, value: ui, bound: hi.max(0.0) });
            }
            Ok(disc * (ui - hi).powf(-params.gamma_crra) - p_x
                + params.a * params.eta * phi * ui.powf(params.eta - 1.0))
        })
        .collect()
}

/// Consumption-savings with habit formation. Per agent the state is
/// `(wealth, habit_1..habit_m)` and the control is consumption of each of the
/// `m` products. Utility is negated so the problem is a minimization.
#[derive(Clone, Debug)]
pub struct Consumption {
    params: ConsumptionParams,
    agents: usize,
}

impl Consumption {
    pub fn new(params: ConsumptionParams, agents: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, agents })
    }

    pub fn params(&self) -> &ConsumptionParams {
        &self.params
    }

    fn stride(&self) -> usize {
        1 + self.params.products
    }

    /// Habit levels of every agent in control order.
    fn habits(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let m = self.params.products;
        let parts = (0..self.agents)
            .map(|a| tape.slice(z, a * self.stride() + 1, m))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.concat(&parts)?)
    }

    fn wealths(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let parts =
            (0..self.agents).map(|a| tape.index(z, a * self.stride())).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(tape.concat(&parts)?)
    }

    fn habit_values<'a>(&self, z: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let (s, m) = (self.stride(), self.params.products);
        z.chunks(s).flat_map(move |c| c[1..=m].iter().copied())
    }
}

impl ControlProblem for Consumption {
    fn name(&self) -> &'static str {
        "consumption"
    }

    fn agents(&self) -> usize {
        self.agents
    }

    fn state_dim(&self) -> usize {
        self.stride() * self.agents
    }

    fn control_dim(&self) -> usize {
        self.params.products * self.agents
    }

    fn dynamics(&self, tape: &mut Tape, _t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let m = p.products;
        let mut out = Vec::with_capacity(self.state_dim());
        for a in 0..self.agents {
            let x = tape.index(z, a * self.stride())?;
            let h = tape.slice(z, a * self.stride() + 1, m)?;
            let ua = tape.slice(u, a * m, m)?;
            let rx = tape.scale(x, p.r);
            let spend = tape.sum(ua);
            out.push(tape.sub(rx, spend)?);
            let grow = tape.powf(ua, p.eta);
            let grow = tape.scale(grow, p.a);
            let hp = tape.clamp(h, 0.0, f64::INFINITY)?;
            let decay = tape.powf(hp, p.theta_habit);
            let decay = tape.scale(decay, p.b);
            out.push(tape.sub(grow, decay)?);
        }
        Ok(tape.concat(&out)?)
    }

    fn running_cost(&self, tape: &mut Tape, t: f64, z: NodeId, u: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let h = self.habits(tape, z)?;
        let gap = tape.sub(u, h)?;
        let util = tape.powf(gap, 1.0 - p.gamma_crra);
        let s = tape.sum(util);
        Ok(tape.scale(s, -(-p.delta * t).exp() / (1.0 - p.gamma_crra)))
    }

    fn terminal_cost(&self, tape: &mut Tape, t: f64, z: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let x = self.wealths(tape, z)?;
        let above = tape.clamp(x, p.wealth_floor, f64::INFINITY)?;
        let util = tape.powf(above, 1.0 - p.gamma_crra);
        let s = tape.sum(util);
        let k = (-p.delta * t).exp() * p.epsilon_term;
        let g = tape.scale(s, -k / (1.0 - p.gamma_crra));
        // linear below the floor, matching the slope there
        let short = tape.offset(x, -p.wealth_floor);
        let short = tape.clamp(short, f64::NEG_INFINITY, 0.0)?;
        let short = tape.sum(short);
        let short = tape.scale(short, -k * p.wealth_floor.powf(-p.gamma_crra));
        Ok(tape.add(g, short)?)
    }

    fn hamiltonian_grad_u(&self, tape: &mut Tape, t: f64, z: NodeId, u: NodeId, p: NodeId) -> Result<NodeId> {
        let prm = &self.params;
        let m = prm.products;
        let h = self.habits(tape, z)?;
        let gap = tape.sub(u, h)?;
        let marginal = tape.powf(gap, -prm.gamma_crra);
        let marginal = tape.scale(marginal, (-prm.delta * t).exp());

        let ps = components(tape, p)?;
        let mut px = Vec::with_capacity(self.control_dim());
        let mut ph = Vec::with_capacity(self.control_dim());
        for a in 0..self.agents {
            let base = a * self.stride();
            px.extend(std::iter::repeat_n(ps[base], m));
            ph.extend_from_slice(&ps[base + 1..base + 1 + m]);
        }
        let px = tape.concat(&px)?;
        let ph = tape.concat(&ph)?;
        let upow = tape.powf(u, prm.eta - 1.0);
        let habit = tape.mul(ph, upow)?;
        let habit = tape.scale(habit, prm.a * prm.eta);
        let g = tape.add(marginal, px)?;
        Ok(tape.sub(g, habit)?)
    }

    /// `u <- min(max(u, h + eps), u_max)`.
    fn project(&self, tape: &mut Tape, z: NodeId, u: NodeId) -> Result<NodeId> {
        let h = self.habits(tape, z)?;
        let floor = tape.offset(h, self.params.domain_eps);
        let up = tape.maximum(u, floor)?;
        Ok(tape.clamp(up, f64::NEG_INFINITY, self.params.u_max)?)
    }

    fn sample_initial(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let [xl, xh] = self.params.x0_range;
        let [hl, hh] = self.params.h0_range;
        let mut z = Vec::with_capacity(self.state_dim());
        for _ in 0..self.agents {
            z.push(rng.gen_range(xl..=xh));
            for _ in 0..self.params.products {
                z.push(rng.gen_range(hl..=hh));
            }
        }
        z
    }

    fn initial_control(&self, z: &[f64]) -> Vec<f64> {
        self.habit_values(z).map(|h| (h + 0.5).min(self.params.u_max)).collect()
    }

    fn check_admissible(&self, z: &[f64], u: &[f64]) -> Result<()> {
        for (index, (&ui, h)) in u.iter().zip(self.habit_values(z)).enumerate() {
            if !(ui > h) {
                return Err(Error::Domain { index, value: ui, bound: h });
            }
            if ui > self.params.u_max {
                return Err(Error::Domain { index, value: ui, bound: self.params.u_max });
            }
        }
        Ok(())
    }
}
