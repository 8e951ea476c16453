//! Plain minibatch SGD on gradient-surrogate directions, with Cesàro
//! tracking, periodic audits and the constant-step neighborhood experiment.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{audit, AuditConfig, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::grad::{batch_objective, estimate, Backend, GradOptions, GradientEstimate};
use crate::hamiltonian::FixedPointOperator;
use crate::problems::ControlProblem;
use crate::rollout::{Grid, RolloutOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `alpha0 / (1 + j)^power`.
    Diminishing {
        alpha0: f64,
        power: f64,
    },
    Constant {
        alpha: f64,
    },
    /// Multiplies the step by `factor` once the per-epoch mean loss has not
    /// improved for more than `patience` epochs.
    Plateau {
        alpha0: f64,
        factor: f64,
        patience: usize,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Diminishing { alpha0: 0.1, power: 1.0 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            Schedule::Diminishing { alpha0, power } => {
                positive("alpha0", alpha0)?;
                if !(power > 0.5 && power <= 1.0) {
                    return Err(Error::InvalidParameter(format!("power must lie in (0.5, 1], got {power}")));
                }
            }
            Schedule::Constant { alpha } => positive("alpha", alpha)?,
            Schedule::Plateau { alpha0, factor, patience } => {
                positive("alpha0", alpha0)?;
                if !(factor > 0.0 && factor < 1.0) {
                    return Err(Error::InvalidParameter(format!("factor must lie in (0, 1), got {factor}")));
                }
                if patience == 0 {
                    return Err(Error::InvalidParameter("patience must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn initial(&self) -> f64 {
        match *self {
            Schedule::Diminishing { alpha0, .. } | Schedule::Plateau { alpha0, .. } => alpha0,
            Schedule::Constant { alpha } => alpha,
        }
    }
}

/// Step sizes of a [`Schedule`], including the plateau state.
#[derive(Clone, Debug)]
pub struct Scheduler {
    schedule: Schedule,
    current: f64,
    best: f64,
    bad_epochs: usize,
}

impl Scheduler {
    pub fn new(schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { current: schedule.initial(), schedule, best: f64::INFINITY, bad_epochs: 0 })
    }

    pub fn alpha(&self, j: usize) -> f64 {
        match self.schedule {
            Schedule::Diminishing { alpha0, power } => alpha0 / (1.0 + j as f64).powf(power),
            Schedule::Constant { alpha } => alpha,
            Schedule::Plateau { .. } => self.current,
        }
    }

    /// Feeds the mean loss of a finished epoch; returns the new step size if it was reduced.
    pub fn end_epoch(&mut self, mean_loss: f64) -> Option<f64> {
        let Schedule::Plateau { factor, patience, .. } = self.schedule else {
            return None;
        };
        if mean_loss < self.best {
            self.best = mean_loss;
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > patience {
            self.current *= factor;
            self.bad_epochs = 0;
            return Some(self.current);
        }
        None
    }
}

/// `theta <- theta - alpha * direction`.
pub fn sgd_step(theta: &mut [f64], direction: &[f64], alpha: f64) -> Result<()> {
    if direction.len() != theta.len() {
        return Err(Error::Dimension { what: "direction", expected: theta.len(), got: direction.len() });
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("step size must be nonnegative, got {alpha}")));
    }
    if direction.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFiniteDirection);
    }
    theta.iter_mut().zip(direction).for_each(|(t, d)| *t -= alpha * d);
    Ok(())
}

/// Running `A_K = sum alpha_j` and `A_K^{-1} sum alpha_j s_j`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Cesaro {
    pub weight: f64,
    pub weighted_sum: f64,
}

impl Cesaro {
    pub fn push(&mut self, alpha: f64, value: f64) {
        self.weight += alpha;
        self.weighted_sum += alpha * value;
    }

    pub fn average(&self) -> f64 {
        if self.weight > 0.0 {
            self.weighted_sum / self.weight
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub j: usize,
    pub epoch: usize,
    pub alpha: f64,
    /// Batch-mean objective before the step.
    pub loss: f64,
    /// Norm of the direction used for the step.
    pub grad_norm_jfb: f64,
    pub grad_norm_true: Option<f64>,
    pub a_k: f64,
    pub cesaro_avg: f64,
    pub lr_event: Option<f64>,
    /// Index into [`TrainHistory::audits`].
    pub audit_id: Option<usize>,
    pub work_units: usize,
    pub peak_nodes: usize,
    pub nonconverged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub j: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    pub audits: Vec<(usize, DiagnosticsReport)>,
    pub incidents: Vec<Incident>,
    pub warnings: Vec<String>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "j,epoch,alpha,loss,grad_norm_jfb,grad_norm_true,A_K,cesaro_avg,lr_events,audit_id,work_units,peak_nodes";

    /// Squared norm fed to the Cesàro average at one record.
    pub fn cesaro_term(r: &TrainRecord) -> f64 {
        r.grad_norm_true.unwrap_or(r.grad_norm_jfb).powi(2)
    }

    /// Recomputes the Cesàro column from the records.
    pub fn recompute_cesaro(&self) -> Vec<f64> {
        let mut c = Cesaro::default();
        self.records
            .iter()
            .map(|r| {
                c.push(r.alpha, Self::cesaro_term(r));
                c.average()
            })
            .collect()
    }

    pub fn total_work_units(&self) -> usize {
        self.records.iter().map(|r| r.work_units).sum()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
        for r in &self.records {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{},{:e},{:e},{},{},{},{}",
                r.j,
                r.epoch,
                r.alpha,
                r.loss,
                r.grad_norm_jfb,
                opt(r.grad_norm_true),
                r.a_k,
                r.cesaro_avg,
                opt(r.lr_event),
                r.audit_id.map_or(String::new(), |a| a.to_string()),
                r.work_units,
                r.peak_nodes,
            )?;
        }
        Ok(())
    }

    pub fn write_diagnostics_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", DiagnosticsReport::CSV_HEADER)?;
        for (j, report) in &self.audits {
            report.write_csv_row(*j, &mut out)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub seed: u64,
    /// Audit every this many iterations; 0 disables audits. A failed audit is
    /// logged as an incident and training continues.
    pub audit_every: usize,
    pub audit: AuditConfig,
    /// Also compute the implicit gradient on each batch.
    pub track_true_grad: bool,
    pub backend: Backend,
    /// Log backend failures as incidents and skip the step instead of aborting.
    pub skip_failed_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            batch_size: 16,
            epochs: 10,
            iterations_per_epoch: 50,
            seed: 0,
            audit_every: 0,
            audit: AuditConfig::default(),
            track_true_grad: false,
            backend: Backend::Jfb,
            skip_failed_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.iterations_per_epoch == 0 {
            return Err(Error::InvalidParameter("iterations_per_epoch must be at least 1".into()));
        }
        if self.backend == Backend::FiniteDiff {
            return Err(Error::InvalidParameter("training needs a reverse-mode backend".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }
}

/// What the training loop reports after each iteration.
pub struct Progress<'a> {
    pub record: &'a TrainRecord,
    pub theta: &'a [f64],
    pub estimate: &'a GradientEstimate,
    pub audit: Option<&'a DiagnosticsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    pub history: TrainHistory,
}

/// Draws `size` initial states.
pub fn sample_batch(problem: &dyn ControlProblem, rng: &mut ChaCha8Rng, size: usize) -> Vec<Vec<f64>> {
    (0..size).map(|_| problem.sample_initial(rng)).collect()
}

/// Runs SGD from `theta0`; `observer` sees every iteration and may stop the
/// run by returning an error.
#[allow(clippy::too_many_arguments)]
pub fn train(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta0: &[f64],
    grid: Grid,
    rollout: &RolloutOptions,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&Progress<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut scheduler = Scheduler::new(cfg.schedule.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = theta0.to_vec();
    let mut history = TrainHistory::default();
    let mut cesaro = Cesaro::default();
    let gopts = GradOptions { rollout: rollout.clone(), retain_integrands: false };
    let mut epoch_loss = 0.0;
    let mut epoch_count = 0usize;
    let mut pending_event = None;
    let mut lipschitz: Option<f64> = None;
    let mut last_true: Option<(Vec<f64>, Vec<f64>)> = None;

    for j in 0..cfg.iterations() {
        let epoch = j / cfg.iterations_per_epoch;
        let batch = sample_batch(problem, &mut rng, cfg.batch_size);
        let step = || -> Result<(GradientEstimate, Option<GradientEstimate>)> {
            let est = estimate(cfg.backend, problem, op, &theta, &batch, grid, &gopts)?;
            let truth = if cfg.track_true_grad {
                Some(estimate(Backend::Implicit, problem, op, &theta, &batch, grid, &gopts)?)
            } else {
                None
            };
            Ok((est, truth))
        };
        let (est, truth) = match step() {
            Ok(v) => v,
            Err(e) if cfg.skip_failed_steps => {
                history.incidents.push(Incident { j, message: e.to_string() });
                continue;
            }
            Err(e) => return Err(e.at_iteration(j)),
        };

        let audit_result = if cfg.audit_every > 0 && j % cfg.audit_every == 0 {
            match audit(problem, op, &theta, &batch, grid, rollout, &cfg.audit) {
                Ok(a) => Some(a),
                Err(e) => {
                    history.incidents.push(Incident { j, message: format!("audit failed: {e}") });
                    None
                }
            }
        } else {
            None
        };
        let audit_id = if let Some(a) = audit_result {
            if let (Some(eps), Some(lj)) = (a.report.epsilon_v_hat, lipschitz) {
                let gap = 1.0 - a.report.gamma_hat;
                let cap = 2.0 * eps / (lj * gap * gap);
                if cfg.schedule.initial() > cap {
                    history.warnings.push(format!(
                        "iteration {j}: initial step {} exceeds the estimated cap {cap:e}",
                        cfg.schedule.initial()
                    ));
                }
            }
            history.audits.push((j, a.report));
            Some(history.audits.len() - 1)
        } else {
            None
        };

        if let Some(t) = &truth {
            if let Some((th, g)) = &last_true {
                let dtheta: f64 = th.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let dg: f64 = g.iter().zip(&t.direction).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if dtheta > 0.0 {
                    lipschitz = Some(lipschitz.unwrap_or(0.0).max(dg / dtheta));
                }
            }
            last_true = Some((theta.clone(), t.direction.clone()));
        }

        let alpha = scheduler.alpha(j);
        let record = TrainRecord {
            j,
            epoch,
            alpha,
            loss: est.loss,
            grad_norm_jfb: est.norm(),
            grad_norm_true: truth.as_ref().map(|t| t.norm()),
            a_k: 0.0,
            cesaro_avg: 0.0,
            lr_event: pending_event.take(),
            audit_id,
            work_units: est.work_units,
            peak_nodes: est.peak_nodes,
            nonconverged: est.nonconverged,
        };
        cesaro.push(alpha, TrainHistory::cesaro_term(&record));
        let record = TrainRecord { a_k: cesaro.weight, cesaro_avg: cesaro.average(), ..record };

        if let Err(e) = sgd_step(&mut theta, &est.direction, alpha) {
            if !cfg.skip_failed_steps {
                return Err(e.at_iteration(j));
            }
            history.incidents.push(Incident { j, message: e.to_string() });
        }
        epoch_loss += est.loss;
        epoch_count += 1;
        if (j + 1) % cfg.iterations_per_epoch == 0 {
            pending_event = scheduler.end_epoch(epoch_loss / epoch_count as f64);
            epoch_loss = 0.0;
            epoch_count = 0;
        }

        history.records.push(record);
        let progress = Progress {
            record: history.records.last().expect("just pushed"),
            theta: &theta,
            estimate: &est,
            audit: audit_id.map(|i| &history.audits[i].1),
        };
        observer(&progress)?;
    }
    Ok(TrainOutcome { theta, history })
}

/// One backend's per-epoch totals in a comparison run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub backend: Backend,
    pub epoch: usize,
    pub loss: f64,
    pub cum_work_units: usize,
    pub peak_nodes: usize,
    pub wall_ms: f64,
    pub feasible: bool,
}

impl CompareRow {
    pub const CSV_HEADER: &'static str = "backend,epoch,loss,cum_work_units,peak_nodes,wall_ms,feasible";

    pub fn write_csv(rows: &[CompareRow], mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(
                out,
                "{},{},{:e},{},{},{:.3},{}",
                r.backend, r.epoch, r.loss, r.cum_work_units, r.peak_nodes, r.wall_ms, r.feasible
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BackendRun {
    pub backend: Backend,
    pub rows: Vec<CompareRow>,
    /// Absent when the run stopped early.
    pub outcome: Option<TrainOutcome>,
    pub failure: Option<String>,
}

/// Trains once per backend from the same start and seed. A backend that
/// exceeds its node budget gets an infeasible row and the others continue.
#[allow(clippy::too_many_arguments)]
pub fn compare_backends(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta0: &[f64],
    grid: Grid,
    rollout: &RolloutOptions,
    cfg: &TrainConfig,
    backends: &[Backend],
) -> Result<Vec<BackendRun>> {
    let mut runs = Vec::with_capacity(backends.len());
    for &backend in backends {
        let bcfg = TrainConfig { backend, audit_every: 0, ..cfg.clone() };
        let mut rows: Vec<CompareRow> = Vec::new();
        let mut cum = 0usize;
        let (mut loss_sum, mut peak, mut count) = (0.0, 0usize, 0usize);
        let start = std::time::Instant::now();
        let result = train(problem, op, theta0, grid, rollout, &bcfg, |p| {
            cum += p.record.work_units;
            loss_sum += p.record.loss;
            peak = peak.max(p.record.peak_nodes);
            count += 1;
            if (p.record.j + 1) % bcfg.iterations_per_epoch == 0 {
                rows.push(CompareRow {
                    backend,
                    epoch: p.record.epoch,
                    loss: loss_sum / count as f64,
                    cum_work_units: cum,
                    peak_nodes: peak,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    feasible: true,
                });
                (loss_sum, peak, count) = (0.0, 0, 0);
            }
            Ok(())
        });
        match result {
            Ok(outcome) => runs.push(BackendRun { backend, rows, outcome: Some(outcome), failure: None }),
            Err(e) if is_budget(&e) => {
                rows.push(CompareRow {
                    backend,
                    epoch: rows.len(),
                    loss: f64::NAN,
                    cum_work_units: cum,
                    peak_nodes: peak,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    feasible: false,
                });
                runs.push(BackendRun { backend, rows, outcome: None, failure: Some(e.to_string()) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(runs)
}

fn is_budget(e: &Error) -> bool {
    match e {
        Error::NodeBudgetExceeded { .. } => true,
        Error::Iteration { source, .. } | Error::Sample { source, .. } => is_budget(source),
        _ => false,
    }
}

/// One minibatch draw of a [`StochasticObjective`].
#[derive(Clone, Debug)]
pub struct Draw {
    pub loss: f64,
    pub direction: Vec<f64>,
    /// Batch-mean true gradient, when requested.
    pub true_grad: Option<Vec<f64>>,
}

/// A stochastic objective for constant-step experiments.
pub trait StochasticObjective {
    fn dim(&self) -> usize;

    /// Minibatch loss and step direction at `theta`, plus the true gradient
    /// of the same batch when `measure` is set.
    fn sample(&mut self, theta: &[f64], rng: &mut ChaCha8Rng, measure: bool) -> Result<Draw>;

    /// Deterministic loss used to detect divergence.
    fn reference_loss(&mut self, theta: &[f64]) -> Result<f64>;
}

/// JFB directions on fresh batches, implicit gradients of the same batches
/// for the plateau, and a fixed evaluation batch for the reference loss.
pub struct ControlObjective<'a> {
    pub problem: &'a dyn ControlProblem,
    pub op: &'a dyn FixedPointOperator,
    pub grid: Grid,
    pub rollout: RolloutOptions,
    pub batch_size: usize,
    pub eval_batch: Vec<Vec<f64>>,
}

impl StochasticObjective for ControlObjective<'_> {
    fn dim(&self) -> usize {
        self.op.param_count()
    }

    fn sample(&mut self, theta: &[f64], rng: &mut ChaCha8Rng, measure: bool) -> Result<Draw> {
        let batch = sample_batch(self.problem, rng, self.batch_size);
        let opts = GradOptions { rollout: self.rollout.clone(), retain_integrands: false };
        let est = estimate(Backend::Jfb, self.problem, self.op, theta, &batch, self.grid, &opts)?;
        let true_grad = if measure {
            Some(estimate(Backend::Implicit, self.problem, self.op, theta, &batch, self.grid, &opts)?.direction)
        } else {
            None
        };
        Ok(Draw { loss: est.loss, direction: est.direction, true_grad })
    }

    fn reference_loss(&mut self, theta: &[f64]) -> Result<f64> {
        batch_objective(self.problem, self.op, theta, &self.eval_batch, self.grid, &self.rollout)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauRow {
    pub alpha: f64,
    /// Mean squared norm of the batch-mean true gradient over the final 20%
    /// of iterations.
    pub plateau: f64,
    /// Reference loss at the start and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Non-finite iterates, or a final loss above ten times the initial one.
    pub divergent: bool,
}

impl PlateauRow {
    pub const CSV_HEADER: &'static str = "alpha,plateau,initial_loss,final_loss,divergent";

    pub fn write_csv(rows: &[PlateauRow], mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in rows {
            writeln!(out, "{:e},{:e},{:e},{:e},{}", r.alpha, r.plateau, r.initial_loss, r.final_loss, r.divergent)?;
        }
        Ok(())
    }
}

/// Constant-step runs from `theta0`, one per step size, all with the same seed.
pub fn neighborhood_experiment(
    objective: &mut dyn StochasticObjective,
    theta0: &[f64],
    alphas: &[f64],
    iters: usize,
    seed: u64,
) -> Result<Vec<PlateauRow>> {
    if alphas.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidParameter("step sizes must be sorted in descending order".into()));
    }
    if iters < 5 {
        return Err(Error::InvalidParameter(format!("need at least 5 iterations, got {iters}")));
    }
    if theta0.len() != objective.dim() {
        return Err(Error::Dimension { what: "parameter vector", expected: objective.dim(), got: theta0.len() });
    }
    let window_start = iters - iters / 5;
    let initial_loss = objective.reference_loss(theta0)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        Schedule::Constant { alpha }.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = theta0.to_vec();
        let mut divergent = false;
        let mut acc = 0.0;
        for j in 0..iters {
            let draw = match objective.sample(&theta, &mut rng, j >= window_start) {
                Ok(d) => d,
                Err(e) if is_divergence(&e) => {
                    divergent = true;
                    break;
                }
                Err(e) => return Err(e.at_iteration(j)),
            };
            if !draw.loss.is_finite() {
                divergent = true;
                break;
            }
            if let Some(g) = &draw.true_grad {
                acc += g.iter().map(|g| g * g).sum::<f64>();
            }
            sgd_step(&mut theta, &draw.direction, alpha).map_err(|e| e.at_iteration(j))?;
        }
        let final_loss = if divergent {
            f64::NAN
        } else {
            match objective.reference_loss(&theta) {
                Ok(l) => l,
                Err(e) if is_divergence(&e) => f64::NAN,
                Err(e) => return Err(e),
            }
        };
        if !(final_loss.abs() <= 10.0 * initial_loss.abs().max(f64::MIN_POSITIVE)) {
            divergent = true;
        }
        let plateau = if divergent { f64::NAN } else { acc / (iters - window_start) as f64 };
        rows.push(PlateauRow { alpha, plateau, initial_loss, final_loss, divergent });
    }
    Ok(rows)
}

fn is_divergence(e: &Error) -> bool {
    match e {
        Error::NonFiniteState { .. } | Error::NonFiniteDirection | Error::FixedPointNonFinite { .. } => true,
        Error::Sample { source, .. } => is_divergence(source),
        _ => false,
    }
}

/// Whether plateaus of the non-divergent rows are nonincreasing as the step
/// size decreases.
pub fn plateaus_monotone(rows: &[PlateauRow]) -> bool {
    let kept: Vec<&PlateauRow> = rows.iter().filter(|r| !r.divergent).collect();
    kept.windows(2).all(|w| w[1].plateau <= w[0].plateau)
}

/// Whether plateaus of the non-divergent rows are nonincreasing as the step
/// size grows, as happens while the start-up transient still dominates.
pub fn plateaus_nonincreasing_in_alpha(rows: &[PlateauRow]) -> bool {
    let kept: Vec<&PlateauRow> = rows.iter().filter(|r| !r.divergent).collect();
    kept.windows(2).all(|w| w[0].plateau <= w[1].plateau)
}

#[cfg(test)]
mod tests;
