//! Empirical audits of the convergence assumptions at a frozen `theta`.
//!
//! All quantities are estimates over sampled `(t, z, u*)` points. Nothing
//! here is a certified bound.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::grad::{estimate, Backend, GradOptions, GradientEstimate, StepIntegrand};
use crate::hamiltonian::{FixedPointOperator, Session};
use crate::problems::ControlProblem;
use crate::rollout::{rollout, Grid, RolloutOptions, TrackMode, DENSE_SOLVE_LIMIT};

/// Below this eigenvalue of `M M^T` the operator is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Constants of the convergence theory that finite runs cannot identify.
pub const NOT_ESTIMATED: [&str; 6] = ["L_J", "J_inf", "a_v", "a_w", "delta_v", "delta_w"];

/// A point at which the operator is audited.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditPoint {
    pub t: f64,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

impl From<&StepIntegrand> for AuditPoint {
    fn from(s: &StepIntegrand) -> Self {
        AuditPoint { t: s.t, z: s.z.clone(), u: s.u.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIteration {
    pub sigma: f64,
    /// Change in the estimate over the last iteration.
    pub uncertainty: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest singular value of `a` by power iteration on `a^T a`.
pub fn power_iteration(a: &DMatrix<f64>, iters: usize, seed: u64) -> Result<PowerIteration> {
    if iters < 10 {
        return Err(Error::InvalidParameter(format!("power iteration needs at least 10 steps, got {iters}")));
    }
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return Ok(PowerIteration { sigma: 0.0, uncertainty: 0.0, iterations: 0, converged: true });
    }
    let ata = a.transpose() * a;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    x /= x.norm();
    let mut lambda = 0.0;
    let mut change = f64::INFINITY;
    for k in 1..=iters {
        let y = &ata * &x;
        let next = x.dot(&y);
        let norm = y.norm();
        change = (next - lambda).abs();
        lambda = next;
        if norm == 0.0 {
            return Ok(PowerIteration { sigma: 0.0, uncertainty: 0.0, iterations: k, converged: true });
        }
        x = y / norm;
        if change <= 1e-15 * lambda.abs().max(1.0) {
            return Ok(PowerIteration {
                sigma: lambda.max(0.0).sqrt(),
                uncertainty: change.sqrt(),
                iterations: k,
                converged: true,
            });
        }
    }
    Ok(PowerIteration {
        sigma: lambda.max(0.0).sqrt(),
        uncertainty: change.sqrt(),
        iterations: iters,
        converged: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contraction {
    pub gamma_hat: f64,
    pub uncertainty: f64,
    pub contractive: bool,
}

/// Worst-case `sigma_max(dT/du)` over `points`.
pub fn estimate_contraction(
    op: &dyn FixedPointOperator,
    theta: &[f64],
    points: &[AuditPoint],
    iters: usize,
) -> Result<Contraction> {
    let mut session = Session::new(op, theta)?;
    let mut gamma_hat = 0.0f64;
    let mut uncertainty = 0.0f64;
    for (i, pt) in points.iter().enumerate() {
        let jac = session.jacobian_u(pt.t, &pt.z, &pt.u)?;
        let pi = power_iteration(&jac, iters, i as u64)?;
        if pi.sigma >= gamma_hat {
            gamma_hat = pi.sigma;
        }
        uncertainty = uncertainty.max(pi.uncertainty);
    }
    Ok(Contraction { gamma_hat, uncertainty, contractive: gamma_hat < 1.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spectrum {
    pub sigma_min_m: f64,
    pub sigma_max_m: f64,
    /// Worst pointwise `lambda_max / lambda_min` of `M M^T`; absent when rank deficient.
    pub kappa_hat: Option<f64>,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub full_rank: bool,
}

impl Spectrum {
    pub fn beta_hat(&self) -> f64 {
        1.0 / (self.sigma_max_m * self.sigma_max_m)
    }
}

/// `M M^T` at one point, from the `m` rows of `M`.
pub fn gram(session: &mut Session<'_>, pt: &AuditPoint) -> Result<DMatrix<f64>> {
    let m = session.jacobian_theta(pt.t, &pt.z, &pt.u)?;
    Ok(&m * m.transpose())
}

/// Extreme eigenvalues of `M M^T` over `points`.
pub fn m_theta_spectrum(op: &dyn FixedPointOperator, theta: &[f64], points: &[AuditPoint]) -> Result<Spectrum> {
    let m = op.control_dim();
    if m > DENSE_SOLVE_LIMIT {
        return Err(Error::ControlDimTooLarge { m, limit: DENSE_SOLVE_LIMIT });
    }
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut session = Session::new(op, theta)?;
    let mut lambda_plus = 0.0f64;
    let mut lambda_minus = f64::INFINITY;
    let mut kappa = 1.0f64;
    for pt in points {
        let eig = SymmetricEigen::new(gram(&mut session, pt)?).eigenvalues;
        let hi = eig.max();
        let lo = eig.min().max(0.0);
        lambda_plus = lambda_plus.max(hi);
        lambda_minus = lambda_minus.min(lo);
        if lo > RANK_TOL {
            kappa = kappa.max(hi / lo);
        }
    }
    let full_rank = lambda_minus > RANK_TOL;
    Ok(Spectrum {
        sigma_min_m: lambda_minus.sqrt(),
        sigma_max_m: lambda_plus.sqrt(),
        kappa_hat: full_rank.then_some(kappa),
        lambda_plus,
        lambda_minus,
        full_rank,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    /// Absent when either direction vanishes.
    pub angle: Option<f64>,
    pub inner: f64,
    /// `<g, d> / |g|^2`; absent when `g` vanishes.
    pub epsilon_v: Option<f64>,
    pub descent: Option<bool>,
}

/// Angle and inner-product ratio between a true gradient `g` and a surrogate `d`.
pub fn alignment(g: &[f64], d: &[f64]) -> Alignment {
    let inner: f64 = g.iter().zip(d).map(|(a, b)| a * b).sum();
    let gg: f64 = g.iter().map(|a| a * a).sum();
    let dd: f64 = d.iter().map(|a| a * a).sum();
    let angle = (gg > 0.0 && dd > 0.0).then(|| (inner / (gg.sqrt() * dd.sqrt())).clamp(-1.0, 1.0).acos());
    Alignment {
        angle,
        inner,
        epsilon_v: (gg > 0.0).then(|| inner / gg),
        descent: angle.map(|a| a < std::f64::consts::FRAC_PI_2),
    }
}

/// Alignment of two estimates taken over the same batch and parameters.
pub fn alignment_report(truth: &GradientEstimate, jfb: &GradientEstimate) -> Result<Alignment> {
    if truth.direction.len() != jfb.direction.len() {
        return Err(Error::Dimension { what: "direction", expected: truth.direction.len(), got: jfb.direction.len() });
    }
    if truth.sample_losses != jfb.sample_losses {
        return Err(Error::InvalidParameter("alignment needs estimates over the same batch".into()));
    }
    Ok(alignment(&truth.direction, &jfb.direction))
}

/// `M v` at one point by a forward difference in `theta` along `v`.
pub fn directional_m(op: &dyn FixedPointOperator, theta: &[f64], pt: &AuditPoint, v: &[f64]) -> Result<Vec<f64>> {
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let eps = 1e-6 * (1.0 + norm(theta)) / (1.0 + norm(v));
    let shifted: Vec<f64> = theta.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let base = Session::new(op, theta)?.apply(pt.t, &pt.z, &pt.u)?;
    let moved = Session::new(op, &shifted)?.apply(pt.t, &pt.z, &pt.u)?;
    Ok(moved.iter().zip(&base).map(|(a, b)| (a - b) / eps).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepVariance {
    pub k: usize,
    pub var_v: f64,
    pub var_w: f64,
    /// `|E[M v]|^2`.
    pub mean_mv_sq: f64,
    /// `max(Var v, Var w)^2 / |E[M v]|^2`.
    pub ratio: f64,
    /// `max(Var v, Var w) / |E[M v]|^2`.
    pub ratio_unsquared: f64,
    /// `<E[v], E[w]>`.
    pub mean_inner: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceAudit {
    pub steps: Vec<StepVariance>,
    pub delta_var_hat: f64,
    pub delta_var_unsquared: f64,
    pub b_max_hat: f64,
}

impl VarianceAudit {
    /// `(lambda_- - gamma lambda_+ - delta_var) |E[M v]|^2` at each step.
    pub fn delta_theta_sq(&self, gamma: f64, spectrum: &Spectrum) -> Vec<f64> {
        let margin = spectrum.lambda_minus - gamma * spectrum.lambda_plus - self.delta_var_hat;
        self.steps.iter().map(|s| margin * s.mean_mv_sq).collect()
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Batch variances of `v` and `w` at every step, relative to `|E[M v]|^2`.
///
/// `samples[i][k]` holds the integrands of sample `i` at step `k`.
pub fn variance_audit(
    op: &dyn FixedPointOperator,
    theta: &[f64],
    samples: &[Vec<StepIntegrand>],
) -> Result<VarianceAudit> {
    if samples.len() < 2 {
        return Err(Error::BatchTooSmall { needed: 2, got: samples.len() });
    }
    let steps = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != steps) {
        return Err(Error::Dimension { what: "integrand steps", expected: steps, got: bad.len() });
    }
    let b = samples.len() as f64;
    let mut out = Vec::with_capacity(steps);
    let mut b_max_hat = 0.0f64;
    for k in 0..steps {
        let at: Vec<&StepIntegrand> = samples.iter().map(|s| &s[k]).collect();
        let mean = |f: fn(&StepIntegrand) -> &Vec<f64>| -> Vec<f64> {
            let mut acc = vec![0.0; f(at[0]).len()];
            for s in &at {
                acc.iter_mut().zip(f(s)).for_each(|(a, x)| *a += x / b);
            }
            acc
        };
        let var = |f: fn(&StepIntegrand) -> &Vec<f64>, mu: &[f64]| -> f64 {
            at.iter().map(|s| f(s).iter().zip(mu).map(|(x, m)| (x - m).powi(2)).sum::<f64>()).sum::<f64>() / b
        };
        let ev = mean(|s| &s.v);
        let ew = mean(|s| &s.w);
        let (var_v, var_w) = (var(|s| &s.v, &ev), var(|s| &s.w, &ew));
        let mut emv: Vec<f64> = Vec::new();
        for s in &at {
            let mv = directional_m(op, theta, &AuditPoint::from(*s), &s.v)?;
            if emv.is_empty() {
                emv = vec![0.0; mv.len()];
            }
            emv.iter_mut().zip(&mv).for_each(|(a, x)| *a += x / b);
            b_max_hat = b_max_hat.max(s.h.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        let mean_mv_sq: f64 = emv.iter().map(|x| x * x).sum();
        let top = var_v.max(var_w);
        out.push(StepVariance {
            k,
            var_v,
            var_w,
            mean_mv_sq,
            ratio: ratio(top * top, mean_mv_sq),
            ratio_unsquared: ratio(top, mean_mv_sq),
            mean_inner: ev.iter().zip(&ew).map(|(a, b)| a * b).sum(),
        });
    }
    let worst = |f: fn(&StepVariance) -> f64| out.iter().map(f).fold(0.0, f64::max);
    Ok(VarianceAudit {
        delta_var_hat: worst(|s| s.ratio),
        delta_var_unsquared: worst(|s| s.ratio_unsquared),
        b_max_hat,
        steps: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub gamma_hat: f64,
    pub gamma_uncertainty: f64,
    pub contractive: bool,
    #[serde(rename = "sigma_min_M")]
    pub sigma_min_m: f64,
    #[serde(rename = "sigma_max_M")]
    pub sigma_max_m: f64,
    pub beta_hat: Option<f64>,
    pub kappa_hat: Option<f64>,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub full_rank: bool,
    #[serde(rename = "B_max_hat")]
    pub b_max_hat: Option<f64>,
    pub delta_var_hat: Option<f64>,
    pub delta_var_unsquared: Option<f64>,
    pub delta_theta_sq_hat: Option<f64>,
    pub epsilon_v_hat: Option<f64>,
    pub angle: Option<f64>,
    pub descent: Option<bool>,
    pub nonconverged_rate: f64,
    #[serde(rename = "pass_A1")]
    pub pass_a1: bool,
    #[serde(rename = "pass_A3")]
    pub pass_a3: bool,
    #[serde(rename = "pass_A4")]
    pub pass_a4: bool,
    pub samples: usize,
    pub points: usize,
    pub not_estimated: Vec<String>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl DiagnosticsReport {
    pub fn assemble(
        contraction: &Contraction,
        spectrum: &Spectrum,
        variance: Option<&VarianceAudit>,
        align: Option<&Alignment>,
        nonconverged_rate: f64,
        samples: usize,
        points: usize,
    ) -> Self {
        let gamma = contraction.gamma_hat;
        let pass_a1 = contraction.contractive;
        let pass_a3 = pass_a1 && spectrum.kappa_hat.is_some_and(|k| k * gamma < 1.0);
        let margin = spectrum.lambda_minus - gamma * spectrum.lambda_plus;
        let delta_var_hat = variance.and_then(|v| finite(v.delta_var_hat));
        let pass_a4 = pass_a3 && delta_var_hat.is_some_and(|d| d < margin);
        let delta_theta_sq_hat = match (variance, delta_var_hat) {
            (Some(v), Some(_)) => finite(v.delta_theta_sq(gamma, spectrum).into_iter().fold(f64::INFINITY, f64::min)),
            _ => None,
        };
        DiagnosticsReport {
            gamma_hat: gamma,
            gamma_uncertainty: contraction.uncertainty,
            contractive: contraction.contractive,
            sigma_min_m: spectrum.sigma_min_m,
            sigma_max_m: spectrum.sigma_max_m,
            beta_hat: finite(spectrum.beta_hat()),
            kappa_hat: spectrum.kappa_hat,
            lambda_plus: spectrum.lambda_plus,
            lambda_minus: spectrum.lambda_minus,
            full_rank: spectrum.full_rank,
            b_max_hat: variance.map(|v| v.b_max_hat),
            delta_var_hat,
            delta_var_unsquared: variance.and_then(|v| finite(v.delta_var_unsquared)),
            delta_theta_sq_hat,
            epsilon_v_hat: align.and_then(|a| a.epsilon_v),
            angle: align.and_then(|a| a.angle),
            descent: align.and_then(|a| a.descent),
            nonconverged_rate,
            pass_a1,
            pass_a3,
            pass_a4,
            samples,
            points,
            not_estimated: NOT_ESTIMATED.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub const CSV_HEADER: &'static str = "epoch,gamma_hat,sigma_min_M,sigma_max_M,kappa_hat,angle,epsilon_v_hat,\
delta_var_hat,B_max_hat,nonconverged_rate,pass_A1,pass_A3,pass_A4";

    /// One diagnostics CSV row; absent values are left empty.
    pub fn write_csv_row(&self, epoch: usize, mut out: impl Write) -> Result<()> {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
        writeln!(
            out,
            "{epoch},{:e},{:e},{:e},{},{},{},{},{},{:e},{},{},{}",
            self.gamma_hat,
            self.sigma_min_m,
            self.sigma_max_m,
            opt(self.kappa_hat),
            opt(self.angle),
            opt(self.epsilon_v_hat),
            opt(self.delta_var_hat),
            opt(self.b_max_hat),
            self.nonconverged_rate,
            self.pass_a1,
            self.pass_a3,
            self.pass_a4,
        )?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

const NUMBER_FIELDS: [&str; 6] =
    ["gamma_uncertainty", "sigma_min_M", "sigma_max_M", "lambda_plus", "lambda_minus", "nonconverged_rate"];
const OPTIONAL_NUMBER_FIELDS: [&str; 8] = [
    "beta_hat",
    "kappa_hat",
    "B_max_hat",
    "delta_var_hat",
    "delta_var_unsquared",
    "delta_theta_sq_hat",
    "epsilon_v_hat",
    "angle",
];
const BOOL_FIELDS: [&str; 5] = ["contractive", "full_rank", "pass_A1", "pass_A3", "pass_A4"];

/// JSON Schema of [`DiagnosticsReport`].
pub fn report_schema() -> Value {
    let mut props = serde_json::Map::new();
    for f in NUMBER_FIELDS {
        props.insert(f.into(), json!({"type": "number"}));
    }
    props.insert("points".into(), json!({"type": "integer", "minimum": 0}));
    props.insert("samples".into(), json!({"type": "integer", "minimum": 0}));
    props.insert("gamma_hat".into(), json!({"type": "number", "minimum": 0}));
    for f in OPTIONAL_NUMBER_FIELDS {
        props.insert(f.into(), json!({"type": ["number", "null"]}));
    }
    props.insert("kappa_hat".into(), json!({"type": ["number", "null"], "minimum": 1}));
    props.insert("angle".into(), json!({"type": ["number", "null"], "minimum": 0, "maximum": std::f64::consts::PI}));
    for f in BOOL_FIELDS {
        props.insert(f.into(), json!({"type": "boolean"}));
    }
    props.insert("descent".into(), json!({"type": ["boolean", "null"]}));
    props.insert("not_estimated".into(), json!({"type": "array", "items": {"type": "string"}}));
    let required: Vec<&String> = props.keys().collect();
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "DiagnosticsReport",
        "type": "object",
        "additionalProperties": false,
        "required": required,
        "properties": props,
    })
}

fn type_matches(ty: &str, v: &Value) -> bool {
    match ty {
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64(),
        "boolean" => v.is_boolean(),
        "string" => v.is_string(),
        "array" => v.is_array(),
        "null" => v.is_null(),
        "object" => v.is_object(),
        _ => false,
    }
}

/// Checks `value` against [`report_schema`]: required keys, no extra keys,
/// types, and numeric bounds.
pub fn validate_report(value: &Value) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidParameter(format!("diagnostics report: {msg}")));
    let schema = report_schema();
    let Some(obj) = value.as_object() else {
        return bad("not an object".into());
    };
    let props = schema["properties"].as_object().expect("schema properties");
    for key in obj.keys() {
        if !props.contains_key(key) {
            return bad(format!("unknown field {key}"));
        }
    }
    for (key, rule) in props {
        let Some(v) = obj.get(key) else {
            return bad(format!("missing field {key}"));
        };
        let ok = match &rule["type"] {
            Value::String(ty) => type_matches(ty, v),
            Value::Array(tys) => tys.iter().any(|t| t.as_str().is_some_and(|t| type_matches(t, v))),
            _ => false,
        };
        if !ok {
            return bad(format!("field {key} has the wrong type"));
        }
        if let Some(x) = v.as_f64() {
            if rule["minimum"].as_f64().is_some_and(|lo| x < lo) || rule["maximum"].as_f64().is_some_and(|hi| x > hi) {
                return bad(format!("field {key} = {x} is out of range"));
            }
        }
        if let (Some(items), Some(arr)) = (rule.get("items"), v.as_array()) {
            let ty = items["type"].as_str().unwrap_or("");
            if !arr.iter().all(|x| type_matches(ty, x)) {
                return bad(format!("field {key} has an element of the wrong type"));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub power_iters: usize,
    /// Audit every `stride`-th time step.
    pub stride: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { power_iters: 200, stride: 1 }
    }
}

/// Everything an audit produced, before it is flattened into a report.
#[derive(Clone, Debug)]
pub struct Audit {
    pub report: DiagnosticsReport,
    /// `None` when the fixed-point Jacobian was not invertible somewhere
    /// along the batch; the report then carries no alignment or variance.
    pub truth: Option<GradientEstimate>,
    pub jfb: GradientEstimate,
    pub contraction: Contraction,
    pub spectrum: Spectrum,
    pub variance: Option<VarianceAudit>,
}

/// Full audit over `batch` at parameters `theta`.
pub fn audit(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    rollout: &RolloutOptions,
    cfg: &AuditConfig,
) -> Result<Audit> {
    if cfg.stride == 0 {
        return Err(Error::InvalidParameter("audit stride must be at least 1".into()));
    }
    let opts = GradOptions { rollout: rollout.clone(), retain_integrands: true };
    let plain = GradOptions { rollout: rollout.clone(), retain_integrands: false };
    let truth = match estimate(Backend::Implicit, problem, op, theta, batch, grid, &opts) {
        Ok(t) => Some(t),
        Err(e) if is_singular(&e) => None,
        Err(e) => return Err(e),
    };
    let jfb = estimate(Backend::Jfb, problem, op, theta, batch, grid, &plain)?;
    let strided: Vec<Vec<StepIntegrand>> = match &truth {
        Some(t) => t
            .integrands
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .map(|s| s.iter().step_by(cfg.stride).cloned().collect())
            .collect(),
        None => Vec::new(),
    };
    let points: Vec<AuditPoint> = match &truth {
        Some(_) => strided.iter().flatten().map(AuditPoint::from).collect(),
        None => trajectory_points(problem, op, theta, batch, grid, rollout, cfg.stride)?,
    };
    let contraction = estimate_contraction(op, theta, &points, cfg.power_iters)?;
    let spectrum = m_theta_spectrum(op, theta, &points)?;
    let variance = match &truth {
        Some(_) if batch.len() >= 2 => Some(variance_audit(op, theta, &strided)?),
        _ => None,
    };
    let align = truth.as_ref().map(|t| alignment_report(t, &jfb)).transpose()?;
    let report = DiagnosticsReport::assemble(
        &contraction,
        &spectrum,
        variance.as_ref(),
        align.as_ref(),
        jfb.nonconverged_rate(),
        batch.len(),
        points.len(),
    );
    Ok(Audit { report, truth, jfb, contraction, spectrum, variance })
}

fn is_singular(e: &Error) -> bool {
    match e {
        Error::SingularJacobian { .. } => true,
        Error::Sample { source, .. } | Error::Iteration { source, .. } => is_singular(source),
        _ => false,
    }
}

/// Audit points from untracked rollouts.
fn trajectory_points(
    problem: &dyn ControlProblem,
    op: &dyn FixedPointOperator,
    theta: &[f64],
    batch: &[Vec<f64>],
    grid: Grid,
    opts: &RolloutOptions,
    stride: usize,
) -> Result<Vec<AuditPoint>> {
    let mut points = Vec::new();
    for (i, x) in batch.iter().enumerate() {
        let traj = rollout(problem, op, theta, x, grid, opts, TrackMode::None).map_err(|e| e.in_sample(i))?;
        for k in (0..grid.steps).step_by(stride) {
            points.push(AuditPoint { t: grid.time(k), z: traj.states[k].clone(), u: traj.fixed_points[k].clone() });
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests;
