use std::f64::consts::PI;

use super::*;
use crate::hamiltonian::{HamiltonianOperator, OperatorConfig};
use crate::problems::{Lqr, LqrParams, MatrixSpec};
use crate::tape::{NodeId, Tape};
use crate::valuenet::{Binding, ValueFunction, ValueNetwork};

/// `T(u) = u / 2 + scale * theta[..m]`, or `theta[0] * 1` when `rank_one`.
struct Shift {
    m: usize,
    n: usize,
    scale: f64,
    rank_one: bool,
    cfg: OperatorConfig,
}

impl Shift {
    fn new(m: usize, n: usize, scale: f64) -> Self {
        let cfg = OperatorConfig { eta: 1.0, tol: 1e-14, max_iter: 200, warm_start: true };
        Shift { m, n, scale, rank_one: false, cfg }
    }
}

impl FixedPointOperator for Shift {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn param_count(&self) -> usize {
        if self.rank_one {
            1
        } else {
            self.m
        }
    }
    fn config(&self) -> &OperatorConfig {
        &self.cfg
    }
    fn bind(&self, _tape: &mut Tape, theta: NodeId) -> Result<Binding> {
        Ok(Binding::new(theta, vec![]))
    }
    fn apply(&self, tape: &mut Tape, b: &Binding, _t: f64, _z: NodeId, u: NodeId) -> Result<NodeId> {
        let half = tape.scale(u, 0.5);
        let shift = if self.rank_one {
            let ones = tape.constant(crate::tape::Tensor::vector(vec![1.0; self.m]));
            let th = tape.index(b.theta, 0)?;
            tape.mul(ones, th)?
        } else {
            b.theta
        };
        let shift = tape.scale(shift, self.scale);
        Ok(tape.add(half, shift)?)
    }
    fn initial_control(&self, _z: &[f64]) -> Vec<f64> {
        vec![0.0; self.m]
    }
}

fn lqr2() -> Lqr {
    Lqr::new(
        LqrParams {
            n: 2,
            m: 2,
            a: MatrixSpec::Rows(vec![vec![0.0, 1.0], vec![-0.5, -0.1]]),
            b: MatrixSpec::Rows(vec![vec![0.2, 0.0], vec![1.0, 0.5]]),
            q: MatrixSpec::Scalar(1.0),
            r: MatrixSpec::Rows(vec![vec![1.0, 0.0], vec![0.0, 2.0]]),
            q_t: MatrixSpec::Scalar(2.0),
            ..LqrParams::default()
        },
        1,
    )
    .unwrap()
}

fn point(n: usize, m: usize, t: f64) -> AuditPoint {
    AuditPoint { t, z: (0..n).map(|i| 0.3 - 0.2 * i as f64).collect(), u: (0..m).map(|i| 0.1 * i as f64).collect() }
}

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn power_iteration_matches_dense_svd() {
    for seed in 0..20 {
        let m = 1 + (seed as usize % 8);
        let a = rand_matrix(m, m, seed);
        let sv = a.singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        if s.len() > 1 && s[0] - s[1] < 0.01 {
            continue;
        }
        let pi = power_iteration(&a, 5000, seed).unwrap();
        assert!((pi.sigma - s[0]).abs() < 1e-6, "m={m}: {} vs {}", pi.sigma, s[0]);
    }
    assert!(power_iteration(&DMatrix::identity(2, 2), 9, 0).is_err());
    assert_eq!(power_iteration(&DMatrix::zeros(3, 3), 10, 0).unwrap().sigma, 0.0);
}

#[test]
fn lqr_contraction_is_one_minus_eta() {
    let lqr = Lqr::new(LqrParams { n: 2, m: 2, b: MatrixSpec::Scalar(1.0), ..LqrParams::default() }, 1).unwrap();
    let net = ValueNetwork::new(vec![3, 6, 1], 1).unwrap();
    let pts = vec![point(2, 2, 0.0), point(2, 2, 0.5)];
    for (eta, expected, contractive) in
        [(0.01, 0.99, true), (0.1, 0.9, true), (0.5, 0.5, true), (1.0, 0.0, true), (3.0, 2.0, false)]
    {
        let cfg = OperatorConfig { eta, ..OperatorConfig::default() };
        let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
        let c = estimate_contraction(&op, net.params(), &pts, 50).unwrap();
        assert!((c.gamma_hat - expected).abs() < 1e-6, "eta={eta}: {}", c.gamma_hat);
        assert_eq!(c.contractive, contractive);
    }
}

#[test]
fn shift_operator_spectrum() {
    let pts = vec![point(1, 3, 0.0)];
    let s = m_theta_spectrum(&Shift::new(3, 1, 1.0), &[0.0; 3], &pts).unwrap();
    assert!((s.sigma_max_m - 1.0).abs() < 1e-14 && (s.sigma_min_m - 1.0).abs() < 1e-14);
    assert!((s.kappa_hat.unwrap() - 1.0).abs() < 1e-12);
    let s2 = m_theta_spectrum(&Shift::new(3, 1, 2.0), &[0.0; 3], &pts).unwrap();
    assert!((s2.sigma_max_m - 2.0).abs() < 1e-14 && (s2.sigma_min_m - 2.0).abs() < 1e-14);
    assert!((s2.kappa_hat.unwrap() - 1.0).abs() < 1e-12);
    assert!((s2.beta_hat() - 0.25).abs() < 1e-14);
}

#[test]
fn gram_route_matches_svd_of_assembled_m() {
    let lqr = lqr2();
    let net = ValueNetwork::new(vec![3, 8, 8, 1], 4).unwrap();
    assert!(net.param_count() <= 200);
    let cfg = OperatorConfig { eta: 0.4, ..OperatorConfig::default() };
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    for (i, pt) in [point(2, 2, 0.1), point(2, 2, 0.7)].iter().enumerate() {
        let spec = m_theta_spectrum(&op, net.params(), std::slice::from_ref(pt)).unwrap();
        let m = Session::new(&op, net.params()).unwrap().jacobian_theta(pt.t, &pt.z, &pt.u).unwrap();
        let sv = m.singular_values();
        assert!((spec.sigma_max_m - sv.max()).abs() < 1e-8, "point {i}");
        assert!((spec.sigma_min_m - sv.min()).abs() < 1e-8, "point {i}");
    }
}

#[test]
fn rank_deficient_operator_fails_conditioning() {
    let mut op = Shift::new(2, 2, 1.0);
    op.rank_one = true;
    let pts = vec![point(2, 2, 0.0)];
    let s = m_theta_spectrum(&op, &[0.3], &pts).unwrap();
    assert!(!s.full_rank);
    assert_eq!(s.kappa_hat, None);
    let c = estimate_contraction(&op, &[0.3], &pts, 20).unwrap();
    let r = DiagnosticsReport::assemble(&c, &s, None, None, 0.0, 1, 1);
    assert!(r.pass_a1);
    assert!(!r.pass_a3);
    assert!(!r.pass_a4);
    validate_report(&r.to_json()).unwrap();
}

#[test]
fn alignment_trivial_cases() {
    let g = [1.0, -2.0, 0.5];
    let a = alignment(&g, &g);
    assert!(a.angle.unwrap().abs() < 1e-7);
    assert!((a.epsilon_v.unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(a.descent, Some(true));
    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
    let b = alignment(&g, &neg);
    assert!((b.angle.unwrap() - PI).abs() < 1e-7);
    assert_eq!(b.descent, Some(false));
    let c = alignment(&[0.0; 3], &g);
    assert_eq!((c.angle, c.epsilon_v, c.descent), (None, None, None));
}

fn integrand(v: Vec<f64>, w: Vec<f64>, h: Vec<f64>) -> StepIntegrand {
    StepIntegrand { t: 0.0, z: vec![0.0, 0.0], u: vec![0.0, 0.0], h, v, w }
}

#[test]
fn two_sample_variance_by_hand() {
    let op = Shift::new(2, 2, 1.0);
    let samples = vec![
        vec![integrand(vec![1.0, 0.0], vec![1.0, 0.0], vec![3.0, 4.0])],
        vec![integrand(vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0])],
    ];
    let audit = variance_audit(&op, &[0.0, 0.0], &samples).unwrap();
    let s = &audit.steps[0];
    assert!((s.var_v - 0.5).abs() < 1e-15 && (s.var_w - 0.5).abs() < 1e-15);
    assert!((s.mean_mv_sq - 0.5).abs() < 1e-8);
    assert!((audit.delta_var_hat - 0.5).abs() < 1e-7);
    assert!((audit.delta_var_unsquared - 1.0).abs() < 1e-7);
    assert!((audit.b_max_hat - 5.0).abs() < 1e-15);
    assert!((s.mean_inner - 0.5).abs() < 1e-15);
    assert!(matches!(variance_audit(&op, &[0.0, 0.0], &samples[..1]), Err(Error::BatchTooSmall { .. })));
}

#[test]
fn directional_difference_matches_gram_route() {
    let lqr = lqr2();
    let net = ValueNetwork::new(vec![3, 6, 1], 2).unwrap();
    let cfg = OperatorConfig { eta: 0.4, ..OperatorConfig::default() };
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let pt = point(2, 2, 0.2);
    let mut session = Session::new(&op, net.params()).unwrap();
    let y = [0.7, -1.3];
    let v = session.vjp_theta(pt.t, &pt.z, &pt.u, &y).unwrap();
    let exact = gram(&mut session, &pt).unwrap() * nalgebra::DVector::from_column_slice(&y);
    let fd = directional_m(&op, net.params(), &pt, &v).unwrap();
    let err: f64 = fd.iter().zip(exact.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err / exact.norm() < 1e-4, "{}", err / exact.norm());
}

#[test]
fn identical_initial_states_have_zero_variance() {
    let lqr = lqr2();
    let net = ValueNetwork::new(vec![3, 5, 1], 3).unwrap();
    let cfg = OperatorConfig { eta: 0.4, tol: 1e-12, ..OperatorConfig::default() };
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let batch = vec![vec![0.5, -0.2]; 3];
    let a = audit(
        &lqr,
        &op,
        net.params(),
        &batch,
        Grid::new(6, 1.0).unwrap(),
        &RolloutOptions::default(),
        &AuditConfig::default(),
    )
    .unwrap();
    assert!(a.report.delta_var_hat.unwrap() < 1e-30);
}

#[test]
fn full_audit_is_internally_consistent() {
    let lqr = lqr2();
    let net = ValueNetwork::new(vec![3, 5, 1], 3).unwrap();
    let cfg = OperatorConfig { eta: 0.4, tol: 1e-12, ..OperatorConfig::default() };
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let batch = vec![vec![0.5, -0.2], vec![1.0, 0.3], vec![-0.4, 0.8], vec![0.1, 0.1]];
    let grid = Grid::new(8, 1.0).unwrap();
    let a = audit(&lqr, &op, net.params(), &batch, grid, &RolloutOptions::default(), &AuditConfig::default()).unwrap();
    let r = &a.report;
    assert!(r.gamma_hat >= 0.0 && r.kappa_hat.unwrap() >= 1.0);
    assert!(r.angle.is_some_and(|x| (0.0..=PI).contains(&x)));
    assert_eq!(r.points, 32);
    assert_eq!(r.samples, 4);
    if let Some(d) = r.delta_theta_sq_hat {
        assert_eq!(d >= 0.0, r.pass_a4, "{r:?}");
    }
    let json = r.to_json();
    validate_report(&json).unwrap();
    let back: DiagnosticsReport = serde_json::from_value(json).unwrap();
    assert_eq!(&back, r);
    let mut row = Vec::new();
    r.write_csv_row(3, &mut row).unwrap();
    let row = String::from_utf8(row).unwrap();
    assert_eq!(row.trim().split(',').count(), DiagnosticsReport::CSV_HEADER.split(',').count());
    assert!(row.starts_with("3,"));
}

#[test]
fn expansive_operator_still_reports() {
    let lqr = Lqr::new(LqrParams::default(), 1).unwrap();
    let net = ValueNetwork::new(vec![2, 4, 1], 1).unwrap();
    let cfg = OperatorConfig { eta: 2.5, tol: 1e-10, max_iter: 5, ..OperatorConfig::default() };
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let batch = vec![vec![0.5], vec![-0.7]];
    let grid = Grid::new(6, 1.0).unwrap();
    let a = audit(&lqr, &op, net.params(), &batch, grid, &RolloutOptions::default(), &AuditConfig::default()).unwrap();
    assert!(a.truth.is_none());
    assert!((a.report.gamma_hat - 1.5).abs() < 1e-4);
    assert!(!a.report.pass_a1 && !a.report.pass_a3 && !a.report.pass_a4);
    assert!(a.report.angle.is_none() && a.report.delta_var_hat.is_none());
    assert_eq!(a.report.points, 12);
    validate_report(&a.report.to_json()).unwrap();
}

#[test]
fn alignment_lower_bound_holds_when_audits_pass() {
    let lqr = lqr2();
    let op = Shift::new(2, 2, 1.0);
    let batch = vec![vec![0.5, -0.2], vec![0.6, -0.1], vec![0.55, -0.25]];
    let grid = Grid::new(6, 1.0).unwrap();
    let a = audit(&lqr, &op, &[0.2, -0.1], &batch, grid, &RolloutOptions::default(), &AuditConfig::default()).unwrap();
    let r = &a.report;
    assert!(r.pass_a1 && r.pass_a3 && r.pass_a4, "{r:?}");
    let variance = a.variance.as_ref().unwrap();
    let bounds = variance.delta_theta_sq(r.gamma_hat, &a.spectrum);
    for (s, d) in variance.steps.iter().zip(bounds) {
        assert!(s.mean_inner >= d - 1e-8, "step {}: {} < {d}", s.k, s.mean_inner);
    }
}

#[test]
fn schema_rejects_malformed_reports() {
    let op = Shift::new(2, 2, 1.0);
    let pts = vec![point(2, 2, 0.0)];
    let c = estimate_contraction(&op, &[0.0, 0.0], &pts, 20).unwrap();
    let s = m_theta_spectrum(&op, &[0.0, 0.0], &pts).unwrap();
    let good = DiagnosticsReport::assemble(&c, &s, None, Some(&alignment(&[1.0], &[1.0])), 0.0, 1, 1).to_json();
    validate_report(&good).unwrap();
    let mut extra = good.clone();
    extra["surprise"] = json!(1);
    assert!(validate_report(&extra).is_err());
    let mut wrong = good.clone();
    wrong["pass_A1"] = json!(1.0);
    assert!(validate_report(&wrong).is_err());
    let mut range = good.clone();
    range["angle"] = json!(4.0);
    assert!(validate_report(&range).is_err());
    let mut missing = good;
    missing.as_object_mut().unwrap().remove("gamma_hat");
    assert!(validate_report(&missing).is_err());
    assert_eq!(report_schema()["required"].as_array().unwrap().len(), 24);
}
