use rand::Rng;

use super::*;
use crate::hamiltonian::{HamiltonianOperator, OperatorConfig};
use crate::problems::{Lqr, LqrParams};
use crate::valuenet::{ValueFunction, ValueNetwork};

/// Box-Muller draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// `1 + 1/2 |theta|^2` observed through `theta + bias + sigma * noise`.
struct NoisyQuadratic {
    bias: Vec<f64>,
    sigma: f64,
}

impl StochasticObjective for NoisyQuadratic {
    fn dim(&self) -> usize {
        self.bias.len()
    }
    fn sample(&mut self, theta: &[f64], rng: &mut ChaCha8Rng, measure: bool) -> Result<Draw> {
        let direction = theta.iter().zip(&self.bias).map(|(t, b)| t + b + self.sigma * normal(rng)).collect();
        Ok(Draw { loss: self.reference_loss(theta)?, direction, true_grad: measure.then(|| theta.to_vec()) })
    }
    fn reference_loss(&mut self, theta: &[f64]) -> Result<f64> {
        Ok(1.0 + 0.5 * theta.iter().map(|t| t * t).sum::<f64>())
    }
}

#[test]
fn sgd_step_examples() {
    let mut theta = vec![1.0, -2.0];
    sgd_step(&mut theta, &[0.0, 0.0], 0.3).unwrap();
    assert_eq!(theta, vec![1.0, -2.0]);
    for _ in 0..5 {
        let before: f64 = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        let g = theta.clone();
        sgd_step(&mut theta, &g, 0.1).unwrap();
        let after: f64 = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!((after - 0.9 * before).abs() < 1e-15);
    }
    let snapshot = theta.clone();
    assert!(matches!(sgd_step(&mut theta, &[f64::NAN, 0.0], 0.1), Err(Error::NonFiniteDirection)));
    assert_eq!(theta, snapshot);
    assert!(sgd_step(&mut theta, &[1.0], 0.1).is_err());
    assert!(sgd_step(&mut theta, &[1.0, 1.0], -0.1).is_err());
}

#[test]
fn diminishing_schedule_values() {
    let s = Scheduler::new(Schedule::Diminishing { alpha0: 0.1, power: 1.0 }).unwrap();
    assert_eq!(s.alpha(0), 0.1);
    assert_eq!(s.alpha(1), 0.05);
    assert!((s.alpha(2) - 0.1 / 3.0).abs() < 1e-17);
    let s = Scheduler::new(Schedule::Diminishing { alpha0: 1.0, power: 0.75 }).unwrap();
    assert!((s.alpha(15) - 16f64.powf(-0.75)).abs() < 1e-15);
}

#[test]
fn schedule_validation() {
    for bad in [
        Schedule::Diminishing { alpha0: 0.1, power: 0.5 },
        Schedule::Diminishing { alpha0: 0.1, power: 1.2 },
        Schedule::Diminishing { alpha0: -0.1, power: 1.0 },
        Schedule::Constant { alpha: 0.0 },
        Schedule::Plateau { alpha0: 0.1, factor: 1.0, patience: 3 },
        Schedule::Plateau { alpha0: 0.1, factor: 0.5, patience: 0 },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(Schedule::Plateau { alpha0: 0.1, factor: 0.5, patience: 10 }.validate().is_ok());
}

#[test]
fn plateau_scheduler_halves_after_patience() {
    let mut s = Scheduler::new(Schedule::Plateau { alpha0: 0.1, factor: 0.5, patience: 2 }).unwrap();
    assert_eq!(s.end_epoch(1.0), None);
    assert_eq!(s.end_epoch(0.5), None);
    assert_eq!(s.end_epoch(0.6), None);
    assert_eq!(s.end_epoch(0.6), None);
    assert_eq!(s.end_epoch(0.7), Some(0.05));
    assert_eq!(s.alpha(100), 0.05);
    assert_eq!(s.end_epoch(0.4), None);
}

#[test]
fn cesaro_of_constant_sequence_is_constant() {
    let s = Scheduler::new(Schedule::Diminishing { alpha0: 0.3, power: 0.8 }).unwrap();
    let mut c = Cesaro::default();
    for j in 0..100 {
        c.push(s.alpha(j), 2.5);
        assert!((c.average() - 2.5).abs() < 1e-14);
    }
}

fn scalar_setup() -> (Lqr, ValueNetwork, OperatorConfig) {
    let lqr = Lqr::new(LqrParams::default(), 1).unwrap();
    let net = ValueNetwork::new(vec![2, 6, 1], 3).unwrap();
    let cfg = OperatorConfig { eta: 0.5, tol: 1e-10, ..OperatorConfig::default() };
    (lqr, net, cfg)
}

fn small_train(track_true_grad: bool) -> TrainConfig {
    TrainConfig {
        schedule: Schedule::Diminishing { alpha0: 0.1, power: 1.0 },
        batch_size: 4,
        epochs: 3,
        iterations_per_epoch: 5,
        seed: 11,
        track_true_grad,
        ..TrainConfig::default()
    }
}

#[test]
fn history_invariants_and_determinism() {
    let (lqr, net, cfg) = scalar_setup();
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let grid = Grid::new(10, 1.0).unwrap();
    let tc = small_train(true);
    let run = || train(&lqr, &op, net.params(), grid, &RolloutOptions::default(), &tc, |_| Ok(())).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.theta, b.theta);
    let recs = &a.history.records;
    assert_eq!(recs.len(), 15);
    assert!(recs.windows(2).all(|w| w[1].a_k > w[0].a_k));
    for (r, c) in recs.iter().zip(a.history.recompute_cesaro()) {
        assert!((r.cesaro_avg - c).abs() <= 1e-12 * c.abs().max(1.0));
        assert!(r.grad_norm_true.is_some());
        assert_eq!(r.work_units, 40);
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    a.history.write_csv(&mut x).unwrap();
    b.history.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
    assert_eq!(String::from_utf8(x).unwrap().lines().count(), 16);
}

#[test]
fn zero_step_keeps_the_loss() {
    let (lqr, net, cfg) = scalar_setup();
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let grid = Grid::new(5, 1.0).unwrap();
    let mut theta = net.params().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sample_batch(&lqr, &mut rng, 3);
    let opts = GradOptions::default();
    let mut losses = Vec::new();
    for _ in 0..2 {
        let est = estimate(Backend::Jfb, &lqr, &op, &theta, &batch, grid, &opts).unwrap();
        losses.push(est.loss);
        sgd_step(&mut theta, &est.direction, 0.0).unwrap();
    }
    assert_eq!(losses[0], losses[1]);
}

#[test]
fn audits_are_attached_to_records() {
    let (lqr, net, cfg) = scalar_setup();
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let grid = Grid::new(6, 1.0).unwrap();
    let tc = TrainConfig { audit_every: 4, ..small_train(false) };
    let mut seen = 0;
    let out = train(&lqr, &op, net.params(), grid, &RolloutOptions::default(), &tc, |p| {
        if p.audit.is_some() {
            seen += 1;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 4);
    let ids: Vec<usize> = out.history.records.iter().filter_map(|r| r.audit_id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3]);
    assert_eq!(out.history.audits.iter().map(|a| a.0).collect::<Vec<_>>(), vec![0, 4, 8, 12]);
    let mut csv = Vec::new();
    out.history.write_diagnostics_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
}

#[test]
fn failures_carry_the_iteration() {
    let (lqr, net, cfg) = scalar_setup();
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let grid = Grid::new(6, 1.0).unwrap();
    let opts = RolloutOptions { node_budget: Some(10), ..RolloutOptions::default() };
    let r = train(&lqr, &op, net.params(), grid, &opts, &small_train(false), |_| Ok(()));
    match r {
        Err(Error::Iteration { iteration: 0, source }) => assert!(is_budget(&source)),
        other => panic!("unexpected {:?}", other.err()),
    }
    let tc = TrainConfig { skip_failed_steps: true, ..small_train(false) };
    let out = train(&lqr, &op, net.params(), grid, &opts, &tc, |_| Ok(())).unwrap();
    assert_eq!(out.history.incidents.len(), 15);
    assert_eq!(out.theta, net.params());
}

#[test]
fn comparison_marks_budget_overruns_infeasible() {
    let (lqr, net, cfg) = scalar_setup();
    let op = HamiltonianOperator::new(&lqr, &net, &cfg).unwrap();
    let grid = Grid::new(6, 1.0).unwrap();
    let jfb_peak = estimate(Backend::Jfb, &lqr, &op, net.params(), &[vec![1.0]], grid, &GradOptions::default())
        .unwrap()
        .peak_nodes;
    let opts = RolloutOptions { node_budget: Some(jfb_peak + 5), ..RolloutOptions::default() };
    let runs =
        compare_backends(&lqr, &op, net.params(), grid, &opts, &small_train(false), &[Backend::Unrolled, Backend::Jfb])
            .unwrap();
    assert!(runs[0].outcome.is_none());
    assert!(!runs[0].rows.last().unwrap().feasible);
    let jfb = &runs[1];
    assert_eq!(jfb.rows.len(), 3);
    for (e, row) in jfb.rows.iter().enumerate() {
        assert_eq!(row.cum_work_units, (e + 1) * 5 * 4 * 6);
        assert!(row.feasible);
    }
}

#[test]
fn halving_the_step_lowers_the_plateau() {
    let mut obj = NoisyQuadratic { bias: vec![0.05, -0.02, 0.01], sigma: 1.0 };
    let alphas = [0.4, 0.2, 0.1, 0.05];
    let rows = neighborhood_experiment(&mut obj, &[1.0, 1.0, 1.0], &alphas, 4000, 5).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].plateau < w[0].plateau, "{rows:?}");
    }
    assert!(plateaus_monotone(&rows));
}

#[test]
fn vanishing_step_has_the_lowest_plateau() {
    let bias = vec![0.05, -0.02];
    let start: Vec<f64> = bias.iter().map(|b| -b).collect();
    let mut obj = NoisyQuadratic { bias, sigma: 1.0 };
    let rows = neighborhood_experiment(&mut obj, &start, &[0.2, 0.05, 1e-6], 20000, 9).unwrap();
    assert!(rows[2].plateau < rows[0].plateau && rows[2].plateau < rows[1].plateau);
}

#[test]
fn neighborhood_rejects_bad_input_and_flags_divergence() {
    let mut obj = NoisyQuadratic { bias: vec![0.0], sigma: 0.0 };
    assert!(neighborhood_experiment(&mut obj, &[1.0], &[0.1, 0.2], 10, 0).is_err());
    let rows = neighborhood_experiment(&mut obj, &[1.0], &[3.0, 0.5], 50, 0).unwrap();
    assert!(rows[0].divergent && !rows[1].divergent);
    assert!(plateaus_monotone(&rows));
}
