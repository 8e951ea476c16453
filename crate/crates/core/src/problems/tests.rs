use rand::{Rng, SeedableRng};

use super::*;
use crate::tape::Tensor;

fn table(src: &str) -> toml::Table {
    src.parse().unwrap()
}

fn suite() -> Vec<Box<dyn ControlProblem>> {
    vec![
        make_problem("lqr", 1, &table("n = 2\nm = 2\na = [[0.1, 1.0], [-0.5, 0.2]]\nb = [[1.0, 0.0], [0.4, 2.0]]\nq = 1.0\nr = 0.5\nq_t = 3.0")).unwrap(),
        make_problem("quadrotor", 2, &table("c_int = 0.7\nu_max = 5.0")).unwrap(),
        make_problem("bicycle", 2, &table("c_int = 0.3")).unwrap(),
        make_problem("consumption", 2, &table("products = 2")).unwrap(),
    ]
}

/// A random admissible `(z, u)` pair away from projection boundaries.
fn random_point(problem: &dyn ControlProblem, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut z = problem.sample_initial(rng);
    let m = problem.control_dim();
    let u = match problem.name() {
        "quadrotor" => {
            for (k, v) in z.iter_mut().enumerate() {
                if k % 12 >= 3 {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
            (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()
        }
        "consumption" => {
            let c = problem.initial_control(&z);
            c.iter().map(|v| v - 0.5 + rng.gen_range(0.2..1.0)).collect()
        }
        _ => (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    (z, u)
}

#[derive(Clone, Copy)]
enum Which {
    Dynamics,
    Running,
    Terminal,
}

fn eval(problem: &dyn ControlProblem, which: Which, t: f64, z: &[f64], u: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let zn = tape.vector(z.to_vec());
    let un = tape.vector(u.to_vec());
    let out = match which {
        Which::Dynamics => problem.dynamics(&mut tape, t, zn, un),
        Which::Running => problem.running_cost(&mut tape, t, zn, un),
        Which::Terminal => problem.terminal_cost(&mut tape, t, zn),
    }
    .unwrap();
    tape.value(out).data().to_vec()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` over the concatenated input `x`.
fn fd_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn dynamics_and_costs_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for problem in suite() {
        let (n, m) = (problem.state_dim(), problem.control_dim());
        for _ in 0..50 {
            let (z, u) = random_point(problem.as_ref(), &mut rng);
            let t = rng.gen_range(0.0..1.0);
            for which in [Which::Dynamics, Which::Running, Which::Terminal] {
                let out_len = eval(problem.as_ref(), which, t, &z, &u).len();
                let c: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

                let mut tape = Tape::new();
                let zn = tape.leaf(Tensor::vector(z.clone()));
                let un = tape.leaf(Tensor::vector(u.clone()));
                let out = match which {
                    Which::Dynamics => problem.dynamics(&mut tape, t, zn, un),
                    Which::Running => problem.running_cost(&mut tape, t, zn, un),
                    Which::Terminal => problem.terminal_cost(&mut tape, t, zn),
                }
                .unwrap();
                let shape = tape.shape(out);
                let g = tape.vjp(out, &[zn, un], Tensor::new(shape, c.clone())).unwrap();
                let analytic: Vec<f64> = g[0].data().iter().chain(g[1].data()).copied().collect();

                let x: Vec<f64> = z.iter().chain(&u).copied().collect();
                let fd = fd_grad(&x, |x| dot(&c, &eval(problem.as_ref(), which, t, &x[..n], &x[n..n + m])));
                let e = rel_err(&analytic, &fd);
                assert!(e <= 1e-6, "{}: rel err {e}", problem.name());
            }
        }
    }
}

/// The hand-written control gradient against reverse mode applied to
/// `-<p, f> - L`.
#[test]
fn hamiltonian_gradient_matches_reverse_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for problem in suite() {
        for _ in 0..20 {
            let (z, u) = random_point(problem.as_ref(), &mut rng);
            let p: Vec<f64> = (0..problem.state_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = rng.gen_range(0.0..1.0);
            let mut tape = Tape::new();
            let zn = tape.vector(z.clone());
            let un = tape.leaf(Tensor::vector(u.clone()));
            let pn = tape.vector(p.clone());
            let f = problem.dynamics(&mut tape, t, zn, un).unwrap();
            let l = problem.running_cost(&mut tape, t, zn, un).unwrap();
            let pf = tape.dot(pn, f).unwrap();
            let s = tape.add(pf, l).unwrap();
            let h = tape.neg(s);
            let reference = tape.grad(h, &[un]).unwrap().remove(0);
            let g = problem.hamiltonian_grad_u(&mut tape, t, zn, un, pn).unwrap();
            let e = rel_err(tape.value(g).data(), reference.data());
            assert!(e <= 1e-12, "{}: {e}", problem.name());
        }
    }
}

#[test]
fn hamiltonian_gradient_is_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for problem in suite() {
        let (n, m) = (problem.state_dim(), problem.control_dim());
        for _ in 0..10 {
            let (z, u) = random_point(problem.as_ref(), &mut rng);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = 0.3;
            let value = |x: &[f64]| {
                let mut tape = Tape::new();
                let zn = tape.vector(x[..n].to_vec());
                let un = tape.vector(x[n..n + m].to_vec());
                let pn = tape.vector(x[n + m..].to_vec());
                let g = problem.hamiltonian_grad_u(&mut tape, t, zn, un, pn).unwrap();
                dot(&c, tape.value(g).data())
            };
            let mut tape = Tape::new();
            let zn = tape.leaf(Tensor::vector(z.clone()));
            let un = tape.leaf(Tensor::vector(u.clone()));
            let pn = tape.leaf(Tensor::vector(p.clone()));
            let g = problem.hamiltonian_grad_u(&mut tape, t, zn, un, pn).unwrap();
            let grads = tape.vjp(g, &[zn, un, pn], Tensor::vector(c.clone())).unwrap();
            let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
            let x: Vec<f64> = z.iter().chain(&u).chain(&p).copied().collect();
            let e = rel_err(&analytic, &fd_grad(&x, value));
            assert!(e <= 1e-6, "{}: {e}", problem.name());
        }
    }
}

#[test]
fn agents_are_decoupled_in_the_dynamics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for problem in suite().into_iter().skip(1) {
        let (n, m) = (problem.state_dim(), problem.control_dim());
        let (sa, ca) = (n / problem.agents(), m / problem.agents());
        let (z, u) = random_point(problem.as_ref(), &mut rng);
        let base = eval(problem.as_ref(), Which::Dynamics, 0.2, &z, &u);
        let mut u2 = u.clone();
        for v in &mut u2[..ca] {
            *v += 0.1;
        }
        let moved = eval(problem.as_ref(), Which::Dynamics, 0.2, &z, &u2);
        assert_eq!(&base[sa..], &moved[sa..], "{}", problem.name());
        assert_ne!(&base[..sa], &moved[..sa], "{}", problem.name());
    }
}

#[test]
fn wealth_dynamics_are_affine() {
    let problem = make_problem("consumption", 1, &table("products = 3")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (z, u) = random_point(problem.as_ref(), &mut rng);
        let d: Vec<f64> = (0..z.len()).map(|i| if i == 0 { rng.gen_range(-0.5..0.5) } else { 0.0 }).collect();
        let du: Vec<f64> = (0..u.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let at = |s: f64| {
            let zs: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            let us: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + s * b).collect();
            eval(problem.as_ref(), Which::Dynamics, 0.0, &zs, &us)[0]
        };
        let second = at(1.0) - 2.0 * at(0.0) + at(-1.0);
        assert!(second.abs() <= 1e-12, "{second}");
    }
}

#[test]
fn problem_dimensions() {
    let empty = toml::Table::new();
    let quad = make_problem("quadrotor", 100, &empty).unwrap();
    assert_eq!((quad.state_dim(), quad.control_dim()), (1200, 400));
    let bike = make_problem("bicycle", 100, &empty).unwrap();
    assert_eq!((bike.state_dim(), bike.control_dim()), (400, 200));
    let lqr = make_problem("lqr", 1, &empty).unwrap();
    assert_eq!((lqr.state_dim(), lqr.control_dim()), (1, 1));
    let cons = make_problem("consumption", 100, &empty).unwrap();
    assert_eq!((cons.state_dim(), cons.control_dim()), (200, 100));
}

#[test]
fn construction_errors() {
    assert!(matches!(
        make_problem("pendulum", 1, &toml::Table::new()),
        Err(Error::UnknownProblem(name)) if name == "pendulum"
    ));
    match make_problem("quadrotor", 1, &table("c_uu = 1.0")) {
        Err(Error::Config { message, .. }) => assert!(message.contains("c_uu"), "{message}"),
        other => panic!("unexpected {other:?}"),
    }
    match make_problem("bicycle", 1, &table("wheelbase = \"long\"")) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "problem.params.wheelbase"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(make_problem("consumption", 1, &table("gamma_crra = 1.0")).is_err());
    assert!(make_problem("lqr", 0, &toml::Table::new()).is_err());
}

#[test]
fn sampling_is_deterministic() {
    for problem in suite() {
        let a = problem.sample_initial(&mut ChaCha8Rng::seed_from_u64(9));
        let b = problem.sample_initial(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), problem.state_dim());
    }
}

#[test]
fn foc_residual_examples() {
    let params = ConsumptionParams { a: 0.0, delta: 0.0, gamma_crra: 2.0, ..ConsumptionParams::default() };
    let r = consumption_foc_residual(&params, 0.4, 1.0, &[0.0], &[0.5], 4.0, &[0.0]).unwrap();
    assert!(r[0].abs() < 1e-14);

    let params = ConsumptionParams::default();
    let (h, u) = ([0.2, 0.1], [0.7, 0.9]);
    let r = consumption_foc_residual(&params, 0.5, 1.0, &h, &u, 0.3, &[0.0, 0.0]).unwrap();
    for i in 0..2 {
        let expected = (-params.delta * 0.5f64).exp() * (u[i] - h[i]).powf(-params.gamma_crra) - 0.3;
        assert!((r[i] - expected).abs() < 1e-14);
    }

    let near = consumption_foc_residual(&params, 0.0, 1.0, &[0.2], &[0.2 + 1e-6], 0.3, &[1.0]).unwrap();
    assert!(near[0] > 1e10);
    assert!(matches!(
        consumption_foc_residual(&params, 0.0, 1.0, &[0.2], &[0.2], 0.3, &[1.0]),
        Err(Error::Domain { index: 0, .. })
    ));
}

/// With cost-to-go costates the Hamiltonian gradient is the utility-form
/// first-order residual evaluated at the negated costates.
#[test]
fn consumption_gradient_is_residual_at_negated_costates() {
    let params = ConsumptionParams { products: 2, ..ConsumptionParams::default() };
    let problem = Consumption::new(params.clone(), 1).unwrap();
    let (z, u, p) = ([1.5, 0.2, 0.25], [0.9, 0.6], [-0.8, 0.3, -0.1]);
    let mut tape = Tape::new();
    let zn = tape.vector(z.to_vec());
    let un = tape.vector(u.to_vec());
    let pn = tape.vector(p.to_vec());
    let g = problem.hamiltonian_grad_u(&mut tape, 0.4, zn, un, pn).unwrap();
    let r = consumption_foc_residual(&params, 0.4, z[0], &z[1..], &u, -p[0], &[-p[1], -p[2]]).unwrap();
    assert!(rel_err(tape.value(g).data(), &r) < 1e-14);
}

#[test]
fn consumption_projection_enforces_habit_floor() {
    let problem = make_problem("consumption", 1, &table("products = 2\nu_max = 3.0")).unwrap();
    let mut tape = Tape::new();
    let z = tape.vector(vec![1.0, 0.5, 0.2]);
    let u = tape.vector(vec![0.1, 7.0]);
    let pu = problem.project(&mut tape, z, u).unwrap();
    assert_eq!(tape.value(pu).data(), &[0.5 + 1e-4, 3.0]);
    assert!(problem.check_admissible(&[1.0, 0.5, 0.2], tape.value(pu).data()).is_ok());
    assert!(problem.check_admissible(&[1.0, 0.5, 0.2], &[0.5, 1.0]).is_err());
}

#[test]
fn bicycle_projection_clamps_steering() {
    let problem = make_problem("bicycle", 1, &toml::Table::new()).unwrap();
    let mut tape = Tape::new();
    let z = tape.vector(vec![0.0, 0.0, 0.0, 1.0]);
    let u = tape.vector(vec![3.0, -2.0]);
    let pu = problem.project(&mut tape, z, u).unwrap();
    assert_eq!(tape.value(pu).data(), &[3.0, -1.2]);
}

#[test]
fn hovering_quadrotor_is_at_rest() {
    let problem = make_problem("quadrotor", 1, &toml::Table::new()).unwrap();
    let z: Vec<f64> = (0..12).map(|i| if i < 3 { 1.0 } else { 0.0 }).collect();
    let f = eval(problem.as_ref(), Which::Dynamics, 0.0, &z, &[0.0; 4]);
    assert!(f.iter().all(|v| v.abs() < 1e-15), "{f:?}");
    let f = eval(problem.as_ref(), Which::Dynamics, 0.0, &z, &[1.0, 0.0, 0.0, 0.5]);
    assert!((f[5] - 1.0).abs() < 1e-15);
    assert!((f[11] - 0.5).abs() < 1e-15);
}

#[test]
fn consumption_terminal_cost_is_c1_at_the_wealth_floor() {
    let problem = make_problem("consumption", 1, &table("wealth_floor = 0.2")).unwrap();
    let eval = |x: f64| {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(vec![x, 0.3]));
        let g = problem.terminal_cost(&mut tape, 1.0, z).unwrap();
        let value = tape.value(g).data()[0];
        let grad = tape.grad(g, &[z]).unwrap().remove(0).data()[0];
        (value, grad)
    };
    let (below, g_below) = eval(0.2 - 1e-9);
    let (above, g_above) = eval(0.2 + 1e-9);
    assert!((below - above).abs() < 1e-6);
    assert!((g_below - g_above).abs() < 1e-6 * g_above.abs());
    assert!(g_above < 0.0);
    let (far, g_far) = eval(-3.0);
    assert_eq!(g_far, g_below);
    assert!(far > below);
}
