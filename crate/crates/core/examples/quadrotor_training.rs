//! One epoch of JFB training on the single quadrotor, with periodic audits.

use jfb_control::cli::{Experiment, ExperimentConfig};

fn main() -> jfb_control::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quadrotor1.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.train.epochs = 1;
    cfg.train.audit_every = 25;
    let exp = Experiment::new(cfg)?;
    let out = exp.train(|_, _| Ok(()))?;
    for r in out.history.records.iter().step_by(10) {
        println!("j={:3} loss={:.4} |d|={:.3e} work={}", r.j, r.loss, r.grad_norm_jfb, r.work_units);
    }
    for (j, a) in &out.history.audits {
        println!("audit j={j}: gamma_hat={:.3} angle={:?} pass_A1={}", a.gamma_hat, a.angle, a.pass_a1);
    }
    Ok(())
}
