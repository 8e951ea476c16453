//! Two kinematic bicycles with an interaction penalty, integrated with RK4.

use jfb_control::cli::{Experiment, ExperimentConfig};

fn main() -> jfb_control::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/bicycle.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.train.epochs = 1;
    cfg.train.audit_every = 0;
    let exp = Experiment::new(cfg)?;
    let out = exp.train(|_, _| Ok(()))?;
    for r in out.history.records.iter().step_by(5) {
        println!("j={:2} loss={:.3} nonconverged={}", r.j, r.loss, r.nonconverged);
    }
    Ok(())
}
