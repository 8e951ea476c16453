//! Audits the untrained quadrotor controller and prints the diagnostics report.

use jfb_control::cli::{Experiment, ExperimentConfig};
use jfb_control::diagnostics::{audit, validate_report};
use jfb_control::valuenet::ValueFunction;

fn main() -> jfb_control::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quadrotor1.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.grid.steps = 20;
    let exp = Experiment::new(cfg)?;
    let op = exp.op(&exp.net)?;
    let batch = exp.eval_batch(4, exp.cfg.problem.seed);
    let a = audit(
        exp.problem.as_ref(),
        &op,
        exp.net.params(),
        &batch,
        exp.grid,
        &exp.cfg.rollout_options(),
        &exp.cfg.train.audit,
    )?;
    let json = a.report.to_json();
    validate_report(&json)?;
    println!("{}", serde_json::to_string_pretty(&json).expect("report serializes"));
    Ok(())
}
