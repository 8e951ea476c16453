//! Trains the scalar LQR value network briefly and compares it with the Riccati solution.

use jfb_control::cli::{oracle_table, Experiment, ExperimentConfig};

fn main() -> jfb_control::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/lqr.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.train.epochs = 4;
    cfg.train.audit_every = 0;
    let exp = Experiment::new(cfg)?;
    let out = exp.train(|_, _| Ok(()))?;
    let held_out = exp.eval_batch(exp.cfg.oracle.held_out, exp.cfg.oracle.seed);
    let table = oracle_table(&exp, &out.theta, &held_out)?;
    table.write_csv(std::io::stdout())?;
    println!("trained gap after {} iterations: {:.2}%", out.history.records.len(), 100.0 * table.gap(table.trained));
    Ok(())
}
