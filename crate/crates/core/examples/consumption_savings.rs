//! Consumption-savings with two households and a wealth floor.

use jfb_control::cli::{Experiment, ExperimentConfig};

fn main() -> jfb_control::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/consumption.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.train.epochs = 2;
    cfg.train.audit_every = 0;
    let exp = Experiment::new(cfg)?;
    let out = exp.train(|_, _| Ok(()))?;
    let recs = &out.history.records;
    println!("loss {:.3} -> {:.3} over {} iterations", recs[0].loss, recs[recs.len() - 1].loss, recs.len());
    Ok(())
}
