//! JFB, implicit and unrolled training from the same start on a short quadrotor horizon.

use jfb_control::cli::{Experiment, ExperimentConfig};
use jfb_control::trainer::{compare_backends, CompareRow};
use jfb_control::valuenet::ValueFunction;

fn main() -> jfb_control::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quadrotor1.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.grid.steps = 20;
    cfg.train.epochs = 2;
    cfg.train.iterations_per_epoch = 5;
    let exp = Experiment::new(cfg)?;
    let op = exp.op(&exp.net)?;
    let runs = compare_backends(
        exp.problem.as_ref(),
        &op,
        exp.net.params(),
        exp.grid,
        &exp.cfg.rollout_options(),
        &exp.cfg.train,
        &exp.cfg.compare.backends,
    )?;
    let rows: Vec<CompareRow> = runs.into_iter().flat_map(|r| r.rows).collect();
    CompareRow::write_csv(&rows, std::io::stdout())
}
