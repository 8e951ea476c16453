//! Constant-step SGD on scalar LQR at three step sizes; prints the final-window gradient plateaus.

use jfb_control::cli::{Experiment, ExperimentConfig};
use jfb_control::trainer::{neighborhood_experiment, ControlObjective, PlateauRow};
use jfb_control::valuenet::ValueFunction;

fn main() -> jfb_control::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/lqr.toml");
    let mut cfg = ExperimentConfig::load(path.as_ref())?;
    cfg.neighborhood.iterations = 100;
    let exp = Experiment::new(cfg)?;
    let op = exp.op(&exp.net)?;
    let nb = &exp.cfg.neighborhood;
    let mut objective = ControlObjective {
        problem: exp.problem.as_ref(),
        op: &op,
        grid: exp.grid,
        rollout: exp.cfg.rollout_options(),
        batch_size: exp.cfg.train.batch_size,
        eval_batch: exp.eval_batch(nb.eval_batch, exp.cfg.problem.seed),
    };
    let rows =
        neighborhood_experiment(&mut objective, exp.net.params(), &nb.alphas, nb.iterations, exp.cfg.train.seed)?;
    PlateauRow::write_csv(&rows, std::io::stdout())
}
