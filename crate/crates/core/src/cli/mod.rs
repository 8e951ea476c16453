//! Command-line experiment runner.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on an invalid
//! configuration or invocation.

mod config;

pub use config::{
    CompareBlock, ExperimentConfig, Format, GridBlock, NeighborhoodBlock, NetBlock, OperatorBlock, OracleBlock,
    OutputBlock, ProblemBlock,
};

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::diagnostics::{audit, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::grad::batch_objective;
use crate::hamiltonian::HamiltonianOperator;
use crate::problems::{parse_params, ControlProblem, Lqr, LqrParams};
use crate::rollout::{rollout, Integrator, TrackMode};
use crate::trainer::{
    compare_backends, neighborhood_experiment, plateaus_monotone, plateaus_nonincreasing_in_alpha, sample_batch, train,
    CompareRow, ControlObjective, PlateauRow, TrainOutcome,
};
use crate::valuenet::{load_checkpoint, save_checkpoint, ValueFunction, ValueNetwork};

/// Version of the artifact layouts written by this runner.
pub const FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "jfb-control", version, about = "Train and audit implicit value-function controllers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with JFB directions; writes history, diagnostics and checkpoints.
    Train(CommonArgs),
    /// Train once per gradient backend and tabulate cost counters.
    Compare(CommonArgs),
    /// Audit the convergence assumptions at a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
        /// Value network checkpoint; a fresh network when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare a trained LQR controller with the Riccati optimum.
    Oracle(CommonArgs),
    /// Constant-step runs over a grid of step sizes.
    Neighborhood {
        #[command(flatten)]
        common: CommonArgs,
        /// Starting network; a fresh network when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Overrides `train.audit_every`.
    #[arg(long)]
    pub audit_every: Option<usize>,
}

/// An error tagged with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl CliError {
    fn config(error: Error) -> Self {
        CliError { code: EXIT_CONFIG, error }
    }

    fn runtime(error: Error) -> Self {
        CliError { code: EXIT_RUNTIME, error }
    }

    pub fn to_json(&self) -> Value {
        let kind = match &self.error {
            Error::Config { path, .. } => json!({"kind": "config", "path": path}),
            _ if self.code == EXIT_CONFIG => json!({"kind": "config"}),
            _ => json!({"kind": "runtime"}),
        };
        json!({"error": {"exit_code": self.code, "message": self.error.to_string(), "detail": kind}})
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Runtime<T> {
    fn runtime(self) -> CliResult<T>;
}

impl<T> Runtime<T> for Result<T> {
    fn runtime(self) -> CliResult<T> {
        self.map_err(CliError::runtime)
    }
}

/// Header shared by every artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub config_sha256: String,
    pub seed: u64,
    pub format_version: u32,
}

impl Header {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Header { config_sha256: cfg.hash(), seed: cfg.train.seed, format_version: FORMAT_VERSION }
    }

    pub fn write_comment(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "# config_sha256={}", self.config_sha256)?;
        writeln!(out, "# seed={}", self.seed)?;
        writeln!(out, "# format_version={}", self.format_version)?;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({"config_sha256": self.config_sha256, "seed": self.seed, "format_version": self.format_version})
    }
}

/// Writes artifacts into one directory and remembers their names.
pub struct Artifacts {
    pub dir: PathBuf,
    pub header: Header,
    pub written: Vec<String>,
    formats: Vec<Format>,
}

impl Artifacts {
    pub fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header: Header::of(cfg),
            written: Vec::new(),
            formats: cfg.output.formats.clone(),
        })
    }

    pub fn csv(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        if !self.formats.contains(&Format::Csv) {
            return Ok(());
        }
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        self.header.write_comment(&mut w)?;
        body(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json(&mut self, name: &str, key: &str, value: Value) -> Result<()> {
        if !self.formats.contains(&Format::Json) {
            return Ok(());
        }
        let doc = json!({"header": self.header.to_json(), key: value});
        let text = serde_json::to_string_pretty(&doc).expect("json serializes");
        fs::write(self.dir.join(name), text + "\n")?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn checkpoint(&mut self, name: &str, net: &ValueNetwork) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        save_checkpoint(net, &path)?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `run.json`, listing everything written before it.
    pub fn manifest(&mut self, command: &str, cfg: &ExperimentConfig, summary: Value) -> Result<()> {
        let value = json!({
            "command": command,
            "artifacts": self.written,
            "summary": summary,
            "config": cfg.to_toml_string(),
        });
        let formats = std::mem::replace(&mut self.formats, vec![Format::Json]);
        let r = self.json("run.json", "run", value);
        self.formats = formats;
        r
    }
}

/// Parsed configuration with command-line overrides applied.
pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| match e {
        Error::Io(io) => Error::Config { path: args.config.display().to_string(), message: io.to_string() },
        other => other,
    })?;
    if let Some(seed) = args.seed_override {
        cfg.train.seed = seed;
    }
    if let Some(every) = args.audit_every {
        cfg.train.audit_every = every;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

/// Problem and network built from a validated configuration.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub problem: Box<dyn ControlProblem>,
    pub net: ValueNetwork,
    pub operator: crate::hamiltonian::OperatorConfig,
    pub grid: crate::rollout::Grid,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let problem = cfg.build_problem()?;
        let net = cfg.build_net(problem.state_dim())?;
        let operator = cfg.operator_config();
        let grid = cfg.grid()?;
        Ok(Self { cfg, problem, net, operator, grid })
    }

    pub fn op<'a>(&'a self, value: &'a dyn ValueFunction) -> Result<HamiltonianOperator<'a>> {
        HamiltonianOperator::new(self.problem.as_ref(), value, &self.operator)
    }

    /// Initial states drawn from the problem seed.
    pub fn eval_batch(&self, size: usize, seed: u64) -> Vec<Vec<f64>> {
        sample_batch(self.problem.as_ref(), &mut ChaCha8Rng::seed_from_u64(seed), size)
    }

    pub fn train(&self, mut on_iteration: impl FnMut(usize, &[f64]) -> Result<()>) -> Result<TrainOutcome> {
        let op = self.op(&self.net)?;
        let rollout = self.cfg.rollout_options();
        train(self.problem.as_ref(), &op, self.net.params(), self.grid, &rollout, &self.cfg.train, |p| {
            on_iteration(p.record.j, p.theta)
        })
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<ValueNetwork> {
        let mut net = self.net.clone();
        net.set_params(theta)?;
        Ok(net)
    }
}

fn setup(args: &CommonArgs) -> CliResult<(Experiment, Artifacts)> {
    let cfg = load_config(args).map_err(CliError::config)?;
    let exp = Experiment::new(cfg).map_err(CliError::config)?;
    let artifacts = Artifacts::create(&exp.cfg.output.dir, &exp.cfg).runtime()?;
    Ok((exp, artifacts))
}

pub fn cmd_train(args: &CommonArgs) -> CliResult<Value> {
    let (exp, mut art) = setup(args)?;
    let every = exp.cfg.output.checkpoint_every;
    let mut checkpoints = Vec::new();
    let outcome = exp
        .train(|j, theta| {
            if every > 0 && (j + 1) % every == 0 {
                checkpoints.push((j + 1, theta.to_vec()));
            }
            Ok(())
        })
        .runtime()?;
    for (j, theta) in &checkpoints {
        art.checkpoint(&format!("checkpoints/ckpt_{j:06}.bin"), &exp.with_params(theta).runtime()?).runtime()?;
    }
    let trained = exp.with_params(&outcome.theta).runtime()?;
    art.checkpoint("final.bin", &trained).runtime()?;
    let history = &outcome.history;
    art.csv("history.csv", |w| history.write_csv(w)).runtime()?;
    if !history.audits.is_empty() {
        art.csv("diagnostics.csv", |w| history.write_diagnostics_csv(w)).runtime()?;
    }
    art.json("history.json", "history", serde_json::to_value(history).expect("history serializes")).runtime()?;

    let op = exp.op(&trained).runtime()?;
    let rollout_opts = exp.cfg.rollout_options();
    let eval = exp.eval_batch(exp.cfg.train.batch_size, exp.cfg.problem.seed);
    let held_out =
        batch_objective(exp.problem.as_ref(), &op, &outcome.theta, &eval, exp.grid, &rollout_opts).runtime()?;
    let mut traj =
        rollout(exp.problem.as_ref(), &op, &outcome.theta, &eval[0], exp.grid, &rollout_opts, TrackMode::Jfb)
            .runtime()?;
    let sweep = traj.sweep().runtime()?;
    art.csv("trajectory.csv", |w| traj.write_csv(Some(&sweep), w)).runtime()?;

    let last = history.records.last();
    let summary = json!({
        "iterations": history.records.len(),
        "final_batch_loss": last.map(|r| r.loss),
        "cesaro_avg": last.map(|r| r.cesaro_avg),
        "held_out_objective": held_out,
        "incidents": history.incidents.len(),
        "warnings": history.warnings,
    });
    art.manifest("train", &exp.cfg, summary.clone()).runtime()?;
    Ok(summary)
}

pub fn cmd_compare(args: &CommonArgs) -> CliResult<Value> {
    let (exp, mut art) = setup(args)?;
    let op = exp.op(&exp.net).runtime()?;
    let mut rollout_opts = exp.cfg.rollout_options();
    if exp.cfg.compare.node_budget.is_some() {
        rollout_opts.node_budget = exp.cfg.compare.node_budget;
    }
    let runs = compare_backends(
        exp.problem.as_ref(),
        &op,
        exp.net.params(),
        exp.grid,
        &rollout_opts,
        &exp.cfg.train,
        &exp.cfg.compare.backends,
    )
    .runtime()?;
    let rows: Vec<CompareRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    art.csv("comparison.csv", |w| CompareRow::write_csv(&rows, w)).runtime()?;
    let eval = exp.eval_batch(exp.cfg.train.batch_size, exp.cfg.problem.seed);
    let mut finals = serde_json::Map::new();
    for run in &runs {
        let value = match &run.outcome {
            Some(o) => {
                let net = exp.with_params(&o.theta).runtime()?;
                let op = exp.op(&net).runtime()?;
                let j =
                    batch_objective(exp.problem.as_ref(), &op, &o.theta, &eval, exp.grid, &exp.cfg.rollout_options())
                        .runtime()?;
                json!({"held_out_objective": j, "cum_work_units": o.history.total_work_units()})
            }
            None => json!({"infeasible": run.failure}),
        };
        finals.insert(run.backend.to_string(), value);
    }
    let summary = Value::Object(finals);
    art.manifest("compare", &exp.cfg, summary.clone()).runtime()?;
    Ok(summary)
}

/// Network read from `checkpoint`, which must match the configured widths.
fn starting_net(exp: &Experiment, checkpoint: Option<&Path>) -> CliResult<ValueNetwork> {
    let Some(path) = checkpoint else {
        return Ok(exp.net.clone());
    };
    let net = load_checkpoint(path).map_err(|e| match e {
        Error::Io(_) | Error::Checkpoint(_) => {
            CliError::config(Error::Config { path: path.display().to_string(), message: e.to_string() })
        }
        other => CliError::runtime(other),
    })?;
    if net.widths() != exp.net.widths() {
        return Err(CliError::config(Error::Config {
            path: "net.widths".into(),
            message: format!("checkpoint has widths {:?}, configuration has {:?}", net.widths(), exp.net.widths()),
        }));
    }
    Ok(net)
}

pub fn cmd_diagnose(args: &CommonArgs, checkpoint: Option<&Path>) -> CliResult<Value> {
    let (exp, mut art) = setup(args)?;
    let net = starting_net(&exp, checkpoint)?;
    let op = exp.op(&net).runtime()?;
    let batch = exp.eval_batch(exp.cfg.train.batch_size, exp.cfg.problem.seed);
    let a = audit(
        exp.problem.as_ref(),
        &op,
        net.params(),
        &batch,
        exp.grid,
        &exp.cfg.rollout_options(),
        &exp.cfg.train.audit,
    )
    .runtime()?;
    art.json("diagnostics.json", "report", a.report.to_json()).runtime()?;
    art.csv("diagnostics.csv", |w| {
        writeln!(w, "{}", DiagnosticsReport::CSV_HEADER)?;
        a.report.write_csv_row(0, w)
    })
    .runtime()?;
    let summary = a.report.to_json();
    art.manifest("diagnose", &exp.cfg, summary.clone()).runtime()?;
    Ok(summary)
}

/// Mean objectives of the Riccati, untrained and trained controllers on held-out states.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTable {
    pub riccati: f64,
    pub untrained: f64,
    pub trained: f64,
}

impl OracleTable {
    pub fn gap(&self, value: f64) -> f64 {
        (value - self.riccati) / self.riccati.abs()
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "controller,mean_objective,relative_gap")?;
        writeln!(out, "riccati,{:e},0", self.riccati)?;
        writeln!(out, "untrained,{:e},{:e}", self.untrained, self.gap(self.untrained))?;
        writeln!(out, "trained,{:e},{:e}", self.trained, self.gap(self.trained))?;
        Ok(())
    }
}

/// Riccati comparison over `held_out` states for a problem configured as `lqr`.
pub fn oracle_table(exp: &Experiment, theta: &[f64], held_out: &[Vec<f64>]) -> Result<OracleTable> {
    let lqr = oracle_lqr(&exp.cfg)?;
    let sol = lqr.riccati(exp.grid.horizon, exp.grid.steps)?;
    let riccati = held_out.iter().map(|x| sol.cost(x)).sum::<f64>() / held_out.len() as f64;
    let opts = exp.cfg.rollout_options();
    let mean = |net: &ValueNetwork| -> Result<f64> {
        let op = exp.op(net)?;
        batch_objective(&lqr, &op, net.params(), held_out, exp.grid, &opts)
    };
    Ok(OracleTable { riccati, untrained: mean(&exp.net)?, trained: mean(&exp.with_params(theta)?)? })
}

fn oracle_lqr(cfg: &ExperimentConfig) -> Result<Lqr> {
    let path = |p: &str, m: &str| Error::Config { path: p.into(), message: m.into() };
    if cfg.problem.name != "lqr" {
        return Err(path("problem.name", "the oracle needs the lqr problem"));
    }
    if cfg.grid.integrator != Integrator::Euler {
        return Err(path("grid.integrator", "the Riccati oracle is exact for the euler grid only"));
    }
    let params: LqrParams = parse_params(&cfg.problem.params)?;
    let lqr = Lqr::new(params, cfg.problem.agents)?;
    if lqr.u_max().is_some() {
        return Err(path("problem.params.u_max", "the Riccati oracle needs unconstrained controls"));
    }
    Ok(lqr)
}

pub fn cmd_oracle(args: &CommonArgs) -> CliResult<Value> {
    let (exp, mut art) = setup(args)?;
    oracle_lqr(&exp.cfg).map_err(CliError::config)?;
    let outcome = exp.train(|_, _| Ok(())).runtime()?;
    let held_out = exp.eval_batch(exp.cfg.oracle.held_out, exp.cfg.oracle.seed);
    let table = oracle_table(&exp, &outcome.theta, &held_out).runtime()?;
    art.csv("oracle.csv", |w| table.write_csv(w)).runtime()?;
    art.csv("history.csv", |w| outcome.history.write_csv(w)).runtime()?;
    art.checkpoint("final.bin", &exp.with_params(&outcome.theta).runtime()?).runtime()?;
    let summary = json!({
        "riccati": table.riccati,
        "untrained": table.untrained,
        "trained": table.trained,
        "trained_gap": table.gap(table.trained),
        "untrained_gap": table.gap(table.untrained),
    });
    art.manifest("oracle", &exp.cfg, summary.clone()).runtime()?;
    Ok(summary)
}

pub fn cmd_neighborhood(args: &CommonArgs, checkpoint: Option<&Path>) -> CliResult<Value> {
    let (exp, mut art) = setup(args)?;
    let start = starting_net(&exp, checkpoint)?;
    let op = exp.op(&start).runtime()?;
    let nb = &exp.cfg.neighborhood;
    let mut objective = ControlObjective {
        problem: exp.problem.as_ref(),
        op: &op,
        grid: exp.grid,
        rollout: exp.cfg.rollout_options(),
        batch_size: exp.cfg.train.batch_size,
        eval_batch: exp.eval_batch(nb.eval_batch, exp.cfg.problem.seed),
    };
    let rows = neighborhood_experiment(&mut objective, start.params(), &nb.alphas, nb.iterations, exp.cfg.train.seed)
        .runtime()?;
    art.csv("neighborhood.csv", |w| PlateauRow::write_csv(&rows, w)).runtime()?;
    let summary = json!({
        "monotone": plateaus_monotone(&rows),
        "nonincreasing_in_alpha": plateaus_nonincreasing_in_alpha(&rows),
        "rows": serde_json::to_value(&rows).expect("rows serialize"),
    });
    art.manifest("neighborhood", &exp.cfg, summary.clone()).runtime()?;
    Ok(summary)
}

pub fn dispatch(cli: &Cli) -> CliResult<Value> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Diagnose { common, checkpoint } => cmd_diagnose(common, checkpoint.as_deref()),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Neighborhood { common, checkpoint } => cmd_neighborhood(common, checkpoint.as_deref()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}
