//! Experiment configuration files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::Backend;
use crate::hamiltonian::OperatorConfig;
use crate::problems::{make_problem, ControlProblem, PROBLEM_NAMES};
use crate::rollout::{Grid, Integrator, RolloutOptions};
use crate::trainer::TrainConfig;
use crate::valuenet::ValueNetwork;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemBlock,
    #[serde(default)]
    pub net: NetBlock,
    #[serde(default)]
    pub operator: OperatorBlock,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub compare: CompareBlock,
    #[serde(default)]
    pub oracle: OracleBlock,
    #[serde(default)]
    pub neighborhood: NeighborhoodBlock,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub name: String,
    #[serde(default = "one")]
    pub agents: usize,
    /// Seed of the evaluation batches drawn from the initial distribution.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetBlock {
    /// Defaults to `[1 + n, 64, 64, 1]`.
    pub widths: Option<Vec<usize>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorBlock {
    pub eta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: bool,
    /// Cut the state path through the controls in the reverse sweep.
    pub detach_z: bool,
    pub node_budget: Option<usize>,
}

impl Default for OperatorBlock {
    fn default() -> Self {
        let c = OperatorConfig::default();
        Self {
            eta: c.eta,
            tol: c.tol,
            max_iter: c.max_iter,
            warm_start: c.warm_start,
            detach_z: false,
            node_budget: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    pub steps: usize,
    pub horizon: f64,
    pub integrator: Integrator,
}

impl Default for GridBlock {
    fn default() -> Self {
        Self { steps: 50, horizon: 1.0, integrator: Integrator::Euler }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json], checkpoint_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareBlock {
    pub backends: Vec<Backend>,
    /// Tape node budget per sample for the comparison runs.
    pub node_budget: Option<usize>,
}

impl Default for CompareBlock {
    fn default() -> Self {
        Self { backends: vec![Backend::Jfb, Backend::Implicit, Backend::Unrolled], node_budget: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleBlock {
    pub held_out: usize,
    pub seed: u64,
}

impl Default for OracleBlock {
    fn default() -> Self {
        Self { held_out: 100, seed: 1_000_003 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeighborhoodBlock {
    /// Constant step sizes, largest first.
    pub alphas: Vec<f64>,
    pub iterations: usize,
    pub eval_batch: usize,
}

impl Default for NeighborhoodBlock {
    fn default() -> Self {
        Self { alphas: vec![1e-2, 5e-3, 2.5e-3], iterations: 500, eval_batch: 32 }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let mut path = e.path().to_string();
            let message = e.inner().message().trim().to_string();
            if let Some(field) = message.strip_prefix("missing field `").and_then(|r| r.strip_suffix('`')) {
                path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
            }
            if path == "." {
                path = "<root>".into();
            }
            config_error(&path, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output.dir = PathBuf::new();
        let digest = Sha256::digest(canon.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn operator_config(&self) -> OperatorConfig {
        OperatorConfig {
            eta: self.operator.eta,
            tol: self.operator.tol,
            max_iter: self.operator.max_iter,
            warm_start: self.operator.warm_start,
        }
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            detach_z: self.operator.detach_z,
            integrator: self.grid.integrator,
            node_budget: self.operator.node_budget,
            perturb: None,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.steps, self.grid.horizon).map_err(|e| config_error("grid", e.to_string()))
    }

    pub fn build_problem(&self) -> Result<Box<dyn ControlProblem>> {
        make_problem(&self.problem.name, self.problem.agents, &self.problem.params).map_err(|e| match e {
            Error::Config { .. } => e,
            Error::UnknownProblem(name) => {
                config_error("problem.name", format!("unknown problem `{name}`; expected one of {PROBLEM_NAMES:?}"))
            }
            other => config_error("problem", other.to_string()),
        })
    }

    pub fn widths(&self, state_dim: usize) -> Vec<usize> {
        self.net.widths.clone().unwrap_or_else(|| ValueNetwork::default_widths(state_dim))
    }

    pub fn build_net(&self, state_dim: usize) -> Result<ValueNetwork> {
        let widths = self.widths(state_dim);
        if widths.first() != Some(&(state_dim + 1)) || widths.last() != Some(&1) {
            return Err(config_error(
                "net.widths",
                format!("widths must start at {} (time plus state) and end at 1, got {widths:?}", state_dim + 1),
            ));
        }
        ValueNetwork::new(widths, self.net.seed).map_err(|e| config_error("net.widths", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let problem = self.build_problem()?;
        self.build_net(problem.state_dim())?;
        self.operator_config().validate().map_err(|e| config_error("operator", e.to_string()))?;
        self.grid()?;
        self.train.validate().map_err(|e| config_error("train", e.to_string()))?;
        if self.output.formats.is_empty() {
            return Err(config_error("output.formats", "at least one format is required"));
        }
        if self.compare.backends.is_empty() {
            return Err(config_error("compare.backends", "at least one backend is required"));
        }
        if self.compare.backends.contains(&Backend::FiniteDiff) {
            return Err(config_error("compare.backends", "finite differences cannot train"));
        }
        let a = &self.neighborhood.alphas;
        if a.is_empty() || a.iter().any(|x| !(*x > 0.0)) || a.windows(2).any(|w| w[0] < w[1]) {
            return Err(config_error("neighborhood.alphas", "need positive step sizes in descending order"));
        }
        if self.neighborhood.iterations < 5 || self.neighborhood.eval_batch == 0 {
            return Err(config_error("neighborhood", "need iterations >= 5 and a nonempty evaluation batch"));
        }
        if self.oracle.held_out == 0 {
            return Err(config_error("oracle.held_out", "must be at least 1"));
        }
        Ok(())
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}
