use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Tree,
    Solve,
    Gexp,
    Adjoint,
    Optimize,
    Verify,
    Example,
    Ddq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub steps: usize,
    pub horizon: f64,
    pub dims: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { steps: 4, horizon: 1.0, dims: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub penalty: f64,
    pub steps: usize,
    pub step0: f64,
    pub seed: u64,
    pub refine_iters: usize,
    pub refine_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let d = bsdeopt::optimize::MinimizeConfig::default();
        Self {
            penalty: d.penalty,
            steps: d.steps,
            step0: d.step0,
            seed: d.seed,
            refine_iters: d.refine_iters,
            refine_tol: d.refine_tol,
        }
    }
}

impl From<&OptimizerConfig> for bsdeopt::optimize::MinimizeConfig {
    fn from(c: &OptimizerConfig) -> Self {
        Self {
            penalty: c.penalty,
            steps: c.steps,
            step0: c.step0,
            seed: c.seed,
            refine_iters: c.refine_iters,
            refine_tol: c.refine_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub points: Vec<(f64, f64)>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let d = bsdeopt::nonsmooth::DerivativeGrid::default();
        Self { points: d.points, samples: d.samples, seed: d.seed }
    }
}

/// Which first-order check to run on an optimizer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Verifier {
    /// Max-rule check for variance or g-risk with an at-least mean, plain check otherwise.
    Auto,
    Stationarity,
    Example2,
    Example3,
}

/// Everything a run depends on. Reports embed the resolved config, so a
/// report's `config` fed back through `run --config` reproduces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default = "zero_spec")]
    pub generator: String,
    #[serde(default)]
    pub claim: Option<String>,
    #[serde(default)]
    pub direction: Option<String>,
    #[serde(default)]
    pub risk: Option<String>,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default)]
    pub mean_eq: Option<f64>,
    #[serde(default)]
    pub mean_ge: Option<f64>,
    #[serde(default)]
    pub nonneg: bool,
    #[serde(default)]
    pub initial: Option<String>,
    #[serde(default)]
    pub solution: Option<String>,
    #[serde(default)]
    pub example: Option<u8>,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_verifier")]
    pub verifier: Verifier,
    #[serde(default = "default_max_selections")]
    pub max_selections: usize,
    #[serde(default)]
    pub grid: GridConfig,
    /// Directory for report and artifacts.
    #[serde(default = "default_out")]
    pub out: String,
}

fn zero_spec() -> String {
    "zero".into()
}

pub fn default_tol() -> f64 {
    1e-6
}

fn default_verifier() -> Verifier {
    Verifier::Auto
}

pub fn default_max_selections() -> usize {
    64
}

fn default_out() -> String {
    ".".into()
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            tree: TreeConfig::default(),
            generator: zero_spec(),
            claim: None,
            direction: None,
            risk: None,
            budget: None,
            mean_eq: None,
            mean_ge: None,
            nonneg: false,
            initial: None,
            solution: None,
            example: None,
            preset: None,
            optimizer: OptimizerConfig::default(),
            tol: default_tol(),
            verifier: default_verifier(),
            max_selections: default_max_selections(),
            grid: GridConfig::default(),
            out: default_out(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn require<'a, T>(&self, field: &str, v: &'a Option<T>) -> Result<&'a T> {
        match v {
            Some(x) => Ok(x),
            None => bail!("config field `{field}` is required for `{:?}`", self.command),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut c = RunConfig::new(Command::Optimize);
        c.risk = Some("grisk:f=abs_z:kappa=0.1".into());
        c.budget = Some(0.1 + 0.2);
        c.mean_ge = Some(1.0 / 3.0);
        c.optimizer.refine_tol = 1e-14;
        c.grid.points.push((3e-9, 7e-11));
        let text = serde_json::to_string_pretty(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_fields_take_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"command": "gexp", "claim": "const:v=2"}"#).unwrap();
        assert_eq!(c.tree, TreeConfig::default());
        assert_eq!(c.generator, "zero");
        assert_eq!(c.optimizer, OptimizerConfig::default());
    }
}
