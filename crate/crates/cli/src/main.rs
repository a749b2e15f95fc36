mod claims;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{Command, RunConfig, TreeConfig, Verifier};

#[derive(Parser, Debug)]
#[command(name = "bsdeopt", version, about = "BSDEs, g-expectations and risk minimization on binary scenario trees")]
struct Cli {
    /// Worker threads for leaf-parallel loops.
    #[arg(long, global = true, env = "BSDEOPT_THREADS")]
    threads: Option<usize>,
    /// Directory for report.json and artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Do not echo the report on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct TreeArgs {
    /// Tree JSON written by `bsdeopt tree`; overrides the shape flags.
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long = "tree-steps", default_value_t = 4)]
    tree_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1)]
    dims: usize,
}

#[derive(Args, Debug, Clone)]
struct ClaimArgs {
    #[command(flatten)]
    tree: TreeArgs,
    /// Generator, e.g. `linear:r=0.05,theta=0.2`.
    #[arg(long, default_value = "zero")]
    gen: String,
    /// Terminal claim, e.g. `const:v=1`, `brownian:a=0,b=1`, `@xi.csv`.
    #[arg(long)]
    claim: String,
}

#[derive(Args, Debug, Clone)]
struct ProblemArgs {
    #[command(flatten)]
    tree: TreeArgs,
    #[arg(long, default_value = "zero")]
    gen: String,
    /// Risk, e.g. `var`, `efun:u=square,b=0.5`, `grisk:f=abs_z:kappa=0.1`.
    #[arg(long)]
    risk: String,
    #[arg(long, allow_hyphen_values = true)]
    budget: f64,
    #[arg(long, conflicts_with = "mean_ge", allow_hyphen_values = true)]
    mean_eq: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mean_ge: Option<f64>,
    #[arg(long)]
    nonneg: bool,
    #[arg(long, default_value_t = config::default_tol())]
    tol: f64,
    #[arg(long, value_enum, default_value_t = Verifier::Auto)]
    verifier: Verifier,
}

#[derive(Args, Debug, Clone)]
struct OptimizerArgs {
    #[arg(long, default_value_t = config::OptimizerConfig::default().penalty)]
    penalty: f64,
    #[arg(long, default_value_t = config::OptimizerConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = config::OptimizerConfig::default().step0)]
    step0: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = config::OptimizerConfig::default().refine_iters)]
    refine_iters: usize,
    /// Starting point (claim syntax).
    #[arg(long)]
    initial: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct ShapeArgs {
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1)]
    dims: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a tree description.
    Tree(ShapeArgs),
    /// Solve the BSDE for a claim; writes y and z per node.
    Solve(ClaimArgs),
    /// g-expectation E^g_{0,T} of a claim.
    Gexp(ClaimArgs),
    /// Gradient representer(s) of the g-expectation at a claim.
    Adjoint {
        #[command(flatten)]
        claim: ClaimArgs,
        #[arg(long, default_value_t = config::default_max_selections())]
        max_selections: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Minimize a risk under the budget and verify the result.
    Optimize {
        #[command(flatten)]
        problem: ProblemArgs,
        #[command(flatten)]
        opt: OptimizerArgs,
    },
    /// Check first-order conditions at a stored solution.
    Verify {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Run a canned instance (1: mean-constrained quadratic, 2: variance, 3: g-risk).
    Example {
        which: u8,
        #[arg(long, default_value = "default")]
        preset: String,
    },
    /// Directional-derivative estimate of the g-expectation.
    Ddq {
        #[command(flatten)]
        claim: ClaimArgs,
        #[arg(long)]
        direction: String,
    },
    /// Execute a stored RunConfig (e.g. the `config` field of a report).
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn tree_config(a: &TreeArgs) -> Result<TreeConfig> {
    match &a.tree {
        Some(path) => {
            let f = std::fs::File::open(path).with_context(|| format!("opening tree file {}", path.display()))?;
            let t = bsdeopt::Tree::read_json(f).with_context(|| format!("reading tree file {}", path.display()))?;
            Ok(TreeConfig { steps: t.steps(), horizon: t.horizon(), dims: t.dims() })
        }
        None => Ok(TreeConfig { steps: a.tree_steps, horizon: a.horizon, dims: a.dims }),
    }
}

fn claim_config(command: Command, a: &ClaimArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(command);
    cfg.tree = tree_config(&a.tree)?;
    cfg.generator = a.gen.clone();
    cfg.claim = Some(a.claim.clone());
    Ok(cfg)
}

fn problem_config(command: Command, a: &ProblemArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(command);
    cfg.tree = tree_config(&a.tree)?;
    cfg.generator = a.gen.clone();
    cfg.risk = Some(a.risk.clone());
    cfg.budget = Some(a.budget);
    cfg.mean_eq = a.mean_eq;
    cfg.mean_ge = a.mean_ge;
    cfg.nonneg = a.nonneg;
    cfg.tol = a.tol;
    cfg.verifier = a.verifier;
    Ok(cfg)
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.command {
        Cmd::Tree(t) => {
            let mut c = RunConfig::new(Command::Tree);
            c.tree = TreeConfig { steps: t.steps, horizon: t.horizon, dims: t.dims };
            c
        }
        Cmd::Solve(a) => claim_config(Command::Solve, a)?,
        Cmd::Gexp(a) => claim_config(Command::Gexp, a)?,
        Cmd::Adjoint { claim, max_selections, seed } => {
            let mut c = claim_config(Command::Adjoint, claim)?;
            c.max_selections = *max_selections;
            c.optimizer.seed = *seed;
            c
        }
        Cmd::Ddq { claim, direction } => {
            let mut c = claim_config(Command::Ddq, claim)?;
            c.direction = Some(direction.clone());
            c
        }
        Cmd::Optimize { problem, opt } => {
            let mut c = problem_config(Command::Optimize, problem)?;
            c.optimizer.penalty = opt.penalty;
            c.optimizer.steps = opt.steps;
            c.optimizer.step0 = opt.step0;
            c.optimizer.seed = opt.seed;
            c.optimizer.refine_iters = opt.refine_iters;
            c.initial = opt.initial.clone();
            c
        }
        Cmd::Verify { problem, solution } => {
            let mut c = problem_config(Command::Verify, problem)?;
            c.solution = Some(solution.display().to_string());
            c
        }
        Cmd::Example { which, preset } => {
            let mut c = RunConfig::new(Command::Example);
            c.example = Some(*which);
            c.preset = Some(preset.clone());
            c
        }
        Cmd::Run { config } => {
            let mut c = RunConfig::load(config)?;
            c.out = cli.out.display().to_string();
            c
        }
    };
    if !matches!(cli.command, Cmd::Run { .. }) {
        cfg.out = cli.out.display().to_string();
    }
    if cfg.command == Command::Example {
        commands::apply_preset(&mut cfg)?;
    }
    Ok(cfg)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<Option<bool>> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let cfg = build_config(cli)?;
    let started = Instant::now();
    let outcome = commands::execute(&cfg)?;
    let report = json!({
        "command": cfg.command,
        "config": cfg,
        "result": outcome.result,
    });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    let dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    write(&dir, "report.json", text.as_bytes())?;
    for (name, bytes) in &outcome.artifacts {
        write(&dir, name, bytes)?;
    }
    let meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "finished_unix_seconds": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
    });
    write(&dir, "meta.json", (serde_json::to_string_pretty(&meta)? + "\n").as_bytes())?;
    if !cli.quiet {
        print!("{text}");
    }
    Ok(outcome.passes)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(Some(false)) => ExitCode::from(2),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
