use anyhow::{bail, Context, Result};
use bsdeopt::adjoint::{
    clarke_selection_representers, duality_residual, gradient_representer, linearize, representer_by_basis,
};
use bsdeopt::bsde::solve_bsde;
use bsdeopt::filtration::{format_full, write_leaf_csv, ScenarioTree};
use bsdeopt::generators::parse_generator;
use bsdeopt::nonsmooth::{dir_derivative_estimate, DerivativeGrid};
use bsdeopt::optimize::{
    minimize_risk, qp_oracle, verify_example2, verify_example3, verify_stationarity, MeanConstraint, StationarityReport,
};
use bsdeopt::risk::{parse_risk, RiskKind};
use bsdeopt::{Claim, Driver, Problem, Tree};
use serde::Serialize;
use serde_json::{json, Value};

use crate::claims::parse_claim;
use crate::config::{Command, RunConfig, TreeConfig, Verifier};

/// Result of one run: the report body, files to write next to it, and the
/// verification verdict when the command verifies something.
pub struct Outcome {
    pub result: Value,
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub passes: Option<bool>,
}

fn tree_of(c: &TreeConfig) -> Result<Tree> {
    ScenarioTree::new(c.steps, c.horizon, c.dims).context("config field `tree`")
}

fn generator(cfg: &RunConfig, tree: &Tree) -> Result<Driver> {
    parse_generator(&cfg.generator, tree, None).context("config field `generator`")
}

fn claim(cfg: &RunConfig, tree: &Tree) -> Result<Claim> {
    parse_claim(cfg.require("claim", &cfg.claim)?, tree).context("config field `claim`")
}

fn leaf_csv(rv: &Claim) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_leaf_csv(rv, &mut buf)?;
    Ok(buf)
}

pub fn problem(cfg: &RunConfig, tree: &Tree) -> Result<Problem> {
    let risk = parse_risk(cfg.require("risk", &cfg.risk)?, tree, None).context("config field `risk`")?;
    let mean = match (cfg.mean_eq, cfg.mean_ge) {
        (Some(_), Some(_)) => bail!("config fields `mean_eq` and `mean_ge` are mutually exclusive"),
        (Some(c), None) => Some(MeanConstraint::Equal(c)),
        (None, Some(c)) => Some(MeanConstraint::AtLeast(c)),
        (None, None) => None,
    };
    Ok(Problem { risk, gen: generator(cfg, tree)?, budget: *cfg.require("budget", &cfg.budget)?, mean, nonneg: cfg.nonneg })
}

/// Fills a config with a canned instance.
pub fn apply_preset(cfg: &mut RunConfig) -> Result<()> {
    let which = *cfg.require("example", &cfg.example)?;
    let preset = cfg.preset.get_or_insert_with(|| "default".into()).clone();
    if preset != "default" {
        bail!("config field `preset`: unknown preset `{preset}` (available: default)");
    }
    cfg.tree = TreeConfig { steps: 4, horizon: 1.0, dims: 1 };
    cfg.nonneg = true;
    cfg.mean_eq = None;
    cfg.mean_ge = None;
    cfg.initial = None;
    match which {
        1 => {
            cfg.generator = "linear:r=0,theta=0.2".into();
            cfg.risk = Some("efun:u=square,b=0".into());
            cfg.budget = Some(1.05);
            cfg.mean_eq = Some(1.0);
            cfg.verifier = Verifier::Stationarity;
        }
        2 => {
            cfg.generator = "linear:r=0,theta=0.2".into();
            cfg.risk = Some("var".into());
            cfg.budget = Some(0.95);
            cfg.mean_ge = Some(1.0);
            cfg.verifier = Verifier::Example2;
        }
        3 => {
            cfg.generator = "linear:r=0,theta=0.1".into();
            cfg.risk = Some("grisk:f=abs_z:kappa=0.1".into());
            cfg.budget = Some(3.0);
            cfg.mean_ge = Some(1.0);
            cfg.initial = Some("brownian:a=3,b=-1".into());
            cfg.verifier = Verifier::Example3;
        }
        n => bail!("config field `example`: no example {n} (available: 1, 2, 3)"),
    }
    Ok(())
}

fn verify(cfg: &RunConfig, tree: &Tree, p: &Problem, xi: &Claim) -> Result<(Verifier, StationarityReport)> {
    let which = match cfg.verifier {
        Verifier::Auto => match (&p.risk.kind, p.mean) {
            (RiskKind::Variance, Some(MeanConstraint::AtLeast(_))) => Verifier::Example2,
            (RiskKind::GRisk(_), None | Some(MeanConstraint::AtLeast(_))) => Verifier::Example3,
            _ => Verifier::Stationarity,
        },
        v => v,
    };
    let rep = match which {
        Verifier::Example2 => verify_example2(tree, xi, p, cfg.tol)?,
        Verifier::Example3 => verify_example3(tree, xi, p, cfg.tol)?,
        _ => verify_stationarity(tree, xi, p, cfg.tol)?,
    };
    Ok((which, rep))
}

#[derive(Serialize)]
struct SolveResult {
    y0: f64,
    max_residual: f64,
    max_iterations: usize,
    one_step_residual: f64,
}

fn solution_csv(tree: &Tree, sol: &bsdeopt::Solution) -> Vec<u8> {
    let mut out = String::from("step,node,y");
    for i in 0..tree.dims() {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');
    for k in 0..=tree.steps() {
        for j in 0..tree.nodes_at(k) {
            out.push_str(&format!("{k},{j},{}", format_full(sol.y.at(k).values()[j])));
            for i in 0..tree.dims() {
                let z = if k < tree.steps() { format_full(sol.z.at(k).at(j)[i]) } else { String::new() };
                out.push(',');
                out.push_str(&z);
            }
            out.push('\n');
        }
    }
    out.into_bytes()
}

pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    let tree = tree_of(&cfg.tree)?;
    match cfg.command {
        Command::Tree => {
            let mut buf = Vec::new();
            tree.write_json(&mut buf)?;
            Ok(Outcome {
                result: json!({
                    "steps": tree.steps(),
                    "horizon": tree.horizon(),
                    "dims": tree.dims(),
                    "dt": tree.dt(),
                    "branching": tree.branching(),
                    "leaves": tree.leaves(),
                    "leaf_probability": tree.leaf_prob(),
                }),
                artifacts: vec![("tree.json".into(), buf)],
                passes: None,
            })
        }
        Command::Solve => {
            let g = generator(cfg, &tree)?;
            let sol = solve_bsde(&tree, &g, &claim(cfg, &tree)?)?;
            let r = SolveResult {
                y0: sol.y0(),
                max_residual: sol.max_residual,
                max_iterations: sol.max_iterations,
                one_step_residual: sol.one_step_residual(&tree, &g),
            };
            Ok(Outcome {
                result: serde_json::to_value(r)?,
                artifacts: vec![("solution.csv".into(), solution_csv(&tree, &sol))],
                passes: None,
            })
        }
        Command::Gexp => {
            let g = generator(cfg, &tree)?;
            let v = bsdeopt::bsde::g_expectation(&tree, &g, &claim(cfg, &tree)?)?;
            Ok(Outcome { result: json!({ "value": v }), artifacts: vec![], passes: None })
        }
        Command::Adjoint => {
            let g = generator(cfg, &tree)?;
            let sol = solve_bsde(&tree, &g, &claim(cfg, &tree)?)?;
            let mut artifacts = Vec::new();
            let result = if g.is_smooth() {
                let coeffs = linearize(&tree, &g, &sol)?;
                let rep = gradient_representer(&tree, &g, &sol)?;
                let check = if tree.leaves() <= 256 {
                    let basis = representer_by_basis(&tree, &coeffs)?;
                    Some(json!({
                        "basis_max_abs_difference": basis.q.sub(&rep.q).max_abs(),
                        "duality_residual": duality_residual(&tree, &coeffs, &rep)?,
                    }))
                } else {
                    None
                };
                artifacts.push(("q.csv".into(), leaf_csv(&rep.q)?));
                json!({
                    "selections": 1,
                    "min_q": rep.q.min_value(),
                    "max_q": rep.q.max_value(),
                    "mean_q": rep.q.mean(),
                    "basis_check": check,
                })
            } else {
                let cands = clarke_selection_representers(&tree, &g, &sol, cfg.max_selections, cfg.optimizer.seed)?;
                let mut summary = Vec::new();
                for (i, c) in cands.iter().enumerate() {
                    artifacts.push((format!("q_{i}.csv"), leaf_csv(&c.representer.q)?));
                    summary.push(json!({
                        "kinks": c.choices.len(),
                        "choices": c.choices.iter().map(|k| [k.step, k.node, k.choice]).collect::<Vec<_>>(),
                        "min_q": c.representer.q.min_value(),
                        "mean_q": c.representer.q.mean(),
                    }));
                }
                json!({ "selections": cands.len(), "candidates": summary })
            };
            Ok(Outcome { result, artifacts, passes: None })
        }
        Command::Ddq => {
            let g = generator(cfg, &tree)?;
            let xi = claim(cfg, &tree)?;
            let eta = parse_claim(cfg.require("direction", &cfg.direction)?, &tree).context("config field `direction`")?;
            let grid = DerivativeGrid { points: cfg.grid.points.clone(), samples: cfg.grid.samples, seed: cfg.grid.seed };
            let est = dir_derivative_estimate(|v| bsdeopt::bsde::g_expectation(&tree, &g, v), &xi, &eta, &grid)?;
            let pairing = if g.is_smooth() {
                Some(gradient_representer(&tree, &g, &solve_bsde(&tree, &g, &xi)?)?.pair(&eta))
            } else {
                None
            };
            Ok(Outcome {
                result: json!({
                    "value": est.value,
                    "per_point": est.per_point,
                    "grid": est.grid,
                    "stable": est.stable,
                    "representer_pairing": pairing,
                }),
                artifacts: vec![],
                passes: None,
            })
        }
        Command::Optimize | Command::Example => {
            let p = problem(cfg, &tree)?;
            let initial = match &cfg.initial {
                Some(s) => Some(parse_claim(s, &tree).context("config field `initial`")?),
                None => None,
            };
            let res = minimize_risk(&tree, &p, &(&cfg.optimizer).into(), initial.as_ref())?;
            let (which, rep) = verify(cfg, &tree, &p, &res.xi)?;
            let oracle_distance = qp_oracle(&tree, &p).ok().map(|o| o.xi.sub(&res.xi).norm());
            let mut trace = String::from("iteration,penalized_objective\n");
            for (i, v) in res.trace.iter().enumerate() {
                trace.push_str(&format!("{i},{}\n", format_full(*v)));
            }
            let result = json!({
                "objective": res.objective,
                "penalized_objective": res.penalized_objective,
                "feasibility_gap": res.feasibility_gap,
                "lipschitz_estimate": res.lipschitz_estimate,
                "refine_iterations": res.refine_iterations,
                "refine_converged": res.refine_converged,
                "heuristic": res.heuristic,
                "warnings": res.warnings,
                "oracle_distance": oracle_distance,
                "verifier": which,
                "lambda": rep.lambda,
                "a": rep.a,
                "case": rep.case,
                "residual_sup": rep.residual_sup,
                "residual_min_on_zero_set": rep.residual_min_on_zero_set,
                "passes": rep.passes,
                "verification": rep,
            });
            Ok(Outcome {
                result,
                artifacts: vec![("solution.csv".into(), leaf_csv(&res.xi)?), ("trace.csv".into(), trace.into_bytes())],
                passes: Some(rep.passes),
            })
        }
        Command::Verify => {
            let p = problem(cfg, &tree)?;
            let path = cfg.require("solution", &cfg.solution)?;
            let f = std::fs::File::open(path).with_context(|| format!("config field `solution`: opening {path}"))?;
            let xi = bsdeopt::filtration::read_leaf_csv(&tree, f).with_context(|| format!("config field `solution`: reading {path}"))?;
            let (which, rep) = verify(cfg, &tree, &p, &xi)?;
            let result = json!({
                "objective": p.risk.evaluate(&tree, &xi)?,
                "verifier": which,
                "lambda": rep.lambda,
                "a": rep.a,
                "case": rep.case,
                "residual_sup": rep.residual_sup,
                "residual_min_on_zero_set": rep.residual_min_on_zero_set,
                "feasibility_gap": rep.feasibility_gap,
                "passes": rep.passes,
                "verification": rep,
            });
            Ok(Outcome { result, artifacts: vec![], passes: Some(rep.passes) })
        }
    }
}
