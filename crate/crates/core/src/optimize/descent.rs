use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Problem;
use crate::error::{Error, Result};
use crate::filtration::{RandomVariable, ScenarioTree};
use crate::nonsmooth::{exact_penalty, prox_distance, ConvexSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeConfig {
    /// Exact-penalty weight `K` on the distance to the budget set.
    pub penalty: f64,
    /// Projected subgradient steps.
    pub steps: usize,
    /// `s_t = step0 / sqrt(t + 1)`.
    pub step0: f64,
    /// Seeds the perturbation of the default starting point.
    pub seed: u64,
    /// Iteration cap of the three-operator refinement; 0 disables it.
    pub refine_iters: usize,
    pub refine_tol: f64,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self { penalty: 10.0, steps: 2000, step0: 0.5, seed: 0, refine_iters: 200_000, refine_tol: 1e-14 }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult<S> {
    pub xi: RandomVariable<S>,
    pub objective: S,
    pub penalized_objective: S,
    /// Penalized objective at every subgradient step.
    pub trace: Vec<S>,
    pub refine_iterations: usize,
    pub refine_converged: bool,
    pub feasibility_gap: S,
    /// Largest objective subgradient norm seen along the iterates.
    pub lipschitz_estimate: S,
    /// Set when the budget is a linearized nonlinear g-expectation.
    pub heuristic: bool,
    pub warnings: Vec<String>,
}

/// Budget set around `xi`: exact for linear generators, the linearization
/// `E^g(xi) + <q, . - xi> <= x` otherwise.
fn budget_set<S: Scalar>(tree: &ScenarioTree<S>, p: &Problem<S>, xi: &RandomVariable<S>) -> Result<ConvexSet<S>> {
    let q = p.budget_gradient(tree, xi)?.q;
    let bound = if p.gen.is_linear() { p.budget } else { p.budget - p.budget_value(tree, xi)? + q.dot(xi) };
    Ok(ConvexSet::HalfSpace { normal: q, bound })
}

/// Minimizes `rho + K d_C` over the mean/sign set `X` (`C` the budget set):
/// projected subgradient descent with steps `s0 / sqrt(t+1)`, then a
/// three-operator splitting refinement (`P_X`, `prox_{gamma K d_C}`,
/// `grad rho`) started from the best iterate.
pub fn minimize_risk<S: Scalar>(
    tree: &ScenarioTree<S>,
    problem: &Problem<S>,
    config: &MinimizeConfig,
    initial: Option<&RandomVariable<S>>,
) -> Result<MinimizeResult<S>> {
    problem.check_feasible(tree)?;
    let k = S::lit(config.penalty);
    let heuristic = !problem.gen.is_linear();
    let penalized = exact_penalty(
        |v: &RandomVariable<S>| problem.risk.evaluate(tree, v),
        |v: &RandomVariable<S>| budget_set(tree, problem, v)?.distance(v),
        k,
    )?;

    let mut xi = match initial {
        Some(v) => {
            tree.check_terminal(v)?;
            problem.project(v)?
        }
        None => {
            let level = problem.mean.map_or(S::zero(), |m| m.level());
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let unif = Uniform::new_inclusive(-0.1f64, 0.1);
            let start = tree.terminal_from_fn(|_| level + S::lit(unif.sample(&mut rng)));
            problem.project(&start)?
        }
    };

    let mut lip = S::zero();
    let mut trace = Vec::with_capacity(config.steps);
    let mut best = (penalized.eval(&xi)?, xi.clone());
    for t in 0..config.steps {
        let grad = problem.risk.subgradient_element(tree, &xi)?.gradient;
        lip = lip.max(grad.norm());
        let set = budget_set(tree, problem, &xi)?;
        let d = set.distance(&xi)?;
        let value = problem.risk.evaluate(tree, &xi)? + k * d;
        trace.push(value);
        if value < best.0 {
            best = (value, xi.clone());
        }
        let mut dir = grad;
        if d > S::zero() {
            if let ConvexSet::HalfSpace { normal, .. } = &set {
                dir = dir.axpy(k / normal.norm(), normal);
            }
        }
        let s = S::lit(config.step0 / ((t + 1) as f64).sqrt());
        xi = problem.project(&xi.axpy(-s, &dir))?;
    }
    let last = penalized.eval(&xi)?;
    if last < best.0 {
        best = (last, xi);
    }

    let gamma = problem.risk.gradient_lipschitz().map_or(S::lit(0.5), |l| S::one() / l);
    let mut z = best.1.clone();
    let mut refine_iterations = 0;
    let mut refine_converged = config.refine_iters == 0;
    let mut refined = None;
    for it in 1..=config.refine_iters {
        let xg = problem.project(&z)?;
        let grad = problem.risk.subgradient_element(tree, &xg)?.gradient;
        lip = lip.max(grad.norm());
        let set = budget_set(tree, problem, &xg)?;
        let v = xg.scale(S::lit(2.0)).sub(&z).axpy(-gamma, &grad);
        let xh = prox_distance(&set, &v, gamma * k)?;
        let step = xh.sub(&xg);
        z = z.add(&step);
        refine_iterations = it;
        if step.norm() <= S::tol_floor(config.refine_tol) * (S::one() + xg.norm()) {
            refine_converged = true;
            refined = Some(xg);
            break;
        }
        refined = Some(xg);
    }
    if let Some(xg) = refined {
        let v = penalized.eval(&xg)?;
        if v <= best.0 + S::lit(1e-12) * (S::one() + best.0.abs()) {
            best = (v, xg);
        }
    }

    let (penalized_objective, xi) = best;
    let feasibility_gap = problem.feasibility_gap(tree, &xi)?;
    let mut warnings = Vec::new();
    if heuristic {
        warnings.push("nonlinear generator: budget set linearized at each iterate; result is heuristic".into());
    }
    if feasibility_gap > S::lit(1e-8) {
        if k <= lip {
            warnings.push(format!(
                "penalty {} not above the objective Lipschitz estimate {}; returned point is infeasible (gap {})",
                k, lip, feasibility_gap
            ));
        } else {
            warnings.push(format!("returned point is infeasible (gap {feasibility_gap})"));
        }
    }
    if !refine_converged {
        warnings.push(format!("refinement stopped after {refine_iterations} iterations without converging"));
    }
    if !penalized_objective.is_finite() {
        return Err(Error::BadParameter { name: "penalty".into(), reason: "objective diverged".into() });
    }
    Ok(MinimizeResult {
        objective: problem.risk.evaluate(tree, &xi)?,
        xi,
        penalized_objective,
        trace,
        refine_iterations,
        refine_converged,
        feasibility_gap,
        lipschitz_estimate: lip,
        heuristic,
        warnings,
    })
}
