//! Backward induction for `y_t = xi + ∫ g ds - ∫ z dW` on the scenario tree.
//!
//! One step, explicit in `z` and implicit in `y`:
//! `z_k = E[y_{k+1} dW | F_k] / dt`, then `y_k = E[y_{k+1} | F_k] + g(t_k, y_k, z_k) dt`
//! solved by fixed-point iteration. With `M dt <= 1/2` the iteration contracts and
//! with `M sqrt(dt) <= 1` the map from children to parent is monotone, so the
//! comparison theorem holds exactly on the tree.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtration::{AdaptedProcess, PredictableProcess, RandomVariable, RandomVector, ScenarioTree};
use crate::generators::{ConstraintFunction, Generator, PenalizedDriver};
use crate::par::map_indexed;
use crate::scalar::{ordered_sum, Scalar};

pub const FIXED_POINT_TOL: f64 = 1e-13;
pub const FIXED_POINT_MAX_ITER: usize = 60;

#[derive(Debug, Clone)]
pub struct BsdeSolution<S> {
    pub y: AdaptedProcess<S>,
    pub z: PredictableProcess<S>,
    /// Increasing process of a supersolution, `C_0 = 0`.
    pub c: Option<AdaptedProcess<S>>,
    /// Largest one-step fixed-point residual.
    pub max_residual: S,
    pub max_iterations: usize,
}

impl<S: Scalar> BsdeSolution<S> {
    pub fn y0(&self) -> S {
        self.y.at(0).values()[0]
    }

    /// Largest `|y_k - E[y_{k+1}|F_k] - g dt - E[C_{k+1} - C_k | F_k]|` over all nodes.
    pub fn one_step_residual(&self, tree: &ScenarioTree<S>, gen: &Generator<S>) -> S {
        let mut worst = S::zero();
        for k in 0..tree.steps() {
            let next = self.y.at(k + 1).values();
            for j in 0..tree.nodes_at(k) {
                let kids = &next[j * tree.branching()..(j + 1) * tree.branching()];
                let e = tree.children_mean(kids);
                let yk = self.y.at(k).values()[j];
                let mut rhs = e + gen.eval(k, j, yk, self.z.at(k).at(j)) * tree.dt();
                if let Some(c) = &self.c {
                    let ck = c.at(k).values()[j];
                    let cn = &c.at(k + 1).values()[j * tree.branching()..(j + 1) * tree.branching()];
                    rhs = rhs + tree.children_mean(cn) - ck;
                }
                worst = worst.max((yk - rhs).abs());
            }
        }
        worst
    }
}

/// Rejects drivers for which the scheme loses contraction or monotonicity.
pub fn check_preconditions<S: Scalar>(tree: &ScenarioTree<S>, lipschitz: S) -> Result<()> {
    let slack = S::one() + S::lit(64.0) * S::epsilon();
    let m_dt = lipschitz * tree.dt();
    if m_dt > S::lit(0.5) * slack {
        return Err(Error::Contraction { m_dt: m_dt.to_f64_lossy() });
    }
    let m_sqrt = lipschitz * tree.sqrt_dt();
    if m_sqrt > slack {
        return Err(Error::Monotonicity { m_sqrt_dt: m_sqrt.to_f64_lossy() });
    }
    Ok(())
}

struct NodeSolve<S> {
    y: S,
    z: Vec<S>,
    residual: S,
    iterations: usize,
}

fn solve_node<S: Scalar>(
    tree: &ScenarioTree<S>,
    gen: &Generator<S>,
    step: usize,
    node: usize,
    children: &[S],
) -> Result<NodeSolve<S>> {
    let e = tree.children_mean(children);
    let z = tree.project_children(children);
    let dt = tree.dt();
    let tol = S::tol_floor(FIXED_POINT_TOL);
    let mut y = e;
    for it in 1..=FIXED_POINT_MAX_ITER {
        let next = e + gen.eval(step, node, y, &z) * dt;
        let step_size = (next - y).abs();
        y = next;
        if step_size <= tol * (S::one() + y.abs()) {
            let residual = (y - e - gen.eval(step, node, y, &z) * dt).abs();
            return Ok(NodeSolve { y, z, residual, iterations: it });
        }
    }
    let residual = (y - e - gen.eval(step, node, y, &z) * dt).abs();
    Err(Error::FixedPoint { step, node, residual: residual.to_f64_lossy() })
}

/// Solves the BSDE with driver `gen` and terminal value `xi`.
pub fn solve_bsde<S: Scalar>(
    tree: &ScenarioTree<S>,
    gen: &Generator<S>,
    xi: &RandomVariable<S>,
) -> Result<BsdeSolution<S>> {
    tree.check_terminal(xi)?;
    check_preconditions(tree, gen.lipschitz())?;
    let n = tree.steps();
    let d = tree.dims();
    let mut ys: Vec<RandomVariable<S>> = vec![xi.clone()];
    let mut zs: Vec<RandomVector<S>> = Vec::with_capacity(n);
    let mut max_residual = S::zero();
    let mut max_iterations = 0;
    for k in (0..n).rev() {
        let next = ys.last().unwrap().values();
        let b = tree.branching();
        let solved = map_indexed(tree.nodes_at(k), |j| {
            solve_node(tree, gen, k, j, &next[j * b..(j + 1) * b])
        });
        let mut yv = Vec::with_capacity(solved.len());
        let mut zv = Vec::with_capacity(solved.len() * d);
        for s in solved {
            let s = s?;
            max_residual = max_residual.max(s.residual);
            max_iterations = max_iterations.max(s.iterations);
            yv.push(s.y);
            zv.extend(s.z);
        }
        ys.push(RandomVariable::new(k, yv));
        zs.push(RandomVector::new(k, d, zv));
    }
    ys.reverse();
    zs.reverse();
    Ok(BsdeSolution {
        y: AdaptedProcess::new(ys),
        z: PredictableProcess::new(zs),
        c: None,
        max_residual,
        max_iterations,
    })
}

/// `E^g_{0,T}(xi) = y_0`.
pub fn g_expectation<S: Scalar>(tree: &ScenarioTree<S>, gen: &Generator<S>, xi: &RandomVariable<S>) -> Result<S> {
    Ok(solve_bsde(tree, gen, xi)?.y0())
}

/// Per-step amplification bound for `|dy_k| <= factor * ||dy_{k+1}||`:
/// `(1 + M dt + M sqrt(dt)) / (1 - M dt)`. Squared and compounded over `N`
/// steps it bounds `|dy_0|^2 / E|d xi|^2`.
pub fn lipschitz_stability_bound<S: Scalar>(tree: &ScenarioTree<S>, lipschitz: S) -> S {
    let m_dt = lipschitz * tree.dt();
    let per_step = (S::one() + m_dt + lipschitz * tree.sqrt_dt()) / (S::one() - m_dt);
    (per_step * per_step).powi(tree.steps() as i32)
}

#[derive(Debug, Clone, Serialize)]
pub struct PenalizedReport {
    pub penalties: Vec<f64>,
    pub y0: Vec<f64>,
    /// `E sum_k |phi(t_k, y_k, z_k)| dt` per penalty.
    pub constraint_violation: Vec<f64>,
    /// Largest `n` with `(M_g + n M_phi) dt <= 1/2` and `(M_g + n M_phi) sqrt(dt) <= 1`.
    pub max_admissible_penalty: f64,
    pub monotone: bool,
}

/// Largest penalty the scheme accepts for `g + n |phi|`.
pub fn max_admissible_penalty<S: Scalar>(tree: &ScenarioTree<S>, gen: &Generator<S>, phi: &ConstraintFunction<S>) -> S {
    let mg = gen.lipschitz();
    let mp = phi.generator().lipschitz();
    if mp == S::zero() {
        return S::infinity();
    }
    let by_contraction = (S::lit(0.5) - mg * tree.dt()) / (mp * tree.dt());
    let by_monotonicity = (S::one() - mg * tree.sqrt_dt()) / (mp * tree.sqrt_dt());
    by_contraction.min(by_monotonicity).max(S::zero())
}

/// Solves the penalized BSDEs with drivers `g + n |phi|` for each `n` in
/// `penalties` (nondecreasing). `y0` increases with `n` toward the minimal
/// supersolution under the constraint `phi = 0`; each solution carries the
/// reconstructed increasing process `C_{k+1} - C_k = n |phi(t_k, y_k, z_k)| dt`.
pub fn solve_cbsde_penalized<S: Scalar>(
    tree: &ScenarioTree<S>,
    gen: &Generator<S>,
    phi: &ConstraintFunction<S>,
    xi: &RandomVariable<S>,
    penalties: &[S],
) -> Result<(Vec<BsdeSolution<S>>, PenalizedReport)> {
    if penalties.is_empty() {
        return Err(Error::Empty("penalty list"));
    }
    if penalties.windows(2).any(|w| w[1] < w[0]) || penalties[0] < S::zero() {
        return Err(Error::BadParameter {
            name: "penalties".into(),
            reason: "must be nonnegative and nondecreasing".into(),
        });
    }
    let mut sols = Vec::with_capacity(penalties.len());
    let mut report = PenalizedReport {
        penalties: penalties.iter().map(|p| p.to_f64_lossy()).collect(),
        y0: Vec::new(),
        constraint_violation: Vec::new(),
        max_admissible_penalty: max_admissible_penalty(tree, gen, phi).to_f64_lossy(),
        monotone: true,
    };
    let tol = S::tol_floor(1e-12);
    for &n in penalties {
        let driver = Generator::new(PenalizedDriver { base: gen.clone(), phi: phi.generator().clone(), penalty: n });
        let mut sol = solve_bsde(tree, &driver, xi)?;
        let (c, violation) = reconstruct_increasing(tree, phi, &sol, n);
        sol.c = Some(c);
        if let Some(prev) = sols.last().map(|s: &BsdeSolution<S>| s.y0()) {
            if sol.y0() < prev - tol * (S::one() + prev.abs()) {
                return Err(Error::NonMonotone {
                    prev: prev.to_f64_lossy(),
                    next: sol.y0().to_f64_lossy(),
                    penalty: n.to_f64_lossy(),
                });
            }
        }
        report.y0.push(sol.y0().to_f64_lossy());
        report.constraint_violation.push(violation.to_f64_lossy());
        sols.push(sol);
    }
    Ok((sols, report))
}

fn reconstruct_increasing<S: Scalar>(
    tree: &ScenarioTree<S>,
    phi: &ConstraintFunction<S>,
    sol: &BsdeSolution<S>,
    n: S,
) -> (AdaptedProcess<S>, S) {
    let dt = tree.dt();
    let mut slices = vec![tree.constant(0, S::zero())];
    let mut violation = S::zero();
    for k in 0..tree.steps() {
        let abs_phi: Vec<S> = (0..tree.nodes_at(k))
            .map(|j| phi.generator().eval(k, j, sol.y.at(k).values()[j], sol.z.at(k).at(j)).abs())
            .collect();
        violation = violation + ordered_sum(abs_phi.iter().copied()) / S::from_usize(abs_phi.len()).unwrap() * dt;
        let prev = slices.last().unwrap().values().to_vec();
        let next = (0..tree.nodes_at(k + 1))
            .map(|c| {
                let p = tree.parent(c);
                prev[p] + n * abs_phi[p] * dt
            })
            .collect();
        slices.push(RandomVariable::new(k + 1, next));
    }
    (AdaptedProcess::new(slices), violation)
}
