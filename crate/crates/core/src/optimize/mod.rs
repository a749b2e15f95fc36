//! Risk minimization under a g-expectation budget `E^g(xi) <= x`, optional
//! mean constraint and nonnegativity, with a closed-form oracle for quadratic
//! instances and verifiers for the first-order conditions.

mod descent;
mod oracle;
mod verify;

pub use descent::{minimize_risk, MinimizeConfig, MinimizeResult};
pub use oracle::{qp_oracle, QpSolution};
pub use verify::{
    verify_example2, verify_example3, verify_stationarity, AltFormReport, CaseTag, StationarityReport,
};

use crate::adjoint::{clarke_selection_representers, gradient_representer, Representer};
use crate::bsde::{g_expectation, solve_bsde};
use crate::error::{Error, Result};
use crate::filtration::{RandomVariable, ScenarioTree};
use crate::generators::Generator;
use crate::nonsmooth::ConvexSet;
use crate::risk::RiskMeasure;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanConstraint<S> {
    Equal(S),
    AtLeast(S),
}

impl<S: Scalar> MeanConstraint<S> {
    pub fn level(&self) -> S {
        match *self {
            MeanConstraint::Equal(c) | MeanConstraint::AtLeast(c) => c,
        }
    }

    pub fn violation(&self, mean: S) -> S {
        match *self {
            MeanConstraint::Equal(c) => (mean - c).abs(),
            MeanConstraint::AtLeast(c) => (c - mean).max(S::zero()),
        }
    }
}

/// `min rho(xi)` over `{E^g(xi) <= budget}` intersected with the optional mean
/// constraint and `{xi >= 0}` when `nonneg`.
#[derive(Debug, Clone)]
pub struct Problem<S: Scalar> {
    pub risk: RiskMeasure<S>,
    pub gen: Generator<S>,
    pub budget: S,
    pub mean: Option<MeanConstraint<S>>,
    pub nonneg: bool,
}

/// Cheapest budget among points satisfying the mean and sign constraints
/// (linear generators only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityCertificate<S> {
    /// `-inf` when the cost is unbounded below, `+inf` when the other constraints are empty.
    pub min_cost: S,
    pub feasible: bool,
}

impl<S: Scalar> Problem<S> {
    /// The closed convex set cut out by the mean and sign constraints.
    pub fn feasible_set(&self) -> Option<ConvexSet<S>> {
        match (self.nonneg, self.mean) {
            (true, Some(MeanConstraint::Equal(c))) => Some(ConvexSet::NonNegMeanEquals(c)),
            (true, Some(MeanConstraint::AtLeast(c))) => Some(ConvexSet::NonNegMeanAtLeast(c)),
            (true, None) => Some(ConvexSet::NonNegative),
            (false, Some(MeanConstraint::Equal(c))) => Some(ConvexSet::MeanEquals(c)),
            (false, Some(MeanConstraint::AtLeast(c))) => Some(ConvexSet::MeanAtLeast(c)),
            (false, None) => None,
        }
    }

    pub fn project(&self, v: &RandomVariable<S>) -> Result<RandomVariable<S>> {
        match self.feasible_set() {
            Some(set) => set.project(v),
            None => Ok(v.clone()),
        }
    }

    pub fn budget_value(&self, tree: &ScenarioTree<S>, xi: &RandomVariable<S>) -> Result<S> {
        g_expectation(tree, &self.gen, xi)
    }

    /// Representer of the budget functional at `xi`; one Clarke selection when
    /// the generator is not smooth.
    pub fn budget_gradient(&self, tree: &ScenarioTree<S>, xi: &RandomVariable<S>) -> Result<Representer<S>> {
        let sol = solve_bsde(tree, &self.gen, xi)?;
        if self.gen.is_smooth() {
            gradient_representer(tree, &self.gen, &sol)
        } else {
            clarke_selection_representers(tree, &self.gen, &sol, 1, 0)?
                .into_iter()
                .next()
                .map(|c| c.representer)
                .ok_or(Error::Empty("Clarke selections"))
        }
    }

    /// Budget excess plus mean and sign violations.
    pub fn feasibility_gap(&self, tree: &ScenarioTree<S>, xi: &RandomVariable<S>) -> Result<S> {
        let mut gap = (self.budget_value(tree, xi)? - self.budget).max(S::zero());
        if let Some(m) = self.mean {
            gap = gap + m.violation(xi.mean());
        }
        if self.nonneg {
            gap = gap + (-xi.min_value()).max(S::zero());
        }
        Ok(gap)
    }

    /// The leaf density `q` with `E^g(xi) = E[q xi]`, if the generator is linear.
    pub fn linear_density(&self, tree: &ScenarioTree<S>) -> Result<Option<RandomVariable<S>>> {
        if !self.gen.is_linear() {
            return Ok(None);
        }
        Ok(Some(self.budget_gradient(tree, &tree.constant(tree.steps(), S::zero()))?.q))
    }

    pub fn feasibility_certificate(&self, tree: &ScenarioTree<S>) -> Result<Option<FeasibilityCertificate<S>>> {
        let Some(q) = self.linear_density(tree)? else { return Ok(None) };
        let (lo, hi) = (q.min_value(), q.max_value());
        let flat = hi - lo <= S::lit(1e-14) * hi.abs().max(S::one());
        let inf = S::infinity();
        let min_cost = match (self.nonneg, self.mean) {
            (true, Some(MeanConstraint::Equal(c))) if c < S::zero() => inf,
            (true, Some(MeanConstraint::Equal(c))) => c * lo,
            (true, Some(MeanConstraint::AtLeast(c))) => c.max(S::zero()) * lo,
            (true, None) => S::zero(),
            (false, Some(MeanConstraint::Equal(c))) if flat => c * q.mean(),
            (false, Some(MeanConstraint::AtLeast(c))) if flat && lo > S::zero() => c * q.mean(),
            (false, _) => -inf,
        };
        Ok(Some(FeasibilityCertificate { min_cost, feasible: self.budget >= min_cost }))
    }

    /// `Err(Infeasible)` when the certificate rules the problem out.
    pub fn check_feasible(&self, tree: &ScenarioTree<S>) -> Result<()> {
        match self.feasibility_certificate(tree)? {
            Some(c) if !c.feasible => {
                Err(Error::Infeasible { budget: self.budget.to_f64_lossy(), min_cost: c.min_cost.to_f64_lossy() })
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::parse_generator;

    pub(super) fn example1(t: &ScenarioTree<f64>, x: f64) -> Problem<f64> {
        Problem {
            risk: RiskMeasure::square(0.0),
            gen: parse_generator("linear:r=0,theta=0.2", t, None).unwrap(),
            budget: x,
            mean: Some(MeanConstraint::Equal(1.0)),
            nonneg: true,
        }
    }

    #[test]
    fn certificate() {
        let t = ScenarioTree::new(4, 1.0, 1).unwrap();
        let p = example1(&t, 1.05);
        let c = p.feasibility_certificate(&t).unwrap().unwrap();
        assert!((c.min_cost - 0.9f64.powi(4)).abs() < 1e-15);
        assert!(c.feasible);
        let bad = example1(&t, 0.6);
        assert!(matches!(bad.check_feasible(&t), Err(Error::Infeasible { .. })));
        let free = Problem { nonneg: false, ..example1(&t, -100.0) };
        assert!(free.check_feasible(&t).is_ok());
    }

    #[test]
    fn gap_accounts_for_all_constraints() {
        let t = ScenarioTree::new(4, 1.0, 1).unwrap();
        let p = example1(&t, 1.0);
        assert!(p.feasibility_gap(&t, &t.constant(4, 1.0)).unwrap() < 1e-15);
        let xi = t.terminal_from_fn(|j| if j == 0 { -0.5 } else { 16.5 / 15.0 });
        let slack = example1(&t, 2.0);
        assert!((slack.feasibility_gap(&t, &xi).unwrap() - 0.5).abs() < 1e-12);
        let budget = p.budget_value(&t, &xi).unwrap() - 1.0;
        assert!(budget > 0.0);
        assert!((p.feasibility_gap(&t, &xi).unwrap() - 0.5 - budget).abs() < 1e-12);
    }
}
