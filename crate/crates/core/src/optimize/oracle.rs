use super::{MeanConstraint, Problem};
use crate::error::{Error, Result};
use crate::filtration::{RandomVariable, ScenarioTree};
use crate::risk::{RiskKind, Utility};
use crate::scalar::Scalar;

/// Exact minimizer of a quadratic instance with its multipliers, in the form
/// `grad rho(xi) + lambda q - mu = nu`, `nu >= 0` supported on `{xi = 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<S> {
    pub xi: RandomVariable<S>,
    /// Budget multiplier; `+inf` in the limit case.
    pub lambda: S,
    /// Mean multiplier, when a mean constraint is present.
    pub mu: Option<S>,
    pub budget_active: bool,
    /// Budget equals the minimal cost: the solution spreads the mean over the
    /// cheapest leaves.
    pub limit_case: bool,
    pub bisection_steps: usize,
}

struct Kkt<'a, S> {
    q: &'a RandomVariable<S>,
    alpha: S,
    b: S,
    nonneg: bool,
}

impl<S: Scalar> Kkt<'_, S> {
    fn xi(&self, mu: S, lambda: S) -> RandomVariable<S> {
        let two_a = S::lit(2.0) * self.alpha;
        let ab = self.alpha * self.b;
        self.q.map(|qi| {
            let v = (mu - lambda * qi - ab) / two_a;
            if self.nonneg {
                v.max(S::zero())
            } else {
                v
            }
        })
    }

    /// `mu` with `E[xi(mu, lambda)] = c`, from the sorted breakpoints.
    fn mu_for_mean(&self, lambda: S, c: S) -> S {
        let ab = self.alpha * self.b;
        let two_a = S::lit(2.0) * self.alpha;
        if !self.nonneg {
            return two_a * c + lambda * self.q.mean() + ab;
        }
        let mut s: Vec<S> = self.q.values().iter().map(|&qi| lambda * qi + ab).collect();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if c <= S::zero() {
            return s[0];
        }
        let n = S::from_usize(s.len()).unwrap();
        let target = two_a * n * c;
        let mut acc = S::zero();
        let mut mu = s[0] + target;
        for (k, &sk) in s.iter().enumerate() {
            acc = acc + sk;
            let m = (target + acc) / S::from_usize(k + 1).unwrap();
            if sk < m {
                mu = m;
            } else {
                break;
            }
        }
        mu
    }

    fn mu(&self, lambda: S, mean: Option<S>) -> S {
        mean.map_or(S::zero(), |c| self.mu_for_mean(lambda, c))
    }

    /// Smallest `lambda >= 0` with `E[q xi] <= x`, by bisection.
    fn solve(&self, x: S, mean: Option<S>) -> Option<(S, S, usize)> {
        let cost = |lambda: S| self.q.dot(&self.xi(self.mu(lambda, mean), lambda));
        if cost(S::zero()) <= x {
            return Some((S::zero(), self.mu(S::zero(), mean), 0));
        }
        let mut hi = S::one();
        while cost(hi) > x {
            hi = hi * S::lit(2.0);
            if hi > S::lit(1e15) {
                return None;
            }
        }
        let mut lo = S::zero();
        let mut steps = 0;
        while hi - lo > S::tol_floor(1e-14) * (S::one() + hi) && steps < 400 {
            let mid = S::lit(0.5) * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if cost(mid) > x {
                lo = mid;
            } else {
                hi = mid;
            }
            steps += 1;
        }
        Some((hi, self.mu(hi, mean), steps))
    }
}

/// Closed-form KKT solve for `rho = alpha E[xi^2 + b xi]` or `alpha Var(xi)`
/// under a linear generator: `xi_i = max(0, (mu - lambda q_i - alpha b) / (2 alpha))`,
/// with `lambda` found by bisection on the budget and `mu` by the sorted
/// breakpoints of the mean.
pub fn qp_oracle<S: Scalar>(tree: &ScenarioTree<S>, problem: &Problem<S>) -> Result<QpSolution<S>> {
    let q = problem
        .linear_density(tree)?
        .ok_or_else(|| Error::Unsupported(format!("oracle needs a linear generator, got `{}`", problem.gen.name())))?;
    problem.check_feasible(tree)?;
    let alpha = problem.risk.scale;
    let x = problem.budget;
    let two_a = S::lit(2.0) * alpha;

    let (b, variance) = match &problem.risk.kind {
        RiskKind::ExpectedFunction(Utility::Square { b }) => (*b, false),
        RiskKind::Variance => (S::zero(), true),
        _ => return Err(Error::Unsupported(format!("oracle needs a quadratic risk, got `{}`", problem.risk.name()))),
    };
    let kkt = Kkt { q: &q, alpha, b, nonneg: problem.nonneg };

    // (mean level to enforce with equality, mean multiplier shift)
    let equality = match (variance, problem.mean) {
        (true, None) => return Err(Error::Unsupported("variance without a mean constraint".into())),
        (true, Some(MeanConstraint::Equal(c))) => Some(c),
        (true, Some(MeanConstraint::AtLeast(c))) => {
            let m = if problem.nonneg { c.max(S::zero()) } else { c };
            if m * q.mean() <= x {
                let xi = tree.constant(tree.steps(), m);
                let budget_active = (q.dot(&xi) - x).abs() <= S::tol_floor(1e-12) * (S::one() + x.abs());
                return Ok(QpSolution {
                    xi,
                    lambda: S::zero(),
                    mu: Some(S::zero()),
                    budget_active,
                    limit_case: false,
                    bisection_steps: 0,
                });
            }
            Some(c)
        }
        (false, Some(MeanConstraint::Equal(c))) => Some(c),
        (false, Some(MeanConstraint::AtLeast(c))) => {
            // the mean constraint may be slack
            match kkt.solve(x, None) {
                Some((lambda, _, steps)) if kkt.xi(S::zero(), lambda).mean() >= c => {
                    let xi = kkt.xi(S::zero(), lambda);
                    return Ok(QpSolution {
                        budget_active: lambda > S::zero(),
                        xi,
                        lambda,
                        mu: Some(S::zero()),
                        limit_case: false,
                        bisection_steps: steps,
                    });
                }
                _ => Some(c),
            }
        }
        (false, None) => None,
    };

    let shift = |mu: S| match (variance, equality) {
        (true, Some(c)) => mu - two_a * c,
        _ => mu,
    };

    match kkt.solve(x, equality) {
        Some((lambda, mu, steps)) => {
            let xi = kkt.xi(mu, lambda);
            Ok(QpSolution {
                budget_active: lambda > S::zero(),
                xi,
                lambda,
                mu: problem.mean.map(|_| shift(mu)),
                limit_case: false,
                bisection_steps: steps,
            })
        }
        None => {
            // budget at the minimal cost: spread the mean over the cheapest leaves
            let c = equality.ok_or(Error::Infeasible { budget: x.to_f64_lossy(), min_cost: f64::NEG_INFINITY })?;
            let lo = q.min_value();
            let cheap: Vec<bool> = q.values().iter().map(|&v| v <= lo * (S::one() + S::tol_floor(1e-12))).collect();
            let k = cheap.iter().filter(|&&c| c).count();
            let level = c * S::from_usize(q.len()).unwrap() / S::from_usize(k).unwrap();
            let xi = RandomVariable::new(tree.steps(), cheap.iter().map(|&c| if c { level } else { S::zero() }).collect());
            Ok(QpSolution {
                xi,
                lambda: S::infinity(),
                mu: problem.mean.map(|_| S::infinity()),
                budget_active: true,
                limit_case: true,
                bisection_steps: 0,
            })
        }
    }
}
