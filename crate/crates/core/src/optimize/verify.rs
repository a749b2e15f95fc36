use serde::Serialize;

use super::{MeanConstraint, Problem};
use crate::error::{Error, Result};
use crate::filtration::{RandomVariable, ScenarioTree};
use crate::nonsmooth::{conic_least_squares, max_rule_subdifferential, Sign};
use crate::risk::{GradientLabel, RiskKind};
use crate::scalar::Scalar;

/// Which constraint attains the max in `h = max(E^g(xi) - x, c - E[xi])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseTag {
    BudgetActive,
    ExpectationActive,
    Tie,
}

/// The same fit carried out with the uncorrected gradient variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AltFormReport {
    pub lambda: f64,
    pub a: Option<f64>,
    pub residual_sup: f64,
    pub residual_min_on_zero_set: Option<f64>,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    pub lambda: f64,
    pub a: Option<f64>,
    pub mu: Option<f64>,
    pub case: Option<CaseTag>,
    /// `zeta + lambda (hull element) - mu` on every leaf.
    pub residual: Vec<f64>,
    /// Sup-norm of the residual on `{xi > tol}`.
    pub residual_sup: f64,
    /// Minimum of the residual on `{xi <= tol}`; `None` when that set is empty.
    pub residual_min_on_zero_set: Option<f64>,
    pub complementary_slackness: f64,
    pub feasibility_gap: f64,
    /// `h = 1/lambda`, `h1 = -mu/lambda` in the normalized form `h zeta - h1 + q = 0`.
    pub h: Option<f64>,
    pub h1: Option<f64>,
    /// Some multipliers of the right sign make the residual vanish.
    pub admissible: bool,
    pub passes: bool,
    pub gradient_label: String,
    /// Tie case only: residual sup with `a` pinned to 0 and to 1.
    pub endpoint_residuals: Option<[f64; 2]>,
    pub alt_form: Option<AltFormReport>,
    pub notes: Vec<String>,
}

struct Fit {
    coefficients: Vec<f64>,
    residual: Vec<f64>,
    sup: f64,
    min_zero: Option<f64>,
}

fn fit<S: Scalar>(zeta: &RandomVariable<S>, columns: &[(RandomVariable<S>, Sign)], mask: &[bool]) -> Result<Fit> {
    let f = conic_least_squares(zeta, columns, mask)?;
    let residual: Vec<f64> = f.residual.values().iter().map(|v| v.to_f64_lossy()).collect();
    let sup = residual.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| r.abs()).fold(0.0, f64::max);
    let min_zero = residual.iter().zip(mask).filter(|(_, &m)| !m).map(|(r, _)| *r).reduce(f64::min);
    Ok(Fit { coefficients: f.coefficients.iter().map(|c| c.to_f64_lossy()).collect(), residual, sup, min_zero })
}

fn positive_set<S: Scalar>(p: &Problem<S>, xi: &RandomVariable<S>, tol: f64) -> Vec<bool> {
    xi.values().iter().map(|v| !p.nonneg || v.to_f64_lossy() > tol).collect()
}

fn label(l: GradientLabel) -> String {
    match l {
        GradientLabel::Gradient => "gradient".into(),
        GradientLabel::ClarkeSelection { kinks } => format!("clarke_selection({kinks} kinks)"),
    }
}

/// Checks `zeta + lambda q - mu = nu` with `zeta` a subgradient of the risk,
/// `q` the budget representer, `nu = 0` on `{xi > tol}` and `nu >= 0` on the
/// rest, `lambda >= 0` and complementary slackness. The multipliers come
/// from a sign-constrained least-squares fit on `{xi > tol}`.
pub fn verify_stationarity<S: Scalar>(
    tree: &ScenarioTree<S>,
    xi: &RandomVariable<S>,
    problem: &Problem<S>,
    tol: f64,
) -> Result<StationarityReport> {
    tree.check_terminal(xi)?;
    let g = problem.risk.subgradient_element(tree, xi)?;
    let q = problem.budget_gradient(tree, xi)?.q;
    let budget_gap = (problem.budget_value(tree, xi)? - problem.budget).to_f64_lossy();
    let mean = xi.mean();
    let mask = positive_set(problem, xi, tol);
    let minus_one = xi.map(|_| -S::one());

    let mut columns = Vec::new();
    let lambda_col = (budget_gap >= -tol).then(|| {
        columns.push((q.clone(), Sign::NonNegative));
        columns.len() - 1
    });
    let mean_col = match problem.mean {
        Some(MeanConstraint::Equal(_)) => {
            columns.push((minus_one, Sign::Free));
            Some(columns.len() - 1)
        }
        Some(MeanConstraint::AtLeast(c)) if (mean - c).to_f64_lossy() <= tol => {
            columns.push((minus_one, Sign::NonNegative));
            Some(columns.len() - 1)
        }
        _ => None,
    };
    let f = fit(&g.gradient, &columns, &mask)?;
    let lambda = lambda_col.map_or(0.0, |i| f.coefficients[i]);
    let mu = problem.mean.map(|_| mean_col.map_or(0.0, |i| f.coefficients[i]));

    let mut slack = (lambda * budget_gap).abs();
    if let (Some(MeanConstraint::AtLeast(c)), Some(m)) = (problem.mean, mu) {
        slack += (m * (mean - c).to_f64_lossy()).abs();
    }
    let feasibility_gap = problem.feasibility_gap(tree, xi)?.to_f64_lossy();
    let admissible = f.sup <= tol && f.min_zero.is_none_or(|m| m >= -tol);
    let passes = admissible && lambda >= 0.0 && slack <= tol && feasibility_gap <= tol;
    let mut notes = Vec::new();
    if budget_gap < -tol {
        notes.push("budget slack: lambda fixed at 0 by complementary slackness".into());
    }
    Ok(StationarityReport {
        lambda,
        a: None,
        mu,
        case: None,
        residual: f.residual,
        residual_sup: f.sup,
        residual_min_on_zero_set: f.min_zero,
        complementary_slackness: slack,
        feasibility_gap,
        h: (lambda > 0.0).then(|| 1.0 / lambda),
        h1: match mu {
            Some(m) if lambda > 0.0 => Some(-m / lambda),
            _ => None,
        },
        admissible,
        passes,
        gradient_label: label(g.label),
        endpoint_residuals: None,
        alt_form: None,
        notes,
    })
}

/// Max-rule verification shared by the variance and g-risk examples: the two
/// constraints are merged into `h = max(E^g - x, c - E[xi]) <= 0` and the
/// multiplier is `lambda ((1-a) q - a)`.
fn verify_max_rule<S: Scalar>(
    tree: &ScenarioTree<S>,
    xi: &RandomVariable<S>,
    problem: &Problem<S>,
    tol: f64,
) -> Result<StationarityReport> {
    tree.check_terminal(xi)?;
    let g = problem.risk.subgradient_element(tree, xi)?;
    let alt = problem.risk.alt_gradient(xi);
    let q = problem.budget_gradient(tree, xi)?.q;
    let h1 = (problem.budget_value(tree, xi)? - problem.budget).to_f64_lossy();
    let c = match problem.mean {
        Some(MeanConstraint::AtLeast(c)) => Some(c),
        None => None,
        Some(MeanConstraint::Equal(_)) => {
            return Err(Error::Unsupported("max-rule verification takes an at-least mean constraint".into()))
        }
    };
    let h2 = c.map(|c| (c - xi.mean()).to_f64_lossy());
    let minus_one = xi.map(|_| -S::one());

    let case = match h2 {
        None => CaseTag::BudgetActive,
        Some(h2) if (h1 - h2).abs() <= tol => CaseTag::Tie,
        Some(h2) if h1 > h2 => CaseTag::BudgetActive,
        Some(_) => CaseTag::ExpectationActive,
    };
    let hmax = h2.map_or(h1, |h2| h1.max(h2));
    let mut functions = vec![(S::lit(h1), q.clone())];
    if let Some(h2) = h2 {
        functions.push((S::lit(h2), minus_one.clone()));
    }
    let hull = max_rule_subdifferential(&functions, S::lit(tol))?;
    let mask = positive_set(problem, xi, tol);
    let columns: Vec<(RandomVariable<S>, Sign)> = if hmax >= -tol {
        hull.extreme_points.iter().map(|p| (p.clone(), Sign::NonNegative)).collect()
    } else {
        Vec::new()
    };

    let split = |coeffs: &[f64]| -> (f64, Option<f64>) {
        let mut u_budget = 0.0;
        let mut u_mean = 0.0;
        if !columns.is_empty() {
            for (&i, &u) in hull.active.iter().zip(coeffs) {
                if i == 0 {
                    u_budget = u;
                } else {
                    u_mean = u;
                }
            }
        }
        let lambda = u_budget + u_mean;
        let a = if lambda > 0.0 {
            Some(u_mean / lambda)
        } else {
            match case {
                CaseTag::BudgetActive => Some(0.0),
                CaseTag::ExpectationActive => Some(1.0),
                CaseTag::Tie => None,
            }
        };
        (lambda, a)
    };

    let f = fit(&g.gradient, &columns, &mask)?;
    let (lambda, a) = split(&f.coefficients);
    let slack = (lambda * hmax).abs();
    let feasibility_gap = problem.feasibility_gap(tree, xi)?.to_f64_lossy();
    let admissible = f.sup <= tol && f.min_zero.is_none_or(|m| m >= -tol);
    let passes = admissible && slack <= tol && feasibility_gap <= tol;

    let endpoint_residuals = if case == CaseTag::Tie && columns.len() == 2 {
        let e0 = fit(&g.gradient, &[(q.clone(), Sign::NonNegative)], &mask)?;
        let e1 = fit(&g.gradient, &[(minus_one.clone(), Sign::NonNegative)], &mask)?;
        let worst = |e: &Fit| e.sup.max(e.min_zero.map_or(0.0, |m| (-m).max(0.0)));
        Some([worst(&e0), worst(&e1)])
    } else {
        None
    };

    let alt_form = match alt {
        Some(z) => {
            let fa = fit(&z, &columns, &mask)?;
            let (l, aa) = split(&fa.coefficients);
            Some(AltFormReport {
                lambda: l,
                a: aa,
                residual_sup: fa.sup,
                residual_min_on_zero_set: fa.min_zero,
                passes: fa.sup <= tol && fa.min_zero.is_none_or(|m| m >= -tol),
            })
        }
        None => None,
    };

    let mut notes = Vec::new();
    if !admissible {
        notes.push("no admissible multiplier lambda >= 0 reproduces the subgradient".into());
    }
    if hmax < -tol {
        notes.push("both constraints slack: lambda fixed at 0".into());
    }
    if let GradientLabel::ClarkeSelection { kinks } = g.label {
        notes.push(format!("risk subgradient is one Clarke selection ({kinks} kink nodes); the check is for that selection only"));
    }
    Ok(StationarityReport {
        lambda,
        a,
        mu: None,
        case: Some(case),
        residual: f.residual,
        residual_sup: f.sup,
        residual_min_on_zero_set: f.min_zero,
        complementary_slackness: slack,
        feasibility_gap,
        h: (lambda > 0.0).then(|| 1.0 / lambda),
        h1: None,
        admissible,
        passes,
        gradient_label: label(g.label),
        endpoint_residuals,
        alt_form,
        notes,
    })
}

/// Variance risk with budget and at-least-mean constraints.
pub fn verify_example2<S: Scalar>(
    tree: &ScenarioTree<S>,
    xi: &RandomVariable<S>,
    problem: &Problem<S>,
    tol: f64,
) -> Result<StationarityReport> {
    if !matches!(problem.risk.kind, RiskKind::Variance) {
        return Err(Error::Unsupported(format!("expected variance risk, got `{}`", problem.risk.name())));
    }
    if !matches!(problem.mean, Some(MeanConstraint::AtLeast(_))) {
        return Err(Error::Unsupported("expected an at-least mean constraint".into()));
    }
    verify_max_rule(tree, xi, problem, tol)
}

/// g-risk with a budget and an optional at-least-mean constraint.
pub fn verify_example3<S: Scalar>(
    tree: &ScenarioTree<S>,
    xi: &RandomVariable<S>,
    problem: &Problem<S>,
    tol: f64,
) -> Result<StationarityReport> {
    if !matches!(problem.risk.kind, RiskKind::GRisk(_)) {
        return Err(Error::Unsupported(format!("expected g-risk, got `{}`", problem.risk.name())));
    }
    verify_max_rule(tree, xi, problem, tol)
}
