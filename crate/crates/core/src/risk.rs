//! Risk functionals on terminal claims: expected functions `E[u(xi)]`,
//! variance, and g-risk `rho(xi) = E^f_{0,T}(-xi)`. Every kind carries a
//! positive scale factor.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::adjoint::{clarke_selection_representers, gradient_representer};
use crate::bsde::{g_expectation, solve_bsde};
use crate::error::{Error, Result};
use crate::filtration::{RandomVariable, ScenarioTree};
use crate::generators::{parse_generator, parse_number, split_spec, Generator};
use crate::scalar::Scalar;

type ScalarFn<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

/// The integrand `u` of an expected-function risk.
#[derive(Clone)]
pub enum Utility<S> {
    /// `u(v) = v^2 + b v`.
    Square { b: S },
    /// `u(v) = exp(a v)`.
    Exp { a: S },
    Custom { name: String, u: ScalarFn<S>, u_x: ScalarFn<S> },
}

impl<S: Scalar> Utility<S> {
    pub fn value(&self, v: S) -> S {
        match self {
            Utility::Square { b } => v * v + *b * v,
            Utility::Exp { a } => (*a * v).exp(),
            Utility::Custom { u, .. } => u(v),
        }
    }

    pub fn derivative(&self, v: S) -> S {
        match self {
            Utility::Square { b } => S::lit(2.0) * v + *b,
            Utility::Exp { a } => *a * (*a * v).exp(),
            Utility::Custom { u_x, .. } => u_x(v),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Utility::Square { b } => format!("u=square,b={b}"),
            Utility::Exp { a } => format!("u=exp,a={a}"),
            Utility::Custom { name, .. } => format!("u={name}"),
        }
    }
}

impl<S: Scalar> fmt::Debug for Utility<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Clone, Debug)]
pub enum RiskKind<S: Scalar> {
    ExpectedFunction(Utility<S>),
    Variance,
    GRisk(Generator<S>),
}

#[derive(Clone, Debug)]
pub struct RiskMeasure<S: Scalar> {
    pub kind: RiskKind<S>,
    pub scale: S,
}

/// How a returned gradient was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientLabel {
    Gradient,
    /// One extreme-point selection of the Clarke subdifferential; `kinks` nodes
    /// had a non-singleton subdifferential.
    ClarkeSelection { kinks: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskGradient<S> {
    pub gradient: RandomVariable<S>,
    pub label: GradientLabel,
}

impl<S: Scalar> RiskMeasure<S> {
    pub fn square(b: S) -> Self {
        Self { kind: RiskKind::ExpectedFunction(Utility::Square { b }), scale: S::one() }
    }

    pub fn expected(u: Utility<S>) -> Self {
        Self { kind: RiskKind::ExpectedFunction(u), scale: S::one() }
    }

    pub fn variance() -> Self {
        Self { kind: RiskKind::Variance, scale: S::one() }
    }

    pub fn g_risk(f: Generator<S>) -> Self {
        Self { kind: RiskKind::GRisk(f), scale: S::one() }
    }

    /// Multiplies by `alpha > 0`.
    pub fn scaled(mut self, alpha: S) -> Result<Self> {
        if alpha.is_nan() || alpha <= S::zero() || !alpha.is_finite() {
            return Err(Error::BadParameter { name: "scale".into(), reason: format!("must be finite and > 0, got {alpha}") });
        }
        self.scale = self.scale * alpha;
        Ok(self)
    }

    pub fn name(&self) -> String {
        let base = match &self.kind {
            RiskKind::ExpectedFunction(u) => format!("efun:{}", u.name()),
            RiskKind::Variance => "var".to_string(),
            RiskKind::GRisk(f) => format!("grisk:f={}", f.name()),
        };
        if self.scale == S::one() {
            base
        } else {
            format!("{base} x {}", self.scale)
        }
    }

    pub fn evaluate(&self, tree: &ScenarioTree<S>, xi: &RandomVariable<S>) -> Result<S> {
        tree.check_terminal(xi)?;
        let v = match &self.kind {
            RiskKind::ExpectedFunction(u) => xi.map(|x| u.value(x)).mean(),
            RiskKind::Variance => {
                let m = xi.mean();
                xi.map(|x| (x - m) * (x - m)).mean()
            }
            RiskKind::GRisk(f) => g_expectation(tree, f, &xi.scale(-S::one()))?,
        };
        Ok(self.scale * v)
    }

    /// One element of the (Clarke) subdifferential at `xi`.
    pub fn subgradient_element(&self, tree: &ScenarioTree<S>, xi: &RandomVariable<S>) -> Result<RiskGradient<S>> {
        tree.check_terminal(xi)?;
        let a = self.scale;
        let two = S::lit(2.0);
        let (gradient, label) = match &self.kind {
            RiskKind::ExpectedFunction(u) => (xi.map(|x| a * u.derivative(x)), GradientLabel::Gradient),
            RiskKind::Variance => {
                let m = xi.mean();
                (xi.map(|x| a * two * (x - m)), GradientLabel::Gradient)
            }
            RiskKind::GRisk(f) => {
                let sol = solve_bsde(tree, f, &xi.scale(-S::one()))?;
                if f.is_smooth() {
                    let q = gradient_representer(tree, f, &sol)?;
                    (q.q.scale(-a), GradientLabel::Gradient)
                } else {
                    let cand = clarke_selection_representers(tree, f, &sol, 1, 0)?
                        .into_iter()
                        .next()
                        .ok_or(Error::Empty("Clarke selections"))?;
                    let kinks = cand.choices.len();
                    let label =
                        if kinks == 0 { GradientLabel::Gradient } else { GradientLabel::ClarkeSelection { kinks } };
                    (cand.representer.q.scale(-a), label)
                }
            }
        };
        Ok(RiskGradient { gradient, label })
    }

    /// Uncorrected variants kept for side-by-side reporting: `2(xi + E xi)`
    /// for variance and `2 xi` (twice the terminal value of the adjoint pair)
    /// for g-risk. `None` for expected functions.
    pub fn alt_gradient(&self, xi: &RandomVariable<S>) -> Option<RandomVariable<S>> {
        let two = S::lit(2.0) * self.scale;
        match &self.kind {
            RiskKind::ExpectedFunction(_) => None,
            RiskKind::Variance => {
                let m = xi.mean();
                Some(xi.map(|x| two * (x + m)))
            }
            RiskKind::GRisk(_) => Some(xi.scale(two)),
        }
    }

    /// Lipschitz constant of the gradient when it is known in closed form.
    pub fn gradient_lipschitz(&self) -> Option<S> {
        match &self.kind {
            RiskKind::ExpectedFunction(Utility::Square { .. }) | RiskKind::Variance => Some(S::lit(2.0) * self.scale),
            _ => None,
        }
    }
}

/// Parses `var`, `efun:u=square,b=0.5`, `efun:u=exp,a=1`, `grisk:f=<generator spec>`.
/// Any kind accepts `scale=<alpha>`; for `grisk` the `f=` part must come last.
pub fn parse_risk<S: Scalar>(spec: &str, tree: &ScenarioTree<S>, base_dir: Option<&Path>) -> Result<RiskMeasure<S>> {
    let spec = spec.trim();
    let (name, rest) = spec.split_once(':').map_or((spec, ""), |(n, r)| (n.trim(), r.trim()));
    let (params, gen_spec) = if name == "grisk" {
        match rest.find("f=") {
            Some(pos) if pos == 0 || rest[..pos].ends_with(',') => {
                (rest[..pos].trim_end_matches(','), Some(&rest[pos + 2..]))
            }
            _ => return Err(Error::BadParameter { name: "f".into(), reason: "grisk needs f=<generator>".into() }),
        }
    } else {
        (rest, None)
    };
    let (_, params) = split_spec(&format!("x:{params}"))?;
    let get = |key: &str| params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let allowed: &[&str] = match name {
        "var" => &["scale"],
        "efun" => &["u", "b", "a", "scale"],
        "grisk" => &["scale"],
        _ => return Err(Error::UnknownSpec(spec.to_string())),
    };
    for (k, _) in &params {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::BadParameter { name: k.clone(), reason: format!("not a parameter of `{name}`") });
        }
    }
    let num = |key: &str, default: f64| -> Result<S> { get(key).map_or(Ok(S::lit(default)), |v| parse_number(key, v)) };
    let risk = match name {
        "var" => RiskMeasure::variance(),
        "efun" => match get("u").unwrap_or("square") {
            "square" => RiskMeasure::square(num("b", 0.0)?),
            "exp" => RiskMeasure::expected(Utility::Exp { a: num("a", 1.0)? }),
            other => return Err(Error::BadParameter { name: "u".into(), reason: format!("unknown integrand `{other}`") }),
        },
        "grisk" => RiskMeasure::g_risk(parse_generator(gen_spec.unwrap(), tree, base_dir)?),
        _ => unreachable!(),
    };
    match get("scale") {
        Some(v) => risk.scaled(parse_number("scale", v)?),
        None => Ok(risk),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t4() -> ScenarioTree<f64> {
        ScenarioTree::new(4, 1.0, 1).unwrap()
    }

    #[test]
    fn evaluation_examples() {
        let t = t4();
        let w = t.brownian_coord(4, 0);
        assert!((RiskMeasure::variance().evaluate(&t, &w).unwrap() - 1.0).abs() < 1e-14);
        let c = t.constant(4, 1.7);
        assert!((RiskMeasure::square(0.0).evaluate(&t, &c).unwrap() - 2.89).abs() < 1e-14);
        let r = parse_risk("grisk:f=abs_z:kappa=0.1", &t, None).unwrap();
        assert!((r.evaluate(&t, &w.scale(-1.0)).unwrap() - 0.1).abs() < 1e-13);
    }

    #[test]
    fn gradient_examples() {
        let t = t4();
        let xi = t.terminal_from_fn(|j| j as f64 / 5.0);
        let g = RiskMeasure::square(0.5).subgradient_element(&t, &xi).unwrap();
        assert_eq!(g.gradient, xi.map(|x| 2.0 * x + 0.5));
        let g = RiskMeasure::variance().subgradient_element(&t, &t.constant(4, 3.0)).unwrap();
        assert_eq!(g.gradient.max_abs(), 0.0);

        let r = parse_risk("grisk:f=linear:r=0,theta=0.2", &t, None).unwrap();
        let g = r.subgradient_element(&t, &xi).unwrap();
        assert_eq!(g.label, GradientLabel::Gradient);
        for leaf in 0..16 {
            let ups = (leaf as u32).count_ones() as i32;
            let density = 1.1f64.powi(ups) * 0.9f64.powi(4 - ups);
            assert!((g.gradient.values()[leaf] + density).abs() < 1e-14);
        }
    }

    #[test]
    fn abs_z_gradient_labels() {
        let t = t4();
        let r = parse_risk("grisk:f=abs_z:kappa=0.1", &t, None).unwrap();
        let g = r.subgradient_element(&t, &t.brownian_coord(4, 0).scale(-1.0)).unwrap();
        assert_eq!(g.label, GradientLabel::Gradient);
        let g = r.subgradient_element(&t, &t.constant(4, 1.0)).unwrap();
        assert_eq!(g.label, GradientLabel::ClarkeSelection { kinks: 15 });
    }

    #[test]
    fn alt_forms() {
        let t = t4();
        let xi = t.terminal_from_fn(|j| j as f64);
        let alt = RiskMeasure::variance().alt_gradient(&xi).unwrap();
        assert_eq!(alt.values()[0], 2.0 * 7.5);
        let r = parse_risk("grisk:f=abs_z:kappa=0.1", &t, None).unwrap();
        assert_eq!(r.alt_gradient(&xi).unwrap(), xi.scale(2.0));
        assert!(RiskMeasure::square(0.0).alt_gradient(&xi).is_none());
    }

    #[test]
    fn parser() {
        let t = t4();
        assert!(matches!(parse_risk("var", &t, None).unwrap().kind, RiskKind::Variance));
        let r = parse_risk("efun:u=square,b=0.5", &t, None).unwrap();
        assert!(matches!(r.kind, RiskKind::ExpectedFunction(Utility::Square { b }) if b == 0.5));
        let r = parse_risk("grisk:scale=2,f=linear:r=0.05,theta=0.2", &t, None).unwrap();
        assert_eq!(r.scale, 2.0);
        assert!(matches!(&r.kind, RiskKind::GRisk(g) if g.is_linear()));
        assert!(parse_risk("grisk:kappa=0.1", &t, None).is_err());
        assert!(parse_risk("efun:u=cube", &t, None).is_err());
        assert!(parse_risk("var:b=1", &t, None).is_err());
        assert!(parse_risk("entropy", &t, None).is_err());
        assert!(parse_risk("var:scale=-1", &t, None).is_err());
    }

    #[test]
    fn gradient_consistency_richardson() {
        let t = t4();
        let xi = t.terminal_from_fn(|j| (j as f64 * 0.37).sin());
        let eta = t.terminal_from_fn(|j| (j as f64 * 0.91).cos());
        for spec in ["var", "efun:u=square,b=0.3", "efun:u=exp,a=0.5", "grisk:f=smooth_tanh:a=0.5,b=0.5"] {
            let r = parse_risk(spec, &t, None).unwrap();
            let g = r.subgradient_element(&t, &xi).unwrap().gradient.dot(&eta);
            let d = |s: f64| (r.evaluate(&t, &xi.axpy(s, &eta)).unwrap() - r.evaluate(&t, &xi.axpy(-s, &eta)).unwrap()) / (2.0 * s);
            let rich = (4.0 * d(1e-4) - d(2e-4)) / 3.0;
            assert!((rich - g).abs() < 1e-8, "{spec}: {rich} vs {g}");
        }
    }

    proptest! {
        #[test]
        fn g_risk_axioms(a in proptest::collection::vec(-2.0f64..2.0, 16), b in proptest::collection::vec(-2.0f64..2.0, 16)) {
            let t = t4();
            let r = parse_risk("grisk:f=abs_z:kappa=0.1", &t, None).unwrap();
            let x = RandomVariable::new(4, a);
            let y = RandomVariable::new(4, b);
            let rx = r.evaluate(&t, &x).unwrap();
            let ry = r.evaluate(&t, &y).unwrap();
            prop_assert!(r.evaluate(&t, &x.add(&y)).unwrap() <= rx + ry + 1e-11);
            prop_assert!((r.evaluate(&t, &x.scale(2.0)).unwrap() - 2.0 * rx).abs() <= 1e-11);
            let hi = x.zip_map(&y, f64::max);
            prop_assert!(r.evaluate(&t, &hi).unwrap() <= rx + 1e-11);
        }

        #[test]
        fn scale_is_multiplicative(alpha in 0.1f64..5.0) {
            let t = t4();
            let xi = t.terminal_from_fn(|j| j as f64 * 0.1);
            let r = RiskMeasure::variance();
            let s = r.clone().scaled(alpha).unwrap();
            prop_assert!((s.evaluate(&t, &xi).unwrap() - alpha * r.evaluate(&t, &xi).unwrap()).abs() < 1e-12);
        }
    }
}
