//! Drivers `g(t, y, z)` of the wealth BSDE with Lipschitz metadata, optional
//! partial derivatives and optional Clarke-subdifferential oracles.
//!
//! Lipschitz constants are stated for `|dy| + |dz|_inf`, so that the bound on
//! the `z`-part of any subgradient is in the dual (l1) norm:
//! `|g_y| + sum_i |g_{z_i}| <= M`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filtration::ScenarioTree;
use crate::scalar::{ordered_sum, Scalar};

/// An extreme point `(g_y, g_z)` of a Clarke subdifferential.
pub type Subgradient<S> = (S, Vec<S>);

/// Values of `z` with magnitude at or below this are treated as sitting on a kink.
pub const KINK_TOL: f64 = 1e-12;

pub trait Driver<S: Scalar>: Send + Sync {
    /// Canonical mini-language form, e.g. `linear:r=0.05,theta=0.2`.
    fn name(&self) -> String;

    fn eval(&self, step: usize, node: usize, y: S, z: &[S]) -> S;

    fn lipschitz(&self) -> S;

    fn is_smooth(&self) -> bool {
        false
    }

    /// `E^g` is a linear functional (driver linear in `(y, z)` with no intercept).
    fn is_linear(&self) -> bool {
        false
    }

    /// `(g_y, g_z)` where the driver is differentiable.
    fn partials(&self, _step: usize, _node: usize, _y: S, _z: &[S]) -> Option<Subgradient<S>> {
        None
    }

    fn has_clarke_oracle(&self) -> bool {
        self.is_smooth()
    }

    /// Extreme points of `∂°g(t, y, z)`; `None` when no oracle is available.
    fn clarke(&self, step: usize, node: usize, y: S, z: &[S]) -> Option<Vec<Subgradient<S>>> {
        if self.is_smooth() {
            self.partials(step, node, y, z).map(|p| vec![p])
        } else {
            None
        }
    }
}

/// Shared, immutable driver handle.
#[derive(Clone)]
pub struct Generator<S> {
    inner: Arc<dyn Driver<S>>,
}

impl<S: Scalar> fmt::Debug for Generator<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("name", &self.inner.name())
            .field("lipschitz", &self.inner.lipschitz())
            .finish()
    }
}

impl<S: Scalar> Generator<S> {
    pub fn new(driver: impl Driver<S> + 'static) -> Self {
        Self { inner: Arc::new(driver) }
    }

    pub fn builtin(b: Builtin<S>, dims: usize) -> Self {
        Self::new(BuiltinDriver { kind: b, dims })
    }

    pub fn zero(dims: usize) -> Self {
        Self::builtin(Builtin::Zero, dims)
    }

    pub fn name(&self) -> String {
        self.inner.name()
    }

    pub fn eval(&self, step: usize, node: usize, y: S, z: &[S]) -> S {
        self.inner.eval(step, node, y, z)
    }

    pub fn lipschitz(&self) -> S {
        self.inner.lipschitz()
    }

    pub fn is_smooth(&self) -> bool {
        self.inner.is_smooth()
    }

    pub fn is_linear(&self) -> bool {
        self.inner.is_linear()
    }

    pub fn partials(&self, step: usize, node: usize, y: S, z: &[S]) -> Option<Subgradient<S>> {
        self.inner.partials(step, node, y, z)
    }

    pub fn clarke(&self, step: usize, node: usize, y: S, z: &[S]) -> Option<Vec<Subgradient<S>>> {
        self.inner.clarke(step, node, y, z)
    }

    pub fn has_clarke_oracle(&self) -> bool {
        self.inner.has_clarke_oracle()
    }
}

/// Step-indexed coefficient (`r(t)`, `theta(t)`), constant or one value per step.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficient<S> {
    Const(S),
    PerStep(Vec<S>),
}

impl<S: Scalar> Coefficient<S> {
    pub fn at(&self, step: usize) -> S {
        match self {
            Coefficient::Const(c) => *c,
            Coefficient::PerStep(v) => v[step.min(v.len() - 1)],
        }
    }

    pub fn max_abs(&self) -> S {
        match self {
            Coefficient::Const(c) => c.abs(),
            Coefficient::PerStep(v) => v.iter().fold(S::zero(), |m, x| m.max(x.abs())),
        }
    }

    fn describe(&self) -> String {
        match self {
            Coefficient::Const(c) => format!("{c}"),
            Coefficient::PerStep(v) => format!("[{} steps]", v.len()),
        }
    }
}

impl<S> From<S> for Coefficient<S> {
    fn from(c: S) -> Self {
        Coefficient::Const(c)
    }
}

/// The built-in driver catalogue.
#[derive(Debug, Clone, PartialEq)]
pub enum Builtin<S> {
    /// `g = 0`.
    Zero,
    /// `g = r(t) y + theta(t) sum_i z_i`.
    Linear { r: Coefficient<S>, theta: Coefficient<S> },
    /// `g = -r y`.
    Discount { r: S },
    /// `g = kappa sum_i |z_i|`.
    AbsZ { kappa: S },
    /// `g = max(t1 s, t2 s)` with `s = sum_i z_i`.
    MaxLinear { t1: S, t2: S },
    /// `g = a tanh(y) + b sum_i tanh(z_i)`.
    SmoothTanh { a: S, b: S },
}

#[derive(Debug, Clone)]
struct BuiltinDriver<S> {
    kind: Builtin<S>,
    dims: usize,
}

fn zsum<S: Scalar>(z: &[S]) -> S {
    ordered_sum(z.iter().copied())
}

fn sech2<S: Scalar>(x: S) -> S {
    let c = x.cosh();
    S::one() / (c * c)
}

impl<S: Scalar> Driver<S> for BuiltinDriver<S> {
    fn name(&self) -> String {
        match &self.kind {
            Builtin::Zero => "zero".into(),
            Builtin::Linear { r, theta } => {
                format!("linear:r={},theta={}", r.describe(), theta.describe())
            }
            Builtin::Discount { r } => format!("discount:r={r}"),
            Builtin::AbsZ { kappa } => format!("abs_z:kappa={kappa}"),
            Builtin::MaxLinear { t1, t2 } => format!("max_linear:t1={t1},t2={t2}"),
            Builtin::SmoothTanh { a, b } => format!("smooth_tanh:a={a},b={b}"),
        }
    }

    fn eval(&self, step: usize, _node: usize, y: S, z: &[S]) -> S {
        match &self.kind {
            Builtin::Zero => S::zero(),
            Builtin::Linear { r, theta } => r.at(step) * y + theta.at(step) * zsum(z),
            Builtin::Discount { r } => -*r * y,
            Builtin::AbsZ { kappa } => *kappa * ordered_sum(z.iter().map(|v| v.abs())),
            Builtin::MaxLinear { t1, t2 } => {
                let s = zsum(z);
                (*t1 * s).max(*t2 * s)
            }
            Builtin::SmoothTanh { a, b } => *a * y.tanh() + *b * ordered_sum(z.iter().map(|v| v.tanh())),
        }
    }

    fn lipschitz(&self) -> S {
        let d = S::from_usize(self.dims).unwrap();
        match &self.kind {
            Builtin::Zero => S::zero(),
            Builtin::Linear { r, theta } => r.max_abs() + d * theta.max_abs(),
            Builtin::Discount { r } => r.abs(),
            Builtin::AbsZ { kappa } => d * kappa.abs(),
            Builtin::MaxLinear { t1, t2 } => d * t1.abs().max(t2.abs()),
            Builtin::SmoothTanh { a, b } => a.abs() + d * b.abs(),
        }
    }

    fn is_smooth(&self) -> bool {
        matches!(
            self.kind,
            Builtin::Zero | Builtin::Linear { .. } | Builtin::Discount { .. } | Builtin::SmoothTanh { .. }
        )
    }

    fn is_linear(&self) -> bool {
        matches!(self.kind, Builtin::Zero | Builtin::Linear { .. } | Builtin::Discount { .. })
    }

    fn has_clarke_oracle(&self) -> bool {
        true
    }

    fn partials(&self, step: usize, _node: usize, y: S, z: &[S]) -> Option<Subgradient<S>> {
        let d = z.len();
        let tol = S::tol_floor(KINK_TOL);
        match &self.kind {
            Builtin::Zero => Some((S::zero(), vec![S::zero(); d])),
            Builtin::Linear { r, theta } => Some((r.at(step), vec![theta.at(step); d])),
            Builtin::Discount { r } => Some((-*r, vec![S::zero(); d])),
            Builtin::SmoothTanh { a, b } => {
                Some((*a * sech2(y), z.iter().map(|&v| *b * sech2(v)).collect()))
            }
            Builtin::AbsZ { kappa } => {
                if z.iter().any(|v| v.abs() <= tol) {
                    None
                } else {
                    Some((S::zero(), z.iter().map(|&v| *kappa * v.signum()).collect()))
                }
            }
            Builtin::MaxLinear { t1, t2 } => {
                let s = zsum(z);
                if t1 == t2 {
                    Some((S::zero(), vec![*t1; d]))
                } else if ((*t1 - *t2) * s).abs() <= tol {
                    None
                } else {
                    let t = if *t1 * s > *t2 * s { *t1 } else { *t2 };
                    Some((S::zero(), vec![t; d]))
                }
            }
        }
    }

    fn clarke(&self, step: usize, node: usize, y: S, z: &[S]) -> Option<Vec<Subgradient<S>>> {
        if let Some(p) = self.partials(step, node, y, z) {
            return Some(vec![p]);
        }
        let tol = S::tol_floor(KINK_TOL);
        match &self.kind {
            Builtin::AbsZ { kappa } => {
                // cube: each kinked coordinate independently takes ±kappa
                let choices: Vec<Vec<S>> = z
                    .iter()
                    .map(|&v| {
                        if v.abs() <= tol {
                            vec![-*kappa, *kappa]
                        } else {
                            vec![*kappa * v.signum()]
                        }
                    })
                    .collect();
                let mut out: Vec<Vec<S>> = vec![Vec::new()];
                for c in &choices {
                    out = out
                        .into_iter()
                        .flat_map(|prefix| {
                            c.iter().map(move |&x| {
                                let mut p = prefix.clone();
                                p.push(x);
                                p
                            })
                        })
                        .collect();
                }
                Some(out.into_iter().map(|g| (S::zero(), g)).collect())
            }
            Builtin::MaxLinear { t1, t2 } => {
                let d = z.len();
                Some(vec![(S::zero(), vec![*t1; d]), (S::zero(), vec![*t2; d])])
            }
            _ => None,
        }
    }
}

type EvalFn<S> = Box<dyn Fn(usize, usize, S, &[S]) -> S + Send + Sync>;
type PartialsFn<S> = Box<dyn Fn(usize, usize, S, &[S]) -> Subgradient<S> + Send + Sync>;

/// Closure-backed driver for user-defined generators.
pub struct FnDriver<S> {
    pub name: String,
    pub lipschitz: S,
    pub eval: EvalFn<S>,
    pub partials: Option<PartialsFn<S>>,
}

impl<S: Scalar> Driver<S> for FnDriver<S> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn eval(&self, step: usize, node: usize, y: S, z: &[S]) -> S {
        (self.eval)(step, node, y, z)
    }

    fn lipschitz(&self) -> S {
        self.lipschitz
    }

    fn is_smooth(&self) -> bool {
        self.partials.is_some()
    }

    fn partials(&self, step: usize, node: usize, y: S, z: &[S]) -> Option<Subgradient<S>> {
        self.partials.as_ref().map(|p| p(step, node, y, z))
    }
}

/// `g + n |phi|`, the penalized driver approximating the constrained supersolution.
pub(crate) struct PenalizedDriver<S> {
    pub base: Generator<S>,
    pub phi: Generator<S>,
    pub penalty: S,
}

impl<S: Scalar> Driver<S> for PenalizedDriver<S> {
    fn name(&self) -> String {
        format!("{} + {}*|{}|", self.base.name(), self.penalty, self.phi.name())
    }

    fn eval(&self, step: usize, node: usize, y: S, z: &[S]) -> S {
        self.base.eval(step, node, y, z) + self.penalty * self.phi.eval(step, node, y, z).abs()
    }

    fn lipschitz(&self) -> S {
        self.base.lipschitz() + self.penalty.abs() * self.phi.lipschitz()
    }
}

/// The constraint map `phi(t, y, z)`; `Gamma_t = {phi = 0}`.
#[derive(Clone)]
pub struct ConstraintFunction<S>(pub Generator<S>);

impl<S: Scalar> fmt::Debug for ConstraintFunction<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ConstraintFunction").field(&self.0).finish()
    }
}

impl<S: Scalar> ConstraintFunction<S> {
    pub fn new(g: Generator<S>) -> Self {
        Self(g)
    }

    pub fn generator(&self) -> &Generator<S> {
        &self.0
    }

    pub fn in_gamma(&self, step: usize, node: usize, y: S, z: &[S], tol: S) -> bool {
        self.0.eval(step, node, y, z).abs() <= tol
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub declared: f64,
    pub max_ratio: f64,
    pub samples: usize,
    pub passes: bool,
    /// Squared H² norm of `g(., 0, 0)`.
    pub h2_norm_sq_at_origin: f64,
}

fn sample_point<S: Scalar>(tree: &ScenarioTree<S>, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let step = rng.gen_range(0..tree.steps());
    let node = rng.gen_range(0..tree.nodes_at(step));
    (step, node)
}

fn sample_vec<S: Scalar>(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> Vec<S> {
    (0..d).map(|_| S::lit(rng.gen_range(-radius..radius))).collect()
}

/// Samples pairs and records the largest `|dg| / (|dy| + |dz|_inf)`.
pub fn check_lipschitz<S: Scalar>(
    gen: &Generator<S>,
    tree: &ScenarioTree<S>,
    samples: usize,
    seed: u64,
) -> LipschitzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = tree.dims();
    let mut max_ratio = S::zero();
    for i in 0..samples {
        let (step, node) = sample_point(tree, &mut rng);
        let y1 = S::lit(rng.gen_range(-3.0..3.0));
        let z1: Vec<S> = sample_vec(&mut rng, d, 3.0);
        // alternate far pairs with near pairs that probe local slopes
        let radius = if i % 2 == 0 { 3.0 } else { 1e-3 };
        let y2 = y1 + S::lit(rng.gen_range(-radius..radius));
        let dz: Vec<S> = sample_vec(&mut rng, d, radius);
        let z2: Vec<S> = z1.iter().zip(&dz).map(|(&a, &b)| a + b).collect();
        let dist = (y1 - y2).abs() + dz.iter().fold(S::zero(), |m, v| m.max(v.abs()));
        if dist > S::zero() {
            let ratio = (gen.eval(step, node, y1, &z1) - gen.eval(step, node, y2, &z2)).abs() / dist;
            max_ratio = max_ratio.max(ratio);
        }
    }
    let zero_z = vec![S::zero(); d];
    let mut h2 = S::zero();
    for k in 0..tree.steps() {
        let n = tree.nodes_at(k);
        let acc = ordered_sum((0..n).map(|j| {
            let g = gen.eval(k, j, S::zero(), &zero_z);
            g * g
        }));
        h2 = h2 + acc / S::from_usize(n).unwrap() * tree.dt();
    }
    let declared = gen.lipschitz();
    LipschitzReport {
        declared: declared.to_f64_lossy(),
        max_ratio: max_ratio.to_f64_lossy(),
        samples,
        passes: max_ratio <= declared * S::lit(1.0 + 1e-9) + S::epsilon(),
        h2_norm_sq_at_origin: h2.to_f64_lossy(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PartialsReport {
    pub max_err_y: f64,
    pub max_err_z: f64,
    pub samples: usize,
    pub passes: bool,
}

/// Compares declared partials with central finite differences.
/// Relative criterion: `|g_y - fd| <= 1e-6 (1 + |g_y|)`, same for each `g_z`.
pub fn check_partials(
    gen: &Generator<f64>,
    tree: &ScenarioTree<f64>,
    samples: usize,
    seed: u64,
) -> Result<PartialsReport> {
    if !gen.is_smooth() {
        return Err(Error::NotSmooth(gen.name()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = tree.dims();
    let h = 1e-5;
    let (mut ey, mut ez) = (0.0f64, 0.0f64);
    let mut passes = true;
    for _ in 0..samples {
        let (step, node) = sample_point(tree, &mut rng);
        let y: f64 = rng.gen_range(-3.0..3.0);
        let z: Vec<f64> = sample_vec(&mut rng, d, 3.0);
        let (gy, gz) = gen.partials(step, node, y, &z).ok_or_else(|| Error::NotSmooth(gen.name()))?;
        let fd_y = (gen.eval(step, node, y + h, &z) - gen.eval(step, node, y - h, &z)) / (2.0 * h);
        let err = (gy - fd_y).abs() / (1.0 + gy.abs());
        ey = ey.max(err);
        passes &= err <= 1e-6;
        for i in 0..d {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (gen.eval(step, node, y, &zp) - gen.eval(step, node, y, &zm)) / (2.0 * h);
            let err = (gz[i] - fd).abs() / (1.0 + gz[i].abs());
            ez = ez.max(err);
            passes &= err <= 1e-6;
        }
    }
    Ok(PartialsReport { max_err_y: ey, max_err_z: ez, samples, passes })
}

/// Parses the generator mini-language:
/// `zero`, `linear:r=0.05,theta=0.2`, `discount:r=0.05`, `abs_z:kappa=0.1`,
/// `max_linear:t1=0.1,t2=0.3`, `smooth_tanh:a=1,b=1`.
/// A coefficient of `linear` may be `@file.csv`, one row per step, resolved
/// relative to `base_dir`.
pub fn parse_generator<S: Scalar>(
    spec: &str,
    tree: &ScenarioTree<S>,
    base_dir: Option<&Path>,
) -> Result<Generator<S>> {
    let (name, params) = split_spec(spec)?;
    let allowed: &[&str] = match name {
        "zero" => &[],
        "linear" => &["r", "theta"],
        "discount" => &["r"],
        "abs_z" => &["kappa"],
        "max_linear" => &["t1", "t2"],
        "smooth_tanh" => &["a", "b"],
        _ => return Err(Error::UnknownSpec(spec.to_string())),
    };
    for (k, _) in &params {
        if !allowed.contains(&k.as_str()) {
            return Err(Error::BadParameter {
                name: k.clone(),
                reason: format!("not a parameter of `{name}`"),
            });
        }
    }
    let scalar = |key: &str| -> Result<S> {
        match params.iter().find(|(k, _)| k == key) {
            None => Ok(S::zero()),
            Some((_, v)) => parse_number(key, v),
        }
    };
    let coefficient = |key: &str| -> Result<Coefficient<S>> {
        match params.iter().find(|(k, _)| k == key) {
            None => Ok(Coefficient::Const(S::zero())),
            Some((_, v)) if v.starts_with('@') => {
                let path = match base_dir {
                    Some(dir) => dir.join(&v[1..]),
                    None => Path::new(&v[1..]).to_path_buf(),
                };
                let values = read_step_column::<S>(&path, key)?;
                if values.len() != tree.steps() {
                    return Err(Error::BadParameter {
                        name: key.to_string(),
                        reason: format!("{} rows, tree has {} steps", values.len(), tree.steps()),
                    });
                }
                Ok(Coefficient::PerStep(values))
            }
            Some((_, v)) => Ok(Coefficient::Const(parse_number(key, v)?)),
        }
    };
    let kind = match name {
        "zero" => Builtin::Zero,
        "linear" => Builtin::Linear { r: coefficient("r")?, theta: coefficient("theta")? },
        "discount" => Builtin::Discount { r: scalar("r")? },
        "abs_z" => {
            let kappa = scalar("kappa")?;
            if kappa < S::zero() {
                return Err(Error::BadParameter { name: "kappa".into(), reason: "must be >= 0".into() });
            }
            Builtin::AbsZ { kappa }
        }
        "max_linear" => Builtin::MaxLinear { t1: scalar("t1")?, t2: scalar("t2")? },
        "smooth_tanh" => Builtin::SmoothTanh { a: scalar("a")?, b: scalar("b")? },
        _ => unreachable!(),
    };
    Ok(Generator::builtin(kind, tree.dims()))
}

/// Splits `name:k=v,k=v`; parameters keep their order.
pub(crate) fn split_spec(spec: &str) -> Result<(&str, Vec<(String, String)>)> {
    let spec = spec.trim();
    let (name, rest) = match spec.split_once(':') {
        Some((n, r)) => (n.trim(), r),
        None => (spec, ""),
    };
    let mut params = Vec::new();
    for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::BadParameter {
            name: part.to_string(),
            reason: "expected key=value".into(),
        })?;
        params.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok((name, params))
}

pub(crate) fn parse_number<S: Scalar>(key: &str, v: &str) -> Result<S> {
    let x: f64 = v.parse().map_err(|_| Error::BadParameter {
        name: key.to_string(),
        reason: format!("not a number: `{v}`"),
    })?;
    if !x.is_finite() {
        return Err(Error::BadParameter { name: key.to_string(), reason: "must be finite".into() });
    }
    Ok(S::lit(x))
}

/// One value per step; a non-numeric first row is taken as a header, the last
/// field of each row is the value.
fn read_step_column<S: Scalar>(path: &Path, key: &str) -> Result<Vec<S>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = rec.get(rec.len().saturating_sub(1)).unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(x) => out.push(S::lit(x)),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::BadParameter {
                    name: key.to_string(),
                    reason: format!("row {i} of {} is not numeric", path.display()),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ScenarioTree<f64> {
        ScenarioTree::new(4, 1.0, 1).unwrap()
    }

    fn all_builtins(d: usize) -> Vec<Generator<f64>> {
        vec![
            Generator::zero(d),
            Generator::builtin(Builtin::Linear { r: 0.05.into(), theta: 0.2.into() }, d),
            Generator::builtin(Builtin::Discount { r: 0.05 }, d),
            Generator::builtin(Builtin::AbsZ { kappa: 0.1 }, d),
            Generator::builtin(Builtin::MaxLinear { t1: 0.1, t2: 0.3 }, d),
            Generator::builtin(Builtin::SmoothTanh { a: 1.0, b: 1.0 }, d),
        ]
    }

    #[test]
    fn zero_and_linear_metadata() {
        let t = tree();
        let g = parse_generator("zero", &t, None).unwrap();
        assert_eq!(g.lipschitz(), 0.0);
        assert_eq!(g.eval(1, 0, 3.0, &[2.0]), 0.0);
        let g = parse_generator("linear:r=0.05,theta=0.2", &t, None).unwrap();
        assert!((g.lipschitz() - 0.25).abs() < 1e-15);
        assert!((g.eval(0, 0, 2.0, &[1.0]) - 0.3).abs() < 1e-15);
        assert!(g.is_linear() && g.is_smooth());
    }

    #[test]
    fn abs_z_clarke_at_kink() {
        let t = tree();
        let g = parse_generator("abs_z:kappa=0.1", &t, None).unwrap();
        let mut pts = g.clarke(0, 0, 0.0, &[0.0]).unwrap();
        pts.sort_by(|a, b| a.1[0].partial_cmp(&b.1[0]).unwrap());
        assert_eq!(pts, vec![(0.0, vec![-0.1]), (0.0, vec![0.1])]);
        assert_eq!(g.clarke(0, 0, 0.0, &[2.0]).unwrap(), vec![(0.0, vec![0.1])]);
        assert!(!g.is_smooth());
    }

    #[test]
    fn abs_z_clarke_is_a_cube_in_higher_dims() {
        let t = ScenarioTree::<f64>::new(2, 1.0, 2).unwrap();
        let g = parse_generator("abs_z:kappa=0.1", &t, None).unwrap();
        assert_eq!(g.clarke(0, 0, 0.0, &[0.0, 0.0]).unwrap().len(), 4);
        assert_eq!(g.clarke(0, 0, 0.0, &[0.0, -1.0]).unwrap().len(), 2);
        assert!((g.lipschitz() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn max_linear_clarke_at_tie() {
        let t = tree();
        let g = parse_generator("max_linear:t1=0.1,t2=0.3", &t, None).unwrap();
        assert_eq!(g.clarke(0, 0, 0.0, &[0.0]).unwrap().len(), 2);
        assert_eq!(g.clarke(0, 0, 0.0, &[-1.0]).unwrap(), vec![(0.0, vec![0.1])]);
        assert_eq!(g.clarke(0, 0, 0.0, &[1.0]).unwrap(), vec![(0.0, vec![0.3])]);
    }

    #[test]
    fn smooth_clarke_is_singleton_partials() {
        let t = tree();
        let g = parse_generator("smooth_tanh:a=1,b=1", &t, None).unwrap();
        let (gy, gz) = g.partials(1, 0, 0.3, &[-0.4]).unwrap();
        assert_eq!(g.clarke(1, 0, 0.3, &[-0.4]).unwrap(), vec![(gy, gz)]);
        assert!((g.lipschitz() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn every_builtin_passes_lipschitz_check() {
        for d in 1..=2 {
            let t = ScenarioTree::<f64>::new(3, 1.0, d).unwrap();
            for g in all_builtins(d) {
                let rep = check_lipschitz(&g, &t, 10_000, 17);
                assert!(rep.passes, "{}: {:?}", g.name(), rep);
            }
        }
        let z = check_lipschitz(&Generator::zero(1), &tree(), 100, 1);
        assert_eq!(z.max_ratio, 0.0);
    }

    #[test]
    fn lipschitz_check_flags_understated_constant() {
        let t = tree();
        let g = Generator::new(FnDriver {
            name: "liar".into(),
            lipschitz: 0.5,
            eval: Box::new(|_, _, y: f64, _| 2.0 * y),
            partials: None,
        });
        assert!(!check_lipschitz(&g, &t, 100, 3).passes);
    }

    #[test]
    fn smooth_builtins_match_finite_differences() {
        for d in 1..=2 {
            let t = ScenarioTree::<f64>::new(3, 1.0, d).unwrap();
            for g in all_builtins(d).into_iter().filter(|g| g.is_smooth()) {
                let rep = check_partials(&g, &t, 1000, 5).unwrap();
                assert!(rep.passes, "{}: {:?}", g.name(), rep);
            }
        }
    }

    #[test]
    fn a2_norm_recorded() {
        let t = tree();
        let g = Generator::new(FnDriver {
            name: "const".into(),
            lipschitz: 0.0,
            eval: Box::new(|_, _, _, _| 2.0),
            partials: None,
        });
        let rep = check_lipschitz(&g, &t, 10, 0);
        assert!((rep.h2_norm_sq_at_origin - 4.0).abs() < 1e-14);
    }

    #[test]
    fn parse_errors() {
        let t = tree();
        assert!(matches!(parse_generator("quadratic", &t, None), Err(Error::UnknownSpec(_))));
        assert!(matches!(
            parse_generator("linear:r=x", &t, None),
            Err(Error::BadParameter { .. })
        ));
        assert!(matches!(
            parse_generator("linear:kappa=1", &t, None),
            Err(Error::BadParameter { .. })
        ));
    }

    #[test]
    fn step_varying_coefficient_from_file() {
        let dir = std::env::temp_dir().join(format!("bsdeopt-gen-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("r.csv"), "step,r\n0,0.01\n1,0.02\n2,0.03\n3,0.04\n").unwrap();
        let t = tree();
        let g = parse_generator("linear:r=@r.csv,theta=0.2", &t, Some(&dir)).unwrap();
        assert!((g.eval(2, 0, 1.0, &[0.0]) - 0.03).abs() < 1e-15);
        assert!((g.lipschitz() - 0.24).abs() < 1e-15);
        std::fs::write(dir.join("short.csv"), "0.01\n0.02\n").unwrap();
        assert!(parse_generator("linear:r=@short.csv", &t, Some(&dir)).is_err());
    }
}
