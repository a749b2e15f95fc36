//! Toolbox for locally Lipschitz functionals on the leaf space: grid estimates
//! of the generalized directional derivative, max-rule subdifferential hulls,
//! projections and distances for the convex sets the optimizer uses, exact
//! penalization, and normal-cone membership.
//!
//! All inner products are `E[a b]` under the uniform leaf measure.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filtration::RandomVariable;
use crate::scalar::Scalar;

/// Relative tolerance of [`normal_cone_member_check`].
pub const NORMAL_CONE_TOL: f64 = 1e-9;

/// Stop tolerance of [`project_intersection`].
pub const DYKSTRA_TOL: f64 = 1e-12;

/// Sampling grid for [`dir_derivative_estimate`]: `(radius, step)` pairs, ordered coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeGrid {
    pub points: Vec<(f64, f64)>,
    /// Random base points `xi'` per grid point, in addition to `xi` itself.
    pub samples: usize,
    pub seed: u64,
}

impl Default for DerivativeGrid {
    fn default() -> Self {
        Self { points: vec![(1e-4, 1e-4), (1e-6, 1e-6), (1e-8, 1e-8)], samples: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalDerivativeEstimate<S> {
    /// Sampled maximum at the finest grid point.
    pub value: S,
    /// Sampled maximum at every grid point, same order as `grid`.
    pub per_point: Vec<S>,
    pub grid: Vec<(f64, f64)>,
    /// False when the last refinement moved the value by more than 1e-3 relative.
    pub stable: bool,
}

/// Estimates `f°(xi; eta)` by the largest difference quotient
/// `[F(xi' + t eta) - F(xi')] / t` over base points `|xi' - xi| <= radius`.
/// The step is taken relative to `|eta|`, so the estimate is exactly
/// positively homogeneous in `eta`.
pub fn dir_derivative_estimate<S, F>(
    mut f: F,
    xi: &RandomVariable<S>,
    eta: &RandomVariable<S>,
    grid: &DerivativeGrid,
) -> Result<DirectionalDerivativeEstimate<S>>
where
    S: Scalar,
    F: FnMut(&RandomVariable<S>) -> Result<S>,
{
    if grid.points.is_empty() {
        return Err(Error::Empty("derivative grid"));
    }
    if xi.step() != eta.step() || xi.len() != eta.len() {
        return Err(Error::Measurability { expected: xi.step(), found: eta.step() });
    }
    let eta_norm = eta.norm();
    if eta_norm == S::zero() {
        return Ok(DirectionalDerivativeEstimate {
            value: S::zero(),
            per_point: vec![S::zero(); grid.points.len()],
            grid: grid.points.clone(),
            stable: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    let unif = Uniform::new_inclusive(-1.0f64, 1.0);
    let dirs: Vec<RandomVariable<S>> = (0..grid.samples)
        .map(|_| {
            let v = RandomVariable::new(xi.step(), (0..xi.len()).map(|_| S::lit(unif.sample(&mut rng))).collect());
            let n = v.norm();
            if n > S::zero() {
                v.scale(S::one() / n)
            } else {
                v
            }
        })
        .collect();

    let mut per_point = Vec::with_capacity(grid.points.len());
    for &(radius, step) in &grid.points {
        let t = S::lit(step) / eta_norm;
        let mut best = S::neg_infinity();
        for m in 0..=dirs.len() {
            let base = if m == 0 { xi.clone() } else { xi.axpy(S::lit(radius), &dirs[m - 1]) };
            let moved = base.axpy(t, eta);
            let q = (f(&moved)? - f(&base)?) / t;
            best = best.max(q);
        }
        per_point.push(best);
    }
    let value = *per_point.last().unwrap();
    let stable = match per_point.len() {
        1 => true,
        n => {
            let prev = per_point[n - 2];
            (value - prev).abs() <= S::lit(1e-3) * value.abs().max(prev.abs()).max(S::one())
        }
    };
    Ok(DirectionalDerivativeEstimate { value, per_point, grid: grid.points.clone(), stable })
}

/// Convex hull of the gradients of the active functions in a pointwise maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdifferentialHull<S> {
    pub active: Vec<usize>,
    pub extreme_points: Vec<RandomVariable<S>>,
}

/// Closest hull point to a target.
#[derive(Debug, Clone, PartialEq)]
pub struct HullPoint<S> {
    pub weights: Vec<S>,
    pub point: RandomVariable<S>,
    pub distance: S,
}

impl<S: Scalar> SubdifferentialHull<S> {
    pub fn is_singleton(&self) -> bool {
        self.extreme_points.len() == 1
    }

    /// Element with convex weights `w`.
    pub fn combination(&self, w: &[S]) -> RandomVariable<S> {
        let mut acc = self.extreme_points[0].scale(w[0]);
        for (p, &wi) in self.extreme_points.iter().zip(w).skip(1) {
            acc = acc.axpy(wi, p);
        }
        acc
    }

    /// Projection of `target` onto the hull.
    pub fn nearest_point(&self, target: &RandomVariable<S>) -> Result<HullPoint<S>> {
        let m = self.extreme_points.len();
        let cols: Vec<(RandomVariable<S>, Sign)> =
            self.extreme_points.iter().map(|p| (p.clone(), Sign::NonNegative)).collect();
        // min |sum w_i p_i - target|^2 with w >= 0, sum w = 1: append the
        // affine row with a large weight.
        let mask = vec![true; target.len()];
        let neg = target.scale(-S::one());
        let fit = conic_least_squares_with_sum(&neg, &cols, &mask, Some(S::one()))?;
        let point = self.combination(&fit.coefficients);
        let distance = point.sub(target).norm();
        debug_assert_eq!(fit.coefficients.len(), m);
        Ok(HullPoint { weights: fit.coefficients, point, distance })
    }

    /// Membership up to `tol` in L²(P) distance.
    pub fn contains(&self, target: &RandomVariable<S>, tol: S) -> Result<bool> {
        Ok(self.nearest_point(target)?.distance <= tol)
    }
}

/// `I(xi) = {i : f_i(xi) >= max - tol}` and the gradients of those functions.
pub fn max_rule_subdifferential<S: Scalar>(
    functions: &[(S, RandomVariable<S>)],
    tol: S,
) -> Result<SubdifferentialHull<S>> {
    let first = functions.first().ok_or(Error::Empty("function list"))?;
    for (_, g) in functions {
        if g.step() != first.1.step() || g.len() != first.1.len() {
            return Err(Error::Measurability { expected: first.1.step(), found: g.step() });
        }
    }
    let top = functions.iter().map(|(v, _)| *v).fold(S::neg_infinity(), S::max);
    let active: Vec<usize> = (0..functions.len()).filter(|&i| functions[i].0 >= top - tol).collect();
    let extreme_points = active.iter().map(|&i| functions[i].1.clone()).collect();
    Ok(SubdifferentialHull { active, extreme_points })
}

/// Sign constraint on a least-squares coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Free,
    NonNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicFit<S> {
    pub coefficients: Vec<S>,
    /// `base + sum_j c_j column_j` on every leaf (including leaves outside the mask).
    pub residual: RandomVariable<S>,
}

/// Minimizes `sum_{i in mask} (base_i + sum_j c_j col_j[i])^2` over coefficients
/// with the given sign constraints, by enumerating which nonnegative
/// coefficients sit at zero. Intended for a handful of columns.
pub fn conic_least_squares<S: Scalar>(
    base: &RandomVariable<S>,
    columns: &[(RandomVariable<S>, Sign)],
    mask: &[bool],
) -> Result<ConicFit<S>> {
    conic_least_squares_with_sum(base, columns, mask, None)
}

fn conic_least_squares_with_sum<S: Scalar>(
    base: &RandomVariable<S>,
    columns: &[(RandomVariable<S>, Sign)],
    mask: &[bool],
    sum_to: Option<S>,
) -> Result<ConicFit<S>> {
    let m = columns.len();
    if mask.len() != base.len() {
        return Err(Error::Length { expected: base.len(), found: mask.len() });
    }
    for (c, _) in columns {
        if c.len() != base.len() {
            return Err(Error::Length { expected: base.len(), found: c.len() });
        }
    }
    let nn: Vec<usize> = (0..m).filter(|&j| columns[j].1 == Sign::NonNegative).collect();
    if nn.len() > 16 {
        return Err(Error::Unsupported(format!("{} sign-constrained columns", nn.len())));
    }
    let idx: Vec<usize> = (0..base.len()).filter(|&i| mask[i]).collect();
    let col = |j: usize, i: usize| columns[j].0.values()[i];
    let b = base.values();

    let mut best: Option<(S, Vec<S>)> = None;
    for pattern in 0u32..(1 << nn.len()) {
        let zeroed: Vec<usize> = nn.iter().enumerate().filter(|(bit, _)| pattern >> bit & 1 == 1).map(|(_, &j)| j).collect();
        let act: Vec<usize> = (0..m).filter(|j| !zeroed.contains(j)).collect();
        if sum_to.is_some() && act.is_empty() {
            continue;
        }
        let k = act.len();
        let extra = usize::from(sum_to.is_some());
        let dim = k + extra;
        let mut a = vec![vec![S::zero(); dim]; dim];
        let mut rhs = vec![S::zero(); dim];
        for (r, &jr) in act.iter().enumerate() {
            for (c, &jc) in act.iter().enumerate() {
                a[r][c] = idx.iter().map(|&i| col(jr, i) * col(jc, i)).fold(S::zero(), |x, y| x + y);
            }
            rhs[r] = -idx.iter().map(|&i| col(jr, i) * b[i]).fold(S::zero(), |x, y| x + y);
        }
        let scale = (0..k).map(|r| a[r][r]).fold(S::zero(), S::max);
        let ridge = S::lit(1e-14) * (S::one() + scale);
        for (r, row) in a.iter_mut().enumerate().take(k) {
            row[r] = row[r] + ridge;
        }
        if let Some(total) = sum_to {
            for row in a.iter_mut().take(k) {
                row[k] = S::one();
            }
            a[k][..k].fill(S::one());
            rhs[k] = total;
        }
        let Some(sol) = solve_dense(a, rhs) else { continue };
        let mut coeffs = vec![S::zero(); m];
        for (r, &j) in act.iter().enumerate() {
            coeffs[j] = sol[r];
        }
        if nn.iter().any(|&j| coeffs[j] < S::zero()) {
            continue;
        }
        let obj = idx
            .iter()
            .map(|&i| {
                let r = b[i] + (0..m).map(|j| coeffs[j] * col(j, i)).fold(S::zero(), |x, y| x + y);
                r * r
            })
            .fold(S::zero(), |x, y| x + y);
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, coeffs));
        }
    }
    let (_, coefficients) = best.ok_or(Error::Empty("feasible least-squares pattern"))?;
    let mut residual = base.clone();
    for ((c, _), &w) in columns.iter().zip(&coefficients) {
        residual = residual.axpy(w, c);
    }
    Ok(ConicFit { coefficients, residual })
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense<S: Scalar>(mut a: Vec<Vec<S>>, mut b: Vec<S>) -> Option<Vec<S>> {
    let n = b.len();
    let scale = a.iter().flatten().map(|v| v.abs()).fold(S::zero(), S::max).max(S::min_positive_value());
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())?;
        if a[p][c].abs() <= S::lit(1e-15) * scale {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        let (top, bottom) = a.split_at_mut(c + 1);
        let pivot = &top[c];
        for (i, row) in bottom.iter_mut().enumerate() {
            let f = row[c] / pivot[c];
            for (x, &p) in row[c..].iter_mut().zip(&pivot[c..]) {
                *x = *x - f * p;
            }
            b[c + 1 + i] = b[c + 1 + i] - f * b[c];
        }
    }
    let mut x = vec![S::zero(); n];
    for r in (0..n).rev() {
        let s = (r + 1..n).map(|c| a[r][c] * x[c]).fold(S::zero(), |u, v| u + v);
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Exact L²(P) distance to the budget halfspace `{E[q xi] <= x}`.
pub fn distance_to_halfspace_budget<S: Scalar>(xi: &RandomVariable<S>, q: &RandomVariable<S>, x: S) -> Result<S> {
    let n = q.norm();
    if n == S::zero() {
        return Err(Error::ZeroVector("budget representer"));
    }
    Ok((q.dot(xi) - x).max(S::zero()) / n)
}

/// Closed convex sets with closed-form projections.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet<S> {
    NonNegative,
    MeanEquals(S),
    MeanAtLeast(S),
    /// `{xi >= 0, E[xi] = c}`.
    NonNegMeanEquals(S),
    /// `{xi >= 0, E[xi] >= c}`.
    NonNegMeanAtLeast(S),
    /// `{E[normal xi] <= bound}`.
    HalfSpace { normal: RandomVariable<S>, bound: S },
}

impl<S: Scalar> ConvexSet<S> {
    pub fn project(&self, v: &RandomVariable<S>) -> Result<RandomVariable<S>> {
        match self {
            ConvexSet::NonNegative => Ok(v.map(|x| x.max(S::zero()))),
            ConvexSet::MeanEquals(c) => {
                let shift = *c - v.mean();
                Ok(v.map(|x| x + shift))
            }
            ConvexSet::MeanAtLeast(c) => {
                let shift = (*c - v.mean()).max(S::zero());
                Ok(v.map(|x| x + shift))
            }
            ConvexSet::NonNegMeanEquals(c) => project_capped_simplex(v, *c),
            ConvexSet::NonNegMeanAtLeast(c) => {
                let p = v.map(|x| x.max(S::zero()));
                if p.mean() >= *c {
                    Ok(p)
                } else {
                    project_capped_simplex(v, *c)
                }
            }
            ConvexSet::HalfSpace { normal, bound } => {
                let nn = normal.dot(normal);
                if nn == S::zero() {
                    return Err(Error::ZeroVector("halfspace normal"));
                }
                let excess = (normal.dot(v) - *bound).max(S::zero());
                Ok(v.axpy(-excess / nn, normal))
            }
        }
    }

    pub fn distance(&self, v: &RandomVariable<S>) -> Result<S> {
        Ok(self.project(v)?.sub(v).norm())
    }
}

/// Projection onto `{xi >= 0, E[xi] = c}` by sorting.
fn project_capped_simplex<S: Scalar>(v: &RandomVariable<S>, c: S) -> Result<RandomVariable<S>> {
    if c < S::zero() {
        return Err(Error::BadParameter { name: "mean".into(), reason: "negative mean with nonnegativity is empty".into() });
    }
    let n = v.len();
    let target = c * S::from_usize(n).unwrap();
    let mut u: Vec<S> = v.values().to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = S::zero();
    let mut tau = u[0] - target;
    for (k, &uk) in u.iter().enumerate() {
        acc = acc + uk;
        let t = (acc - target) / S::from_usize(k + 1).unwrap();
        if uk > t {
            tau = t;
        } else {
            break;
        }
    }
    Ok(v.map(|x| (x - tau).max(S::zero())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<S> {
    pub point: RandomVariable<S>,
    pub iterations: usize,
    pub converged: bool,
}

/// Dykstra's alternating projections onto the intersection of `sets`.
/// Stops when a full sweep moves the iterate by at most `DYKSTRA_TOL (1 + |x|)`.
pub fn project_intersection<S: Scalar>(
    sets: &[ConvexSet<S>],
    v: &RandomVariable<S>,
    max_iter: usize,
) -> Result<Projection<S>> {
    match sets.len() {
        0 => return Ok(Projection { point: v.clone(), iterations: 0, converged: true }),
        1 => return Ok(Projection { point: sets[0].project(v)?, iterations: 1, converged: true }),
        _ => {}
    }
    let zero = v.map(|_| S::zero());
    let mut x = v.clone();
    let mut incr = vec![zero; sets.len()];
    for it in 1..=max_iter {
        let start = x.clone();
        for (set, p) in sets.iter().zip(incr.iter_mut()) {
            let y = x.add(p);
            let nx = set.project(&y)?;
            *p = y.sub(&nx);
            x = nx;
        }
        if x.sub(&start).norm() <= S::lit(DYKSTRA_TOL) * (S::one() + x.norm()) {
            return Ok(Projection { point: x, iterations: it, converged: true });
        }
    }
    Ok(Projection { point: x, iterations: max_iter, converged: false })
}

/// `prox_{w d_C}(v)`: move toward `P_C(v)` by at most `w`.
pub fn prox_distance<S: Scalar>(set: &ConvexSet<S>, v: &RandomVariable<S>, weight: S) -> Result<RandomVariable<S>> {
    let p = set.project(v)?;
    let d = p.sub(v).norm();
    if d <= weight {
        Ok(p)
    } else {
        Ok(v.axpy(weight / d, &p.sub(v)))
    }
}

type Functional<'a, S> = Box<dyn Fn(&RandomVariable<S>) -> Result<S> + 'a>;

/// `xi -> F(xi) + K dist(xi)`.
pub struct PenalizedFunctional<'a, S> {
    objective: Functional<'a, S>,
    distance: Functional<'a, S>,
    penalty: S,
    objective_lipschitz: Option<S>,
}

impl<'a, S: Scalar> PenalizedFunctional<'a, S> {
    pub fn eval(&self, xi: &RandomVariable<S>) -> Result<S> {
        let f = (self.objective)(xi)?;
        if self.penalty == S::zero() {
            return Ok(f);
        }
        Ok(f + self.penalty * (self.distance)(xi)?)
    }

    pub fn objective(&self, xi: &RandomVariable<S>) -> Result<S> {
        (self.objective)(xi)
    }

    pub fn distance(&self, xi: &RandomVariable<S>) -> Result<S> {
        (self.distance)(xi)
    }

    pub fn penalty(&self) -> S {
        self.penalty
    }

    pub fn with_lipschitz_estimate(mut self, l: S) -> Self {
        self.objective_lipschitz = Some(l);
        self
    }

    pub fn lipschitz_estimate(&self) -> Option<S> {
        self.objective_lipschitz
    }

    /// `Some(K > L_F)` once a Lipschitz estimate is recorded.
    pub fn penalty_dominates(&self) -> Option<bool> {
        self.objective_lipschitz.map(|l| self.penalty > l)
    }
}

impl<S: std::fmt::Debug> std::fmt::Debug for PenalizedFunctional<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PenalizedFunctional")
            .field("penalty", &self.penalty)
            .field("objective_lipschitz", &self.objective_lipschitz)
            .finish_non_exhaustive()
    }
}

pub fn exact_penalty<'a, S: Scalar>(
    objective: impl Fn(&RandomVariable<S>) -> Result<S> + 'a,
    distance: impl Fn(&RandomVariable<S>) -> Result<S> + 'a,
    penalty: S,
) -> Result<PenalizedFunctional<'a, S>> {
    if penalty.is_nan() || penalty < S::zero() || !penalty.is_finite() {
        return Err(Error::BadParameter { name: "penalty".into(), reason: format!("must be finite and >= 0, got {penalty}") });
    }
    Ok(PenalizedFunctional { objective: Box::new(objective), distance: Box::new(distance), penalty, objective_lipschitz: None })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalConeCheck<S> {
    pub member: bool,
    pub lambda: S,
    /// `|zeta - lambda h| / |zeta|` (absolute when `zeta = 0`).
    pub relative_residual: S,
}

/// Is `zeta = lambda h` for some `lambda >= 0`?
pub fn normal_cone_member_check<S: Scalar>(zeta: &RandomVariable<S>, h: &RandomVariable<S>) -> Result<NormalConeCheck<S>> {
    if zeta.len() != h.len() {
        return Err(Error::Length { expected: h.len(), found: zeta.len() });
    }
    let hh = h.dot(h);
    if hh == S::zero() {
        return Err(Error::ZeroVector("constraint gradient"));
    }
    let lambda = zeta.dot(h) / hh;
    let res = zeta.axpy(-lambda, h).norm();
    let zn = zeta.norm();
    let relative_residual = if zn > S::zero() { res / zn } else { res };
    let member = lambda >= S::zero() && relative_residual <= S::tol_floor(NORMAL_CONE_TOL);
    Ok(NormalConeCheck { member, lambda, relative_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::gradient_representer;
    use crate::bsde::{g_expectation, solve_bsde};
    use crate::filtration::ScenarioTree;
    use crate::generators::parse_generator;
    use proptest::prelude::*;

    fn rv(v: &[f64]) -> RandomVariable<f64> {
        RandomVariable::new(0, v.to_vec())
    }

    #[test]
    fn linear_functional_estimate_is_exact() {
        let q = rv(&[1.0, 2.0, 0.5, 3.0]);
        let xi = rv(&[0.1, 0.2, 0.3, 0.4]);
        let eta = rv(&[1.0, -1.0, 2.0, 0.0]);
        let est = dir_derivative_estimate(|v| Ok(q.dot(v)), &xi, &eta, &DerivativeGrid::default()).unwrap();
        assert!((est.value - q.dot(&eta)).abs() < 1e-7);
        assert!(est.stable);
    }

    #[test]
    fn square_estimate() {
        let xi = rv(&[0.1, 0.2, -0.3, 0.4]);
        let eta = rv(&[1.0, -1.0, 2.0, 0.5]);
        let est = dir_derivative_estimate(|v| Ok(v.dot(v)), &xi, &eta, &DerivativeGrid::default()).unwrap();
        assert!((est.value - 2.0 * xi.dot(&eta)).abs() < 1e-6);
    }

    #[test]
    fn smooth_g_expectation_estimate_matches_representer() {
        let t = ScenarioTree::<f64>::new(4, 1.0, 1).unwrap();
        let g = parse_generator("smooth_tanh:a=0.5,b=0.8", &t, None).unwrap();
        let xi = t.terminal_from_fn(|j| (j as f64 * 0.4).sin());
        let eta = t.terminal_from_fn(|j| (j as f64 * 1.3).cos());
        let sol = solve_bsde(&t, &g, &xi).unwrap();
        let q = gradient_representer(&t, &g, &sol).unwrap();
        let est = dir_derivative_estimate(|v| g_expectation(&t, &g, v), &xi, &eta, &DerivativeGrid::default()).unwrap();
        assert!((est.value - q.pair(&eta)).abs() < 1e-4);
    }

    #[test]
    fn zero_direction() {
        let xi = rv(&[1.0, 2.0]);
        let est = dir_derivative_estimate(|v| Ok(v.norm()), &xi, &rv(&[0.0, 0.0]), &DerivativeGrid::default()).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn empty_grid_rejected() {
        let xi = rv(&[1.0]);
        let grid = DerivativeGrid { points: vec![], ..Default::default() };
        assert!(dir_derivative_estimate(|v| Ok(v.mean()), &xi, &xi, &grid).is_err());
    }

    #[test]
    fn kink_estimate_is_the_max() {
        // F = E|xi| at 0: f°(0; eta) = E|eta|
        let xi = rv(&[0.0, 0.0, 0.0]);
        let eta = rv(&[1.0, -2.0, 0.5]);
        let est = dir_derivative_estimate(|v| Ok(v.map(f64::abs).mean()), &xi, &eta, &DerivativeGrid::default()).unwrap();
        assert!((est.value - eta.map(f64::abs).mean()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn estimate_is_homogeneous(vals in proptest::collection::vec(-2.0f64..2.0, 4), e in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let xi = rv(&vals);
            let eta = rv(&e);
            prop_assume!(eta.norm() > 1e-3);
            let f = |v: &RandomVariable<f64>| Ok(v.map(|x| x.abs() + 0.3 * x * x).mean());
            let g = DerivativeGrid::default();
            let a = dir_derivative_estimate(f, &xi, &eta, &g).unwrap().value;
            let b = dir_derivative_estimate(f, &xi, &eta.scale(2.0), &g).unwrap().value;
            prop_assert!((b - 2.0 * a).abs() <= 1e-9 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn max_rule_hulls() {
        let one = max_rule_subdifferential(&[(1.0, rv(&[2.0]))], 1e-12).unwrap();
        assert!(one.is_singleton());

        let abs = max_rule_subdifferential(&[(0.0, rv(&[1.0])), (0.0, rv(&[-1.0]))], 1e-12).unwrap();
        assert_eq!(abs.active, vec![0, 1]);
        for x in [-1.0, -0.3, 0.0, 0.99, 1.0] {
            assert!(abs.contains(&rv(&[x]), 1e-12).unwrap());
        }
        assert!(!abs.contains(&rv(&[1.01]), 1e-6).unwrap());
        let np = abs.nearest_point(&rv(&[3.0])).unwrap();
        assert!((np.point.values()[0] - 1.0).abs() < 1e-12);

        let off = max_rule_subdifferential(&[(0.5, rv(&[1.0])), (0.0, rv(&[-1.0]))], 1e-12).unwrap();
        assert_eq!(off.active, vec![0]);
        assert!(max_rule_subdifferential::<f64>(&[], 1e-12).is_err());
    }

    #[test]
    fn tie_hull_is_the_segment() {
        let q = rv(&[0.8, 1.0, 1.2, 1.0]);
        let minus_one = rv(&[-1.0; 4]);
        let hull = max_rule_subdifferential(&[(0.0, q.clone()), (0.0, minus_one.clone())], 1e-9).unwrap();
        for a in [0.0, 0.25, 0.5, 1.0] {
            let el = q.scale(1.0 - a).axpy(a, &minus_one);
            let np = hull.nearest_point(&el).unwrap();
            assert!(np.distance < 1e-10);
            assert!((np.weights[1] - a).abs() < 1e-8);
        }
    }

    #[test]
    fn conic_fit_respects_signs() {
        let base = rv(&[1.0, 1.0]);
        let col = rv(&[1.0, 1.0]);
        let fit = conic_least_squares(&base, &[(col.clone(), Sign::NonNegative)], &[true, true]).unwrap();
        assert_eq!(fit.coefficients, vec![0.0]);
        let fit = conic_least_squares(&base, &[(col, Sign::Free)], &[true, true]).unwrap();
        assert!((fit.coefficients[0] + 1.0).abs() < 1e-12);
        assert!(fit.residual.max_abs() < 1e-12);
    }

    #[test]
    fn halfspace_distance() {
        let q = rv(&[1.0, 1.0]);
        assert_eq!(distance_to_halfspace_budget(&rv(&[0.5, 0.5]), &q, 1.0).unwrap(), 0.0);
        assert!((distance_to_halfspace_budget(&rv(&[3.0, 3.0]), &q, 2.0).unwrap() - 1.0).abs() < 1e-15);
        let q2 = rv(&[1.0, 3.0]);
        let xi = rv(&[1.0, 1.0]);
        let delta = 0.25;
        let d = distance_to_halfspace_budget(&xi, &q2, q2.dot(&xi) - delta).unwrap();
        assert!((d - delta / q2.norm()).abs() < 1e-15);
        assert!(distance_to_halfspace_budget(&xi, &rv(&[0.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn projections() {
        let v = rv(&[2.0, -1.0, 0.5, 0.1]);
        let p = ConvexSet::NonNegMeanEquals(0.5).project(&v).unwrap();
        assert!((p.mean() - 0.5).abs() < 1e-15);
        assert!(p.values().iter().all(|&x| x >= 0.0));
        let d = project_intersection(&[ConvexSet::NonNegative, ConvexSet::MeanEquals(0.5)], &v, 100_000).unwrap();
        assert!(d.converged);
        assert!(d.point.sub(&p).max_abs() < 1e-9);

        let z = ConvexSet::NonNegMeanEquals(0.0).project(&v).unwrap();
        assert!(z.max_abs() == 0.0);

        let ge = ConvexSet::NonNegMeanAtLeast(0.1).project(&v).unwrap();
        assert_eq!(ge, v.map(|x| x.max(0.0)));

        let hs = ConvexSet::HalfSpace { normal: rv(&[1.0, 2.0, 0.0, 1.0]), bound: 0.0 };
        let ph = hs.project(&v).unwrap();
        assert!(rv(&[1.0, 2.0, 0.0, 1.0]).dot(&ph).abs() < 1e-15);
        assert!(ConvexSet::NonNegMeanEquals(-1.0).project(&v).is_err());
    }

    proptest! {
        #[test]
        fn closed_form_projection_is_optimal(vals in proptest::collection::vec(-3.0f64..3.0, 8), c in 0.0f64..2.0, w in proptest::collection::vec(0.0f64..1.0, 8)) {
            let v = rv(&vals);
            let p = ConvexSet::NonNegMeanEquals(c).project(&v).unwrap();
            // any other feasible point is no closer
            let other = rv(&w);
            let m = other.mean();
            prop_assume!(m > 1e-6);
            let other = other.scale(c / m);
            prop_assert!(p.sub(&v).norm() <= other.sub(&v).norm() + 1e-12);
        }
    }

    #[test]
    fn prox_moves_by_at_most_weight() {
        let hs = ConvexSet::HalfSpace { normal: rv(&[1.0, 1.0]), bound: 0.0 };
        let v = rv(&[2.0, 2.0]);
        let p = prox_distance(&hs, &v, 0.5).unwrap();
        assert!((p.sub(&v).norm() - 0.5).abs() < 1e-15);
        let p = prox_distance(&hs, &v, 5.0).unwrap();
        assert!(p.max_abs() < 1e-15);
    }

    #[test]
    fn penalty_wrapper() {
        let f = |v: &RandomVariable<f64>| Ok(v.dot(v));
        let pen = exact_penalty(f, |_| Ok(0.0), 3.0).unwrap();
        let xi = rv(&[1.0, 2.0]);
        assert_eq!(pen.eval(&xi).unwrap(), 2.5);
        let zero = exact_penalty(f, |_| Ok(10.0), 0.0).unwrap();
        assert_eq!(zero.eval(&xi).unwrap(), 2.5);
        let p = exact_penalty(f, |_| Ok(1.0), 2.0).unwrap().with_lipschitz_estimate(1.5);
        assert_eq!(p.eval(&xi).unwrap(), 4.5);
        assert_eq!(p.penalty_dominates(), Some(true));
        assert!(exact_penalty(f, |_| Ok(0.0), -1.0).is_err());
    }

    #[test]
    fn normal_cone_examples() {
        let q = rv(&[1.0, 2.0, 0.5, 1.5]);
        let c = normal_cone_member_check(&q.scale(2.0), &q).unwrap();
        assert!(c.member);
        assert!((c.lambda - 2.0).abs() < 1e-15);
        assert!(!normal_cone_member_check(&q.scale(-1.0), &q).unwrap().member);
        let mut orth = rv(&[1.0, -1.0, 1.0, -1.0]);
        orth = orth.axpy(-orth.dot(&q) / q.dot(&q), &q);
        assert!(!normal_cone_member_check(&q.axpy(1e-3, &orth), &q).unwrap().member);
        assert!(normal_cone_member_check(&q, &rv(&[0.0; 4])).is_err());
    }

    #[test]
    fn fermat_residual_at_smooth_minimizer() {
        // F(xi) = E[(xi - a)^2] + (E xi)^2, gradient 2(xi - a) + 2 E[xi]
        let a = rv(&[1.0, -0.5, 2.0, 0.25]);
        let grad = |x: &RandomVariable<f64>| x.sub(&a).scale(2.0).map(|v| v + 2.0 * x.mean());
        let mut x = rv(&[0.0; 4]);
        for _ in 0..200 {
            x = x.axpy(-0.25, &grad(&x));
        }
        assert!(grad(&x).norm() <= 1e-8);
    }
}
