//! Gradients of `xi -> E^g_{0,T}(xi)`: the variational (linearized) BSDE along
//! a base solution, its Riesz representer `q` on the leaves, and candidate
//! subgradients built from selections of the Clarke subdifferential of `g`.
//!
//! The linear scheme `y_k = E[y_{k+1}|F_k] + (phi_k y_k + psi_k . z_k) dt` has
//! the closed form `y_k = E[y_{k+1} (1 + psi_k . dW_{k+1}) | F_k] / (1 - phi_k dt)`,
//! so `y_0 = E[q eta]` with `q = prod_k (1 + psi_k . dW_{k+1}) / (1 - phi_k dt)`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::BsdeSolution;
use crate::error::{Error, Result};
use crate::filtration::{RandomVariable, RandomVector, ScenarioTree};
use crate::generators::{Generator, Subgradient};
use crate::par::map_indexed;
use crate::scalar::{ordered_sum, Scalar};

/// A measurable selection `(phi_k, psi_k)` of `∂°g` along a base solution.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalCoefficients<S> {
    /// `phi_k`, steps `0..N`.
    pub y_coeff: Vec<RandomVariable<S>>,
    /// `psi_k`, steps `0..N`.
    pub z_coeff: Vec<RandomVector<S>>,
}

impl<S: Scalar> VariationalCoefficients<S> {
    pub fn constant(tree: &ScenarioTree<S>, phi: S, psi: S) -> Self {
        Self::from_fn(tree, |_, _| (phi, vec![psi; tree.dims()]))
    }

    pub fn from_fn(tree: &ScenarioTree<S>, mut f: impl FnMut(usize, usize) -> Subgradient<S>) -> Self {
        let d = tree.dims();
        let mut y_coeff = Vec::with_capacity(tree.steps());
        let mut z_coeff = Vec::with_capacity(tree.steps());
        for k in 0..tree.steps() {
            let n = tree.nodes_at(k);
            let mut ys = Vec::with_capacity(n);
            let mut zs = Vec::with_capacity(n * d);
            for j in 0..n {
                let (a, b) = f(k, j);
                debug_assert_eq!(b.len(), d);
                ys.push(a);
                zs.extend(b);
            }
            y_coeff.push(RandomVariable::new(k, ys));
            z_coeff.push(RandomVector::new(k, d, zs));
        }
        Self { y_coeff, z_coeff }
    }

    /// `max_k |phi_k| + |psi_k|_1`, which the driver's Lipschitz constant bounds.
    pub fn bound(&self) -> S {
        let mut m = S::zero();
        for (phi, psi) in self.y_coeff.iter().zip(&self.z_coeff) {
            for j in 0..phi.len() {
                let l1 = ordered_sum(psi.at(j).iter().map(|v| v.abs()));
                m = m.max(phi.values()[j].abs() + l1);
            }
        }
        m
    }

    fn discount(&self, tree: &ScenarioTree<S>, step: usize, node: usize) -> Result<S> {
        let v = S::one() - self.y_coeff[step].values()[node] * tree.dt();
        if v > S::zero() {
            Ok(v)
        } else {
            Err(Error::DegenerateDiscount { step, node, value: v.to_f64_lossy() })
        }
    }
}

/// Leaf density `q` with `<q, eta> = y~_0(eta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Representer<S> {
    pub q: RandomVariable<S>,
}

impl<S: Scalar> Representer<S> {
    /// `<q, eta> = E[q eta]`.
    pub fn pair(&self, eta: &RandomVariable<S>) -> S {
        self.q.dot(eta)
    }
}

/// Coefficients `(g_y, g_z)` evaluated along `sol`.
pub fn linearize<S: Scalar>(
    tree: &ScenarioTree<S>,
    gen: &Generator<S>,
    sol: &BsdeSolution<S>,
) -> Result<VariationalCoefficients<S>> {
    if !gen.is_smooth() {
        return Err(Error::NotSmooth(gen.name()));
    }
    let mut missing = false;
    let coeffs = VariationalCoefficients::from_fn(tree, |k, j| {
        match gen.partials(k, j, sol.y.at(k).values()[j], sol.z.at(k).at(j)) {
            Some(p) => p,
            None => {
                missing = true;
                (S::zero(), vec![S::zero(); tree.dims()])
            }
        }
    });
    if missing {
        return Err(Error::NotSmooth(gen.name()));
    }
    Ok(coeffs)
}

/// Forward multiplicative recursion `Q_0 = 1`,
/// `Q_{k+1} = Q_k (1 + psi_k . dW_{k+1}) / (1 - phi_k dt)`, `q = Q_N`.
pub fn adjoint_representer<S: Scalar>(
    tree: &ScenarioTree<S>,
    coeffs: &VariationalCoefficients<S>,
) -> Result<Representer<S>> {
    let mut density = vec![S::one()];
    for k in 0..tree.steps() {
        let discounts = (0..tree.nodes_at(k))
            .map(|j| coeffs.discount(tree, k, j))
            .collect::<Result<Vec<_>>>()?;
        let psi = &coeffs.z_coeff[k];
        let next = map_indexed(tree.nodes_at(k + 1), |c| {
            let p = tree.parent(c);
            let inc = tree.increment(tree.branch_of(c));
            let tilt = S::one() + ordered_sum(psi.at(p).iter().zip(inc).map(|(&a, &b)| a * b));
            density[p] * tilt / discounts[p]
        });
        density = next;
    }
    Ok(Representer { q: RandomVariable::new(tree.steps(), density) })
}

/// Backward solve of the linear BSDE with coefficients `coeffs` and terminal `eta`.
/// Returns the whole `y~` process (slice `k` at index `k`).
pub fn solve_linear_bsde<S: Scalar>(
    tree: &ScenarioTree<S>,
    coeffs: &VariationalCoefficients<S>,
    eta: &RandomVariable<S>,
) -> Result<Vec<RandomVariable<S>>> {
    tree.check_terminal(eta)?;
    let mut out = vec![eta.clone()];
    let b = tree.branching();
    let dt = tree.dt();
    for k in (0..tree.steps()).rev() {
        let next = out.last().unwrap().values();
        let vals = (0..tree.nodes_at(k))
            .map(|j| {
                let kids = &next[j * b..(j + 1) * b];
                let e = tree.children_mean(kids);
                let z = tree.project_children(kids);
                let drift = ordered_sum(coeffs.z_coeff[k].at(j).iter().zip(&z).map(|(&p, &zz)| p * zz));
                Ok((e + drift * dt) / coeffs.discount(tree, k, j)?)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(RandomVariable::new(k, vals));
    }
    out.reverse();
    Ok(out)
}

/// `y~_0(eta)` of the linear BSDE.
pub fn linear_bsde_value<S: Scalar>(
    tree: &ScenarioTree<S>,
    coeffs: &VariationalCoefficients<S>,
    eta: &RandomVariable<S>,
) -> Result<S> {
    Ok(solve_linear_bsde(tree, coeffs, eta)?[0].values()[0])
}

/// Brute-force representer: one linear BSDE per leaf indicator, `q_i = y~_0(e_i) / p_leaf`.
/// Quadratic in the number of leaves; meant as an oracle on small trees.
pub fn representer_by_basis<S: Scalar>(
    tree: &ScenarioTree<S>,
    coeffs: &VariationalCoefficients<S>,
) -> Result<Representer<S>> {
    let p = tree.leaf_prob();
    let vals = map_indexed(tree.leaves(), |i| {
        linear_bsde_value(tree, coeffs, &tree.leaf_indicator(i)).map(|v| v / p)
    });
    let q = vals.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Representer { q: RandomVariable::new(tree.steps(), q) })
}

/// `max_i |<q, e_i> - y~_0(e_i)|` over the leaf basis.
pub fn duality_residual<S: Scalar>(
    tree: &ScenarioTree<S>,
    coeffs: &VariationalCoefficients<S>,
    rep: &Representer<S>,
) -> Result<S> {
    let mut worst = S::zero();
    for i in 0..tree.leaves() {
        let e = tree.leaf_indicator(i);
        worst = worst.max((rep.pair(&e) - linear_bsde_value(tree, coeffs, &e)?).abs());
    }
    Ok(worst)
}

/// Representer for a smooth driver along `sol`.
pub fn gradient_representer<S: Scalar>(
    tree: &ScenarioTree<S>,
    gen: &Generator<S>,
    sol: &BsdeSolution<S>,
) -> Result<Representer<S>> {
    adjoint_representer(tree, &linearize(tree, gen, sol)?)
}

/// One extreme-point choice at a node where `∂°g` is not a singleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KinkChoice {
    pub step: usize,
    pub node: usize,
    pub choice: usize,
}

/// A candidate Clarke subgradient of `E^g` built from one selection.
#[derive(Debug, Clone)]
pub struct SelectionCandidate<S> {
    pub choices: Vec<KinkChoice>,
    pub coefficients: VariationalCoefficients<S>,
    pub representer: Representer<S>,
}

/// Enumerates selections of extreme points of `∂°g` along `sol` (all of them when
/// there are at most `max_selections`, otherwise a seeded sample of that many)
/// and returns their representers. These are candidates: each lies in the
/// outer estimate of `∂°E^g(xi)`.
pub fn clarke_selection_representers<S: Scalar>(
    tree: &ScenarioTree<S>,
    gen: &Generator<S>,
    sol: &BsdeSolution<S>,
    max_selections: usize,
    seed: u64,
) -> Result<Vec<SelectionCandidate<S>>> {
    if !gen.has_clarke_oracle() {
        return Err(Error::NoClarkeOracle(gen.name()));
    }
    let mut sets: Vec<Vec<Vec<Subgradient<S>>>> = Vec::with_capacity(tree.steps());
    let mut kinks: Vec<(usize, usize, usize)> = Vec::new();
    for k in 0..tree.steps() {
        let mut row = Vec::with_capacity(tree.nodes_at(k));
        for j in 0..tree.nodes_at(k) {
            let pts = gen
                .clarke(k, j, sol.y.at(k).values()[j], sol.z.at(k).at(j))
                .ok_or_else(|| Error::NoClarkeOracle(gen.name()))?;
            if pts.is_empty() {
                return Err(Error::Empty("Clarke subdifferential"));
            }
            if pts.len() > 1 {
                kinks.push((k, j, pts.len()));
            }
            row.push(pts);
        }
        sets.push(row);
    }

    let total = kinks
        .iter()
        .try_fold(1usize, |acc, &(_, _, m)| acc.checked_mul(m))
        .unwrap_or(usize::MAX);
    let max_selections = max_selections.max(1);
    let picks: Vec<Vec<usize>> = if total <= max_selections {
        (0..total)
            .map(|mut idx| {
                kinks
                    .iter()
                    .rev()
                    .map(|&(_, _, m)| {
                        let c = idx % m;
                        idx /= m;
                        c
                    })
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect()
            })
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(max_selections);
        let mut attempts = 0;
        while out.len() < max_selections && attempts < 64 * max_selections {
            attempts += 1;
            let pick: Vec<usize> = kinks.iter().map(|&(_, _, m)| rng.gen_range(0..m)).collect();
            if seen.insert(pick.clone()) {
                out.push(pick);
            }
        }
        out
    };

    picks
        .into_iter()
        .map(|pick| {
            let mut chosen: Vec<Vec<usize>> = sets.iter().map(|row| vec![0; row.len()]).collect();
            let mut choices = Vec::with_capacity(kinks.len());
            for (&(k, j, _), &c) in kinks.iter().zip(&pick) {
                chosen[k][j] = c;
                choices.push(KinkChoice { step: k, node: j, choice: c });
            }
            let coefficients = VariationalCoefficients::from_fn(tree, |k, j| sets[k][j][chosen[k][j]].clone());
            let representer = adjoint_representer(tree, &coefficients)?;
            Ok(SelectionCandidate { choices, coefficients, representer })
        })
        .collect()
}
