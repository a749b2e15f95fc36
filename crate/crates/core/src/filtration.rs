//! Finite probability space: a non-recombining path tree with `2^d` equally
//! likely children per node and increments `±sqrt(dt)` per coordinate.
//!
//! Nodes at step `k` are indexed `0..2^(d*k)`; the children of node `j` are
//! `j * 2^d + b` for branch `b`. Branch `b` moves coordinate `i` up when bit
//! `d - 1 - i` of `b` is set, so branch `0` is all-down and the last branch
//! is all-up (lexicographic, down first).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::scalar::{ordered_sum, Scalar};

pub const MAX_DIMS: usize = 3;
pub const MAX_LEVELS: usize = 24;
pub const ORDERING: &str = "lexicographic-down-first";

#[derive(Debug, Clone)]
pub struct ScenarioTree<S> {
    steps: usize,
    dims: usize,
    horizon: S,
    dt: S,
    sqrt_dt: S,
    branching: usize,
    /// `branching * dims` increments, branch-major.
    increments: Vec<S>,
}

impl<S: Scalar> ScenarioTree<S> {
    pub fn new(steps: usize, horizon: S, dims: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::TreeShape("steps must be >= 1".into()));
        }
        if horizon.is_nan() || horizon <= S::zero() || !horizon.is_finite() {
            return Err(Error::TreeShape(format!("horizon must be positive, got {horizon}")));
        }
        if dims == 0 || dims > MAX_DIMS {
            return Err(Error::TreeShape(format!("dims must be in 1..={MAX_DIMS}, got {dims}")));
        }
        if steps * dims > MAX_LEVELS {
            return Err(Error::TreeShape(format!(
                "steps*dims = {} exceeds the size guard {MAX_LEVELS}",
                steps * dims
            )));
        }
        let dt = horizon / S::from_usize(steps).unwrap();
        let sqrt_dt = dt.sqrt();
        let branching = 1usize << dims;
        let mut increments = Vec::with_capacity(branching * dims);
        for b in 0..branching {
            for i in 0..dims {
                let up = (b >> (dims - 1 - i)) & 1 == 1;
                increments.push(if up { sqrt_dt } else { -sqrt_dt });
            }
        }
        Ok(Self { steps, dims, horizon, dt, sqrt_dt, branching, increments })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    pub fn sqrt_dt(&self) -> S {
        self.sqrt_dt
    }

    /// Children per node, `2^d`.
    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn time(&self, step: usize) -> S {
        self.dt * S::from_usize(step).unwrap()
    }

    pub fn nodes_at(&self, step: usize) -> usize {
        1usize << (self.dims * step)
    }

    pub fn leaves(&self) -> usize {
        self.nodes_at(self.steps)
    }

    /// Probability of a single node at `step`; a power of two, so exact.
    pub fn node_prob(&self, step: usize) -> S {
        S::lit(2.0).powi(-((self.dims * step) as i32))
    }

    pub fn leaf_prob(&self) -> S {
        self.node_prob(self.steps)
    }

    /// Brownian increment (length `d`) of branch `b`.
    pub fn increment(&self, branch: usize) -> &[S] {
        &self.increments[branch * self.dims..(branch + 1) * self.dims]
    }

    pub fn child(&self, node: usize, branch: usize) -> usize {
        node * self.branching + branch
    }

    pub fn parent(&self, node: usize) -> usize {
        node / self.branching
    }

    pub fn branch_of(&self, node: usize) -> usize {
        node % self.branching
    }

    /// Branch choices from the root down to `node` at `step`.
    pub fn path(&self, step: usize, node: usize) -> Vec<usize> {
        (1..=step)
            .map(|m| (node >> (self.dims * (step - m))) & (self.branching - 1))
            .collect()
    }

    /// The Brownian motion `W` sampled at `step`.
    pub fn brownian(&self, step: usize) -> RandomVector<S> {
        let d = self.dims;
        let mut values = vec![S::zero(); d];
        for k in 0..step {
            let n = self.nodes_at(k + 1);
            let mut next = Vec::with_capacity(n * d);
            for child in 0..n {
                let parent = self.parent(child);
                let inc = self.increment(self.branch_of(child));
                for i in 0..d {
                    next.push(values[parent * d + i] + inc[i]);
                }
            }
            values = next;
        }
        RandomVector { step, dims: d, values }
    }

    /// Coordinate `i` of `W` at `step` as a scalar random variable.
    pub fn brownian_coord(&self, step: usize, coord: usize) -> RandomVariable<S> {
        let w = self.brownian(step);
        RandomVariable {
            step,
            values: (0..w.nodes()).map(|j| w.at(j)[coord]).collect(),
        }
    }

    fn check_step(&self, rv: &RandomVariable<S>) -> Result<()> {
        let expected = self.nodes_at(rv.step);
        if rv.step > self.steps {
            return Err(Error::Measurability { expected: self.steps, found: rv.step });
        }
        if rv.values.len() != expected {
            return Err(Error::Length { expected, found: rv.values.len() });
        }
        Ok(())
    }

    /// `E[rv | F_{k}]` for `rv` measurable at step `k + 1`.
    pub fn conditional_expectation(&self, rv: &RandomVariable<S>) -> Result<RandomVariable<S>> {
        self.check_step(rv)?;
        if rv.step == 0 {
            return Err(Error::Measurability { expected: 1, found: 0 });
        }
        let step = rv.step - 1;
        let bf = S::from_usize(self.branching).unwrap();
        let values = map_indexed(self.nodes_at(step), |j| {
            let base = j * self.branching;
            ordered_sum(rv.values[base..base + self.branching].iter().copied()) / bf
        });
        Ok(RandomVariable { step, values })
    }

    /// `E[rv | F_step]`, applying the one-step operator repeatedly.
    pub fn conditional_expectation_to(
        &self,
        rv: &RandomVariable<S>,
        step: usize,
    ) -> Result<RandomVariable<S>> {
        self.check_step(rv)?;
        if step > rv.step {
            return Err(Error::Measurability { expected: rv.step, found: step });
        }
        let mut cur = rv.clone();
        while cur.step > step {
            cur = self.conditional_expectation(&cur)?;
        }
        Ok(cur)
    }

    pub fn expectation(&self, rv: &RandomVariable<S>) -> Result<S> {
        self.check_step(rv)?;
        let n = S::from_usize(rv.values.len()).unwrap();
        Ok(ordered_sum(rv.values.iter().copied()) / n)
    }

    /// Integrand of the one-step martingale representation:
    /// `z_k = E[rv * dW_{k+1} | F_k] / dt` for `rv` measurable at step `k + 1`.
    pub fn martingale_projection(&self, rv: &RandomVariable<S>) -> Result<RandomVector<S>> {
        self.check_step(rv)?;
        if rv.step == 0 {
            return Err(Error::Measurability { expected: 1, found: 0 });
        }
        let step = rv.step - 1;
        let d = self.dims;
        let per_node = map_indexed(self.nodes_at(step), |j| {
            self.project_children(&rv.values[j * self.branching..(j + 1) * self.branching])
        });
        let mut values = Vec::with_capacity(per_node.len() * d);
        for z in per_node {
            values.extend(z);
        }
        Ok(RandomVector { step, dims: d, values })
    }

    /// `(E[v], z)` for the sibling values of one node.
    pub(crate) fn children_mean(&self, children: &[S]) -> S {
        ordered_sum(children.iter().copied()) / S::from_usize(self.branching).unwrap()
    }

    pub(crate) fn project_children(&self, children: &[S]) -> Vec<S> {
        let scale = S::from_usize(self.branching).unwrap() * self.dt;
        (0..self.dims)
            .map(|i| {
                ordered_sum(
                    children
                        .iter()
                        .enumerate()
                        .map(|(b, &v)| v * self.increment(b)[i]),
                ) / scale
            })
            .collect()
    }

    /// Embeds an `F_k` variable at step `k + 1` (constant across siblings).
    pub fn lift(&self, rv: &RandomVariable<S>) -> Result<RandomVariable<S>> {
        self.check_step(rv)?;
        if rv.step >= self.steps {
            return Err(Error::Measurability { expected: self.steps - 1, found: rv.step });
        }
        let values = (0..self.nodes_at(rv.step + 1))
            .map(|c| rv.values[self.parent(c)])
            .collect();
        Ok(RandomVariable { step: rv.step + 1, values })
    }

    /// `<a, b> = E[a b]`.
    pub fn pairing(&self, a: &RandomVariable<S>, b: &RandomVariable<S>) -> Result<S> {
        self.check_step(a)?;
        self.check_step(b)?;
        if a.step != b.step {
            return Err(Error::Measurability { expected: a.step, found: b.step });
        }
        let n = S::from_usize(a.values.len()).unwrap();
        Ok(ordered_sum(a.values.iter().zip(&b.values).map(|(&x, &y)| x * y)) / n)
    }

    pub fn norm(&self, a: &RandomVariable<S>) -> Result<S> {
        Ok(self.pairing(a, a)?.sqrt())
    }

    pub fn constant(&self, step: usize, value: S) -> RandomVariable<S> {
        RandomVariable { step, values: vec![value; self.nodes_at(step)] }
    }

    pub fn terminal_from_fn(&self, f: impl FnMut(usize) -> S) -> RandomVariable<S> {
        RandomVariable { step: self.steps, values: (0..self.leaves()).map(f).collect() }
    }

    pub fn leaf_indicator(&self, leaf: usize) -> RandomVariable<S> {
        self.terminal_from_fn(|j| if j == leaf { S::one() } else { S::zero() })
    }

    /// Validates that `rv` is a terminal (step `N`) variable on this tree.
    pub fn check_terminal(&self, rv: &RandomVariable<S>) -> Result<()> {
        if rv.step != self.steps {
            return Err(Error::Measurability { expected: self.steps, found: rv.step });
        }
        self.check_step(rv)
    }

    pub fn to_file(&self) -> TreeFile {
        TreeFile {
            steps: self.steps,
            horizon: self.horizon.to_f64_lossy(),
            dims: self.dims,
            ordering: ORDERING.to_string(),
        }
    }

    pub fn from_file(file: &TreeFile) -> Result<Self> {
        if file.ordering != ORDERING {
            return Err(Error::TreeShape(format!("unsupported ordering `{}`", file.ordering)));
        }
        Self::new(file.steps, S::lit(file.horizon), file.dims)
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.to_file())?;
        Ok(())
    }

    pub fn read_json(r: impl Read) -> Result<Self> {
        let file: TreeFile = serde_json::from_reader(r)?;
        Self::from_file(&file)
    }
}

/// On-disk description of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFile {
    pub steps: usize,
    pub horizon: f64,
    pub dims: usize,
    pub ordering: String,
}

/// Real-valued `F_step`-measurable variable: one value per node at `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVariable<S> {
    step: usize,
    values: Vec<S>,
}

impl<S: Scalar> RandomVariable<S> {
    pub fn new(step: usize, values: Vec<S>) -> Self {
        Self { step, values }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { step: self.step, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.step, other.step, "random variables at different steps");
        assert_eq!(self.values.len(), other.values.len());
        Self {
            step: self.step,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: S, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + s * b)
    }

    /// Equal-weight mean; every node at a given step has the same probability.
    pub fn mean(&self) -> S {
        ordered_sum(self.values.iter().copied()) / S::from_usize(self.values.len()).unwrap()
    }

    /// `E[self * other]`.
    pub fn dot(&self, other: &Self) -> S {
        assert_eq!(self.step, other.step, "random variables at different steps");
        ordered_sum(self.values.iter().zip(&other.values).map(|(&a, &b)| a * b))
            / S::from_usize(self.values.len()).unwrap()
    }

    /// L²(P) norm.
    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.values.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> S {
        self.values.iter().copied().fold(S::infinity(), S::min)
    }

    pub fn max_value(&self) -> S {
        self.values.iter().copied().fold(S::neg_infinity(), S::max)
    }

    /// Casts to another scalar precision.
    pub fn cast<T: Scalar>(&self) -> RandomVariable<T> {
        RandomVariable {
            step: self.step,
            values: self.values.iter().map(|v| T::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// `R^d`-valued variable at `step`, node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomVector<S> {
    step: usize,
    dims: usize,
    values: Vec<S>,
}

impl<S: Scalar> RandomVector<S> {
    pub fn new(step: usize, dims: usize, values: Vec<S>) -> Self {
        assert_eq!(values.len() % dims, 0);
        Self { step, dims, values }
    }

    pub fn zeros(step: usize, dims: usize, nodes: usize) -> Self {
        Self { step, dims, values: vec![S::zero(); nodes * dims] }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.dims
    }

    pub fn at(&self, node: usize) -> &[S] {
        &self.values[node * self.dims..(node + 1) * self.dims]
    }

    pub fn at_mut(&mut self, node: usize) -> &mut [S] {
        &mut self.values[node * self.dims..(node + 1) * self.dims]
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn coord(&self, i: usize) -> RandomVariable<S> {
        RandomVariable::new(self.step, (0..self.nodes()).map(|j| self.at(j)[i]).collect())
    }
}

/// Adapted real process: slice `k` is `F_k`-measurable, `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess<S> {
    slices: Vec<RandomVariable<S>>,
}

impl<S: Scalar> AdaptedProcess<S> {
    pub fn new(slices: Vec<RandomVariable<S>>) -> Self {
        debug_assert!(slices.iter().enumerate().all(|(k, s)| s.step() == k));
        Self { slices }
    }

    pub fn at(&self, step: usize) -> &RandomVariable<S> {
        &self.slices[step]
    }

    pub fn slices(&self) -> &[RandomVariable<S>] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Predictable `R^d` process: slice `k` is `F_k`-measurable and acts on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictableProcess<S> {
    slices: Vec<RandomVector<S>>,
}

impl<S: Scalar> PredictableProcess<S> {
    pub fn new(slices: Vec<RandomVector<S>>) -> Self {
        Self { slices }
    }

    pub fn at(&self, step: usize) -> &RandomVector<S> {
        &self.slices[step]
    }

    pub fn slices(&self) -> &[RandomVector<S>] {
        &self.slices
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Squared H² norm `E sum_k |phi_k|^2 dt`.
    pub fn h2_norm_sq(&self, tree: &ScenarioTree<S>) -> S {
        ordered_sum(self.slices.iter().map(|s| {
            let n = S::from_usize(s.nodes()).unwrap();
            ordered_sum(s.values().iter().map(|&v| v * v)) / n * tree.dt()
        }))
    }
}

/// Writes a terminal variable as `leaf_index,value` CSV in tree order.
pub fn write_leaf_csv<S: Scalar>(rv: &RandomVariable<S>, w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["leaf_index", "value"])?;
    for (i, v) in rv.values().iter().enumerate() {
        wtr.write_record([i.to_string(), format_full(v.to_f64_lossy())])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a terminal variable written by [`write_leaf_csv`]; rows must be in leaf order.
pub fn read_leaf_csv<S: Scalar>(tree: &ScenarioTree<S>, r: impl Read) -> Result<RandomVariable<S>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "leaf_index" || &headers[1] != "value" {
        return Err(Error::BadParameter {
            name: "csv header".into(),
            reason: "expected `leaf_index,value`".into(),
        });
    }
    let mut values = Vec::with_capacity(tree.leaves());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let idx: usize = rec[0].trim().parse().map_err(|_| Error::BadParameter {
            name: format!("leaf_index (row {row})"),
            reason: format!("not an integer: `{}`", &rec[0]),
        })?;
        if idx != row {
            return Err(Error::BadParameter {
                name: format!("leaf_index (row {row})"),
                reason: format!("out of order: found {idx}"),
            });
        }
        let v: f64 = rec[1].trim().parse().map_err(|_| Error::BadParameter {
            name: format!("value (row {row})"),
            reason: format!("not a number: `{}`", &rec[1]),
        })?;
        values.push(S::lit(v));
    }
    if values.len() != tree.leaves() {
        return Err(Error::Length { expected: tree.leaves(), found: values.len() });
    }
    Ok(RandomVariable::new(tree.steps(), values))
}

/// 17 significant digits.
pub fn format_full(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_terminal(tree: &ScenarioTree<f64>, seed: u64) -> RandomVariable<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tree.terminal_from_fn(|_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn shapes_and_increments() {
        let t = ScenarioTree::<f64>::new(1, 1.0, 1).unwrap();
        assert_eq!(t.leaves(), 2);
        assert_eq!(t.increment(0), &[-1.0]);
        assert_eq!(t.increment(1), &[1.0]);

        let t = ScenarioTree::<f64>::new(4, 1.0, 1).unwrap();
        assert_eq!(t.leaves(), 16);
        assert_eq!(t.leaf_prob(), 1.0 / 16.0);
        assert_eq!(t.increment(1), &[0.5]);

        let t = ScenarioTree::<f64>::new(2, 1.0, 2).unwrap();
        assert_eq!(t.leaves(), 16);
        assert_eq!(t.branching(), 4);
        let h = 0.5f64.sqrt();
        assert_eq!(t.increment(0), &[-h, -h]);
        assert_eq!(t.increment(2), &[h, -h]);
        assert_eq!(t.increment(3), &[h, h]);
    }

    #[test]
    fn size_guard() {
        assert!(ScenarioTree::<f64>::new(2, 1.0, 4).is_err());
        assert!(ScenarioTree::<f64>::new(9, 1.0, 3).is_err());
        assert!(ScenarioTree::<f64>::new(0, 1.0, 1).is_err());
        assert!(ScenarioTree::<f64>::new(3, 0.0, 1).is_err());
        assert!(ScenarioTree::<f64>::new(8, 1.0, 3).is_ok());
    }

    #[test]
    fn leaf_probabilities_sum_exactly() {
        for (n, d) in [(4, 1), (3, 2), (2, 3), (10, 1)] {
            let t = ScenarioTree::<f64>::new(n, 1.0, d).unwrap();
            let total: f64 = (0..t.leaves()).map(|_| t.leaf_prob()).sum();
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn increment_moments() {
        for d in 1..=3 {
            let t = ScenarioTree::<f64>::new(2, 0.7, d).unwrap();
            let bf = t.branching() as f64;
            for i in 0..d {
                let mean: f64 = (0..t.branching()).map(|b| t.increment(b)[i]).sum::<f64>() / bf;
                assert!(mean.abs() < 1e-15);
                for j in 0..d {
                    let cov: f64 = (0..t.branching())
                        .map(|b| t.increment(b)[i] * t.increment(b)[j])
                        .sum::<f64>()
                        / bf;
                    let expect = if i == j { t.dt() } else { 0.0 };
                    assert!((cov - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn indicator_of_all_up_leaf() {
        let t = ScenarioTree::<f64>::new(4, 1.0, 1).unwrap();
        let ind = t.leaf_indicator(15);
        let ce = t.conditional_expectation(&ind).unwrap();
        assert_eq!(ce.step(), 3);
        assert_eq!(ce.values()[7], 0.5);
        assert!(ce.values()[..7].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_is_preserved() {
        let t = ScenarioTree::<f64>::new(3, 1.0, 2).unwrap();
        let c = t.constant(3, 2.5);
        let ce = t.conditional_expectation_to(&c, 0).unwrap();
        assert_eq!(ce.values(), &[2.5]);
    }

    #[test]
    fn tower_property_against_direct_sum() {
        let t = ScenarioTree::<f64>::new(5, 1.0, 1).unwrap();
        for seed in 0..20 {
            let rv = random_terminal(&t, seed);
            let direct: f64 = rv.values().iter().sum::<f64>() * t.leaf_prob();
            for k in 0..5 {
                let ce = t.conditional_expectation_to(&rv, k).unwrap();
                assert!((t.expectation(&ce).unwrap() - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn projection_of_brownian_and_constants() {
        let t = ScenarioTree::<f64>::new(4, 1.0, 1).unwrap();
        for k in 0..4 {
            let w = t.brownian_coord(k + 1, 0);
            let z = t.martingale_projection(&w).unwrap();
            assert!(z.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
            let c = t.constant(k + 1, 3.0);
            let z = t.martingale_projection(&c).unwrap();
            assert!(z.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_two_point_formula() {
        // up-child indicator on one node: z = (1 - 0) / (2 sqrt(dt)) = 1.0 for dt = 0.25
        let t = ScenarioTree::<f64>::new(4, 1.0, 1).unwrap();
        let rv = RandomVariable::new(1, vec![0.0, 1.0]);
        let z = t.martingale_projection(&rv).unwrap();
        assert_eq!(z.values(), &[1.0]);
    }

    #[test]
    fn exact_reconstruction_d1() {
        let t = ScenarioTree::<f64>::new(5, 1.3, 1).unwrap();
        for seed in 0..10 {
            let rv = random_terminal(&t, seed);
            let ce = t.conditional_expectation(&rv).unwrap();
            let z = t.martingale_projection(&rv).unwrap();
            for c in 0..t.leaves() {
                let p = t.parent(c);
                let rebuilt = ce.values()[p] + z.at(p)[0] * t.increment(t.branch_of(c))[0];
                assert!((rebuilt - rv.values()[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn residual_orthogonal_to_increments_d2() {
        let t = ScenarioTree::<f64>::new(2, 1.0, 2).unwrap();
        let rv = random_terminal(&t, 3);
        let ce = t.conditional_expectation(&rv).unwrap();
        let z = t.martingale_projection(&rv).unwrap();
        for p in 0..t.nodes_at(1) {
            for i in 0..2 {
                let mut acc = 0.0;
                for b in 0..4 {
                    let inc = t.increment(b);
                    let resid = rv.values()[t.child(p, b)]
                        - ce.values()[p]
                        - (z.at(p)[0] * inc[0] + z.at(p)[1] * inc[1]);
                    acc += resid * inc[i];
                }
                assert!(acc.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn measurability_mismatch() {
        let t = ScenarioTree::<f64>::new(3, 1.0, 1).unwrap();
        let bad = RandomVariable::new(2, vec![0.0; 3]);
        assert!(t.conditional_expectation(&bad).is_err());
        let root = t.constant(0, 1.0);
        assert!(t.conditional_expectation(&root).is_err());
        assert!(t.martingale_projection(&root).is_err());
    }

    #[test]
    fn lift_is_constant_across_siblings() {
        let t = ScenarioTree::<f64>::new(3, 1.0, 2).unwrap();
        let rv = RandomVariable::new(1, vec![1.0, 2.0, 3.0, 4.0]);
        let up = t.lift(&rv).unwrap();
        for c in 0..16 {
            assert_eq!(up.values()[c], rv.values()[c / 4]);
        }
        assert_eq!(t.conditional_expectation(&up).unwrap(), rv);
    }

    #[test]
    fn paths_are_lexicographic() {
        let t = ScenarioTree::<f64>::new(3, 1.0, 1).unwrap();
        assert_eq!(t.path(3, 0), vec![0, 0, 0]);
        assert_eq!(t.path(3, 6), vec![1, 1, 0]);
        let w = t.brownian_coord(3, 0);
        assert!((w.values()[6] - (2.0 - 1.0) / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let t = ScenarioTree::<f64>::new(3, 1.0, 1).unwrap();
        let rv = random_terminal(&t, 9);
        let mut buf = Vec::new();
        write_leaf_csv(&rv, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("leaf_index,value\n"));
        let back = read_leaf_csv(&t, buf.as_slice()).unwrap();
        assert_eq!(back, rv);

        let mut js = Vec::new();
        t.write_json(&mut js).unwrap();
        let t2 = ScenarioTree::<f64>::read_json(js.as_slice()).unwrap();
        assert_eq!(t2.to_file(), t.to_file());
        assert!(String::from_utf8_lossy(&js).contains(ORDERING));
    }

    #[test]
    fn csv_rejects_wrong_count() {
        let t = ScenarioTree::<f64>::new(2, 1.0, 1).unwrap();
        let data = "leaf_index,value\n0,1\n1,2\n";
        assert!(read_leaf_csv(&t, data.as_bytes()).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let t = ScenarioTree::<f32>::new(4, 1.0, 1).unwrap();
        let w = t.brownian_coord(4, 0);
        let z = t.martingale_projection(&w).unwrap();
        assert!(z.values().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn conditional_expectation_is_linear_and_monotone(
                a in proptest::collection::vec(-5.0f64..5.0, 16),
                b in proptest::collection::vec(-5.0f64..5.0, 16),
                s in -3.0f64..3.0,
            ) {
                let t = ScenarioTree::<f64>::new(4, 1.0, 1).unwrap();
                let ra = RandomVariable::new(4, a);
                let rb = RandomVariable::new(4, b);
                let lhs = t.conditional_expectation(&ra.axpy(s, &rb)).unwrap();
                let ea = t.conditional_expectation(&ra).unwrap();
                let eb = t.conditional_expectation(&rb).unwrap();
                for j in 0..8 {
                    prop_assert!((lhs.values()[j] - ea.values()[j] - s * eb.values()[j]).abs() < 1e-12);
                }
                let pos = ra.map(f64::abs);
                let ep = t.conditional_expectation(&pos).unwrap();
                prop_assert!(ep.values().iter().all(|&v| v >= 0.0));
            }

            #[test]
            fn pairing_symmetric_positive(
                a in proptest::collection::vec(-5.0f64..5.0, 8),
                b in proptest::collection::vec(-5.0f64..5.0, 8),
            ) {
                let t = ScenarioTree::<f64>::new(3, 1.0, 1).unwrap();
                let ra = RandomVariable::new(3, a);
                let rb = RandomVariable::new(3, b);
                prop_assert_eq!(t.pairing(&ra, &rb).unwrap(), t.pairing(&rb, &ra).unwrap());
                prop_assert!(t.pairing(&ra, &ra).unwrap() >= 0.0);
                let one = t.constant(3, 1.0);
                prop_assert!((t.pairing(&one, &ra).unwrap() - t.expectation(&ra).unwrap()).abs() < 1e-15);
            }
        }
    }
}
