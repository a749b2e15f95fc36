//! Discrete-time BSDEs and g-expectations on binary scenario trees, their
//! adjoint gradients, and risk minimization under a g-expectation budget.
//!
//! Everything is generic over the scalar type; the aliases below fix `f64`.

pub mod adjoint;
pub mod bsde;
pub mod error;
pub mod filtration;
pub mod generators;
pub mod nonsmooth;
pub mod optimize;
mod par;
pub mod risk;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tree = filtration::ScenarioTree<f64>;
pub type Claim = filtration::RandomVariable<f64>;
pub type Driver = generators::Generator<f64>;
pub type Solution = bsde::BsdeSolution<f64>;
pub type Risk = risk::RiskMeasure<f64>;
pub type Problem = optimize::Problem<f64>;
