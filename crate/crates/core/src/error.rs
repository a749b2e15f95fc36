use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree shape: {0}")]
    TreeShape(String),

    #[error("measurability mismatch: expected step {expected}, got step {found}")]
    Measurability { expected: usize, found: usize },

    #[error("length mismatch: expected {expected} values, got {found}")]
    Length { expected: usize, found: usize },

    #[error("unknown generator or risk specification `{0}`")]
    UnknownSpec(String),

    #[error("bad parameter `{name}`: {reason}")]
    BadParameter { name: String, reason: String },

    #[error("contraction precondition violated: M*dt = {m_dt} (must be <= 1/2)")]
    Contraction { m_dt: f64 },

    #[error("monotonicity precondition violated: M*sqrt(dt) = {m_sqrt_dt} (must be <= 1)")]
    Monotonicity { m_sqrt_dt: f64 },

    #[error("fixed point did not converge at step {step}, node {node}: residual {residual:e}")]
    FixedPoint { step: usize, node: usize, residual: f64 },

    #[error("penalized sequence not monotone: y0 dropped from {prev} to {next} at n = {penalty}")]
    NonMonotone { prev: f64, next: f64, penalty: f64 },

    #[error("generator `{0}` is not smooth; partial derivatives unavailable")]
    NotSmooth(String),

    #[error("generator `{0}` has no Clarke subdifferential oracle")]
    NoClarkeOracle(String),

    #[error("degenerate discount 1 - phi*dt = {value} at step {step}, node {node}")]
    DegenerateDiscount { step: usize, node: usize, value: f64 },

    #[error("zero vector where a nonzero one is required: {0}")]
    ZeroVector(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("infeasible problem: budget {budget} below minimal cost {min_cost}")]
    Infeasible { budget: f64, min_cost: f64 },

    #[error("unsupported problem: {0}")]
    Unsupported(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
