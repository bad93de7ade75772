use thiserror::Error;

/// Errors raised by the analytical, simulation and estimation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("heavy-traffic normalization violated: {0}")]
    Normalization(String),

    #[error("unstable instance: {name} = {value} (must be < 1)")]
    Unstable { name: &'static str, value: f64 },

    #[error("heavy-traffic index r = {0} outside (0, 1)")]
    IndexOutOfRange(f64),

    #[error("limit formula outside validated regime: m1 + m3 - m5*m2/m4 = {0} <= 0")]
    OutsideRegime(f64),

    #[error("transform argument {arg} outside domain (must exceed {lower})")]
    TransformDomain { arg: f64, lower: f64 },

    #[error("unsupported moment order {0} (expected 1..=4)")]
    MomentOrder(u32),

    #[error("root finding failed: {0}")]
    RootFinding(String),

    #[error("singular cancellation system (determinant {0})")]
    Singular(f64),

    #[error("theta has positive component {index} = {value}")]
    PositiveTheta { index: usize, value: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("theta {0:?} was not registered as a probe for this run")]
    UnknownProbe([f64; 5]),

    #[error("missing conditional estimate(s): {0}")]
    MissingConditional(String),

    #[error("state space of {states} states exceeds budget of {budget}")]
    StateBudget { states: usize, budget: usize },

    #[error("exponential distributions required: {0}")]
    NotExponential(String),

    #[error("solver did not converge after {iterations} sweeps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("conditioning set `{0}` has zero probability mass")]
    EmptyConditioning(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
