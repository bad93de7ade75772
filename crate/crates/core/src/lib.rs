//! Heavy-traffic analysis of a two-station, five-class reentrant line under
//! the static buffer priority policy `(5, 3, 1)` / `(2, 4)`.
//!
//! Modules cover the network model and scaling, service-time families, a
//! discrete-event simulator, stationary estimators, the MGF transform layer,
//! an exact truncated CTMC, and Lyapunov drift checks.

pub mod ctmc;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod lyapunov;
pub mod mgf_calculus;
pub mod model;
pub mod simulator;

pub use ctmc::{BarResidual, SolveOptions, Solver, TailReport, TruncatedChain};
pub use distributions::DistributionSpec;
pub use error::{Error, Result};
pub use estimators::{Estimate, FitReport, MgfEstimate, StationaryEstimate};
pub use lyapunov::DriftReport;
pub use mgf_calculus::{Step, ThetaVector, TransformValues};
pub use model::{limit_constants, scale, BaseParams, LimitLaw, NetworkInstance, StabilityReport};
pub use simulator::{RunConfig, SimState, Trajectory};
