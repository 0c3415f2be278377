//! Multi-period portfolio choice under return predictability.
//!
//! The library models asset returns jointly with predictor variables as a
//! Gaussian VAR(1) and solves, in closed form, the dynamic allocation
//! problem of an investor with exponential utility over terminal wealth who
//! rebalances between the risky assets and a risk-free account each period.
//!
//! The pieces fit together as a pipeline:
//!
//! * [`estimation`] fits the joint process from observed series;
//! * [`model`] holds the process, validates it, and simulates paths;
//! * [`strategy`] turns a model into an exact affine decision rule by one
//!   backward sweep, with explicit shortcuts for the no-predictor and iid
//!   special cases;
//! * [`oracle`] re-solves small instances by quadrature and Newton descent,
//!   giving an independent check of the closed form;
//! * [`sim`] races strategies over common simulated paths and summarizes
//!   terminal wealth distributions.
//!
//! Periods are indexed so that a decision at t = 0..T-1 is exposed to the
//! returns of period t+1; risk-free rates are quoted per period and may
//! vary deterministically, as may the innovation covariance.

pub mod error;
pub mod estimation;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod strategy;
mod textio;

pub use error::{Error, Result};
pub use estimation::{fit_var1, DofMode, FitReport, ReturnSeries};
pub use model::{RiskFree, Scenario, StateVector, VarModel};
pub use oracle::{expected_utility, numeric_optimal_weights, OracleConfig, OracleSolution};
pub use sim::{simulate_wealth, Ecdf, SimulationConfig, SimulationResult};
pub use strategy::{build_rule, iid_rule, no_predictor_rule, PortfolioRule};
