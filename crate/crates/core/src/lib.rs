//! Bilateral supply-function bidding market for edge-computing resources.
//!
//! Edge servers bid affine supply functions, terminal entities shift their
//! flexible demand across the day, and a scheduler clears every slot at a
//! uniform price. [`games::run_dtoa`] iterates both games to a joint
//! equilibrium; [`oracle`] solves and checks equilibria independently.
//!
//! Everything is generic over the scalar type (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

// `!(x > 0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod games;
pub mod market;
pub mod matrix;
pub mod metrics;
pub mod numeric;
pub mod oracle;
pub mod real;
pub mod scenario_io;

pub use error::{IoError, MarketError, OracleError};
pub use games::{run_dtoa, run_dtoa_with, RunOptions, RunStatus};
pub use market::{CostCoeffs, StopMode, SCHEMA_VERSION};
pub use matrix::Matrix;
pub use metrics::{build_report, compute_baseline, emit, par, ComparisonReport, ReportFormat};
pub use real::Real;
pub use scenario_io::{generate_scenario, load_scenario, save_result, save_scenario, Range};

pub type Scenario = market::Scenario<f64>;
pub type SolverConfig = market::SolverConfig<f64>;
pub type BidMatrix = market::BidMatrix<f64>;
pub type DemandMatrix = market::DemandMatrix<f64>;
pub type MarketState = market::MarketState<f64>;
pub type AgentEconomics = market::AgentEconomics<f64>;
pub type EquilibriumResult = games::EquilibriumResult<f64>;
pub type GenerationParams = scenario_io::GenerationParams<f64>;
pub type SupplierEquilibrium = oracle::SupplierEquilibrium<f64>;
pub type Baseline = metrics::Baseline<f64>;

pub type Scenario32 = market::Scenario<f32>;
pub type EquilibriumResult32 = games::EquilibriumResult<f32>;
