//! Cooperative MPC lane change in mixed traffic.
//!
//! Four connected human-driven vehicles (CHDVs) on the target lane are driven by per-vehicle
//! model predictive controllers so that a connected autonomous vehicle (CAV) can complete a
//! mandatory lane change. The CAV re-plans a cubic trajectory every step; each CHDV solves a
//! small dense QP whose velocity constraints are hard or softened depending on how actively
//! its driver cooperates.
//!
//! All numeric modules are generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the scalar to `f64`, which the simulator and experiments use.

pub mod error;
pub mod experiment;
pub mod model;
pub mod mpc;
pub mod planner;
pub mod prediction;
pub mod qp;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type VehicleState = model::VehicleState<f64>;
pub type SafetyParams = model::SafetyParams<f64>;
pub type Fleet = model::Fleet<f64>;
pub type Scenario = model::Scenario<f64>;
pub type CubicPlan = planner::CubicPlan<f64>;
pub type EndPositionWindow = planner::EndPositionWindow<f64>;
pub type QuadraticProgram = qp::QuadraticProgram<f64>;
pub type QpSolution = qp::QpSolution<f64>;
pub type PredictionMatrices = prediction::PredictionMatrices<f64>;
pub type MpcConfig = mpc::MpcConfig<f64>;
pub type ControlDecision = mpc::ControlDecision<f64>;
pub type RunConfig = sim::RunConfig<f64>;
pub type RunResult = sim::RunResult<f64>;
pub type BiLaneResult = sim::BiLaneResult<f64>;
pub type StepRecord = sim::StepRecord<f64>;
