//! Dispatch optimization toolkit for a coalition of battery storage units
//! trading in multiple electricity markets.
//!
//! The pipeline: simulate battery physics ([`battery`]), count equivalent
//! charge-discharge cycles ([`rainflow`]), compute ground-truth capacity
//! loss and training data ([`degradation`]), learn a closed-form
//! degradation function ([`gpdef`]), solve the risk-averse portfolio
//! allocation over price scenarios ([`epa`]), split profits by marginal
//! contribution ([`shapley`]) and run rolling-horizon simulations
//! ([`mpc`]).

pub mod battery;
pub mod degradation;
pub mod epa;
pub mod gpdef;
pub mod rainflow;

pub use battery::{
    aggregate_dispatch, check_feasible, soc_trajectory, BatterySpec, DispatchSchedule,
    FeasibilityReport, SocTrajectory, Violation,
};
pub use degradation::{
    degradation_of_dispatch, empirical_degradation, generate_dataset, stress, DegradationDataset,
};
pub use epa::{
    build_problem, evaluate_profit, solve, solve_risk_neutral, var_cvar, EpaProblem, EpaSolution,
    MarketSpec, PriceMatrix, PriceScenarioSet, SettlementMode, SolveStatus, SolverOptions,
};
pub use gpdef::{fit, kernel, psd_project, DefHyperParams, DefModel, FitOptions, QuadraticForm};
pub use rainflow::{count_cycles, Cycle, CycleSet};
