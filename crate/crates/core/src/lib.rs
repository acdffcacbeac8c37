//! Predictive control for linear time-varying systems with time-varying
//! well-conditioned costs, plus a numerical lab for its perturbation,
//! stability, regret and competitive-ratio guarantees.

pub mod analysis;
pub mod cli;
pub mod controllers;
pub mod costs;
pub mod error;
pub mod format;
pub mod linalg;
mod riccati;
pub mod solver;
pub mod system;

pub use controllers::{run_opt, run_pc_k, run_pc_kh, ControllerTag, RunRecord};
pub use costs::{CostFn, CostModel, TerminalCost};
pub use error::{Error, Result};
pub use solver::{
    build_stacked_maps, offline_optimal, optimal_value, solve_terminal_constraint,
    solve_terminal_cost, switching_cost, SolveMethod, SolveResult, SolverOptions, StackedMaps,
};
pub use system::{
    generate_instance, ControllabilityReport, InstanceFamily, InstanceSpec, LtvSystem, Trajectory,
};
