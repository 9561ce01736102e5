//! Version-AoI optimal cached status updates.
//!
//! An energy-harvesting sensor with a finite battery feeds a cache-enabled
//! aggregator, which serves requests from the nodes of a gossiping ring. The
//! aggregator decides, per served request, whether to forward its cached
//! update or spend one energy unit on a fresh one. This crate builds the
//! exact average-cost MDP of that system, solves it with relative value
//! iteration, checks the structure of the optimal policy and simulates it.
//!
//! Modules, bottom-up:
//!
//! - [`model`]: parameters, states, actions, per-slot randomness
//! - [`kernel`]: state enumeration and the sparse transition kernel
//! - [`solver`]: relative value iteration, policy evaluation, brute-force oracle
//! - [`analysis`]: accessibility, aggregator-age-only and threshold structure, value monotonicity
//! - [`sim`]: seeded Monte Carlo simulation and parameter sweeps
//!
//! Hot loops run on rayon when the `parallel` feature is on (the default).

pub mod analysis;
pub mod exec;
pub mod graph;
pub mod kernel;
pub mod model;
pub mod sim;
pub mod solver;
pub mod sparse;

pub use exec::Execution;
pub use kernel::{build_kernel, build_kernel_with, next_state, KernelOptions, StateSpace, TransitionKernel};
pub use model::{cost, outcome_distribution, Action, EnvOutcome, ParamError, State, SystemParams};
pub use solver::{solve, Policy, Solution, SolveReport, SolverSettings, ValueFunction};
