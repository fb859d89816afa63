//! Synthesis and verification of optimal stabilizing feedback for
//! linear stochastic systems with Markov regime switching, Poisson
//! perturbations and state jumps at deterministic times.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats and
//! the command-line interface live in the companion `stochstab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cost;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod control;
pub mod perturb;
pub mod riccati;
pub mod simulate;
pub mod stochastic;

pub use control::{closed_loop, lyapunov_value, synthesize_feedback};
pub use cost::{compare_costs, estimate_cost, running_cost, CostEstimate};
pub use lyapunov::{stability_probability_estimate, supermartingale_check, StabilityReport};
pub use model::{validate, CostWeights, RegimeSystem, ValidationReport};
pub use perturb::{assemble_series, majorant_radius, solve_case1, solve_case2, SeriesSolution};
pub use riccati::{solve_coupled_care, solve_riccati_ode, GainSet, SolveOptions};
pub use simulate::{simulate_batch, simulate_path, FeedbackLaw, TrajectoryPath};
pub use stochastic::SeededStream;
