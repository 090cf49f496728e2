//! Distributed optimization over networks with gradient tracking and
//! surrogate subproblems.
//!
//! The crate is organised in six layers:
//!
//! - [`network`]: topologies, mixing matrices, spectral quantities,
//!   time-varying digraph sequences and Chebyshev-accelerated mixing.
//! - [`problem`]: composite objectives `U = F + G` over a convex set `K`,
//!   problem constants and synthetic data.
//! - [`surrogate`]: local models and their subproblem solvers.
//! - [`solver`]: undirected, star and push-sum drivers with metric traces.
//! - [`rates`]: closed-form rate certificates and complexity regimes.
//! - [`harness`]: experiment configuration, scenarios and CSV output.

pub mod error;
pub mod harness;
pub mod network;
pub mod problem;
pub mod rates;
pub mod seed;
pub mod solver;
pub mod surrogate;

pub use error::{Error, Result};
pub use network::{MixingMatrix, TimeVaryingNetwork, Topology, TopologyKind, TvKind};
pub use problem::{CompositeProblem, ConstraintSet, NonsmoothTerm, SmoothLoss};
pub use rates::{RateInputs, RateReport, Regime};
pub use solver::{Network, NetworkState, RunTrace, SolverConfig, SolverMode};
pub use surrogate::{SubproblemResult, SurrogateKind, SurrogateSpec};

pub use nalgebra::{DMatrix, DVector};
