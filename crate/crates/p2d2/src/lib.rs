//! Decentralized composite optimization over a network of agents, each
//! holding a private smooth cost, that jointly minimize the average cost
//! plus a shared nonsmooth regularizer using only neighbor-to-neighbor
//! exchanges.
//!
//! The toolkit provides:
//!
//! * [`topology`]: graphs, doubly stochastic combination matrices, and the
//!   induced consensus penalty matrix with its spectral quantities;
//! * [`model`]: per-agent logistic and quadratic costs, data partitioning,
//!   and synthetic problem generation;
//! * [`prox`]: the supported regularizers, their proximal operators, and a
//!   subgradient-based optimality witness;
//! * [`solver`]: the diffusion-style proximal primal-dual iteration in
//!   three equivalent forms plus its smooth special case, with a
//!   centralized oracle for ground truth;
//! * [`analysis`]: step-size selection, linear-convergence certificates,
//!   fixed-point residuals, and empirical rate fitting;
//! * [`trace`]: the CSV iteration-trace format shared by the library and
//!   the command-line harness.
//!
//! # Example
//!
//! ```
//! use p2d2::analysis;
//! use p2d2::model::{self, AgentCost};
//! use p2d2::prox::Regularizer;
//! use p2d2::solver::{self, Problem, RunOptions, SolverConfig, SolverForm};
//! use p2d2::topology::{Graph, Network};
//!
//! let network = Network::metropolis(Graph::ring(6).unwrap()).unwrap();
//! let (costs, _planted) = model::synthesize_logistic(6, 40, 8, 3, 0.05, 0.1, 7).unwrap();
//! let constants = model::estimate_constants(&costs).unwrap();
//! let spectrum = network.consensus.spectral_bounds().unwrap();
//! let steps = analysis::step_size_defaults(constants, spectrum, 0.5).unwrap();
//!
//! let problem = Problem {
//!     network: &network,
//!     costs: &costs,
//!     regularizer: Regularizer::L1 { rho: 1e-3 },
//! };
//! let config = SolverConfig {
//!     mu: steps.mu,
//!     alpha: steps.alpha,
//!     max_iters: 100,
//!     tol: 0.0,
//!     w0: None,
//! };
//! let out = solver::run(problem, &config, SolverForm::Agent, &RunOptions::default()).unwrap();
//! assert_eq!(out.trace.records.len(), 101);
//! ```

pub mod analysis;
pub mod guide;
pub mod model;
pub mod prox;
pub mod seed;
pub mod solver;
pub mod topology;
pub mod trace;
