//! Contextual multi-armed bandits whose rewards are generated by a latent
//! linear Gaussian dynamical system (LGDS).
//!
//! The crate bundles:
//!
//! - [`numerics`]: a small dense linear-algebra kernel (SPD solves,
//!   discrete Riccati / Lyapunov fixed points, spectral radii, Gaussian
//!   sampling);
//! - [`env`]: the LGDS reward environment and the banded test systems
//!   used by the benchmark;
//! - [`kalman`]: time-varying and steady-state Kalman filters plus the
//!   full-knowledge Oracle baseline built on them;
//! - [`regressor`]: windowed regularized least squares over stacked
//!   context histories, with its optimism bounds and window cost;
//! - [`ares`]: the ARES policy — adaptive window selection combined with
//!   perturbed (optimism-driven) action selection;
//! - [`baselines`]: UCB, sliding-window UCB, Rexp3, PIES and Random
//!   comparison policies behind one `Policy` contract;
//! - [`harness`] / [`config`]: seeded, parallel experiment orchestration
//!   with CSV/JSON emission.

pub mod ares;
pub mod baselines;
pub mod config;
pub mod env;
pub mod harness;
pub mod kalman;
pub mod numerics;
pub mod regressor;
pub mod support;

pub use ares::{Ares, AresConfig};
pub use baselines::{build_policy, Policy, PolicyProbe, PolicySetup};
pub use config::{ExperimentConfig, Overrides};
pub use env::{EnvParams, EnvState, RoundOutcome};
pub use harness::{run_experiment, AggregateReport};
pub use kalman::{KalmanState, SteadyKalman};
pub use regressor::{BoundParams, ContextWindow, RegressorState};
