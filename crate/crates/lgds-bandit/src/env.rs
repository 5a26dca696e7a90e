//! The linear Gaussian dynamical system that generates contexts and
//! rewards.
//!
//! The latent state advances as `z' = Γz + ξ` with `ξ ~ N(μ, Q)`. Every
//! round emits a context `θ = C_θ z + φ` (always observed) and one reward
//! per arm, `X_a = ⟨c_a, z⟩ + η_a`, each arm drawing its own independent
//! reward noise. The optimal arm of a round is the one whose action
//! vector aligns best with the *noiseless* state, ties broken toward the
//! lowest index.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::{self, NumericsError};
use crate::support::argmax_lowest;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Parameters of the LGDS plus the action set.
///
/// Construct through [`EnvParams::new`], which validates shapes, checks
/// marginal stability of `gamma`, and pre-factors the noise covariances.
#[derive(Debug, Clone)]
pub struct EnvParams {
    pub gamma: Array2<f64>,
    pub c_theta: Array2<f64>,
    pub q: Array2<f64>,
    pub r: Array2<f64>,
    pub mu: Array1<f64>,
    pub sigma0: Array2<f64>,
    pub sigma_eta: f64,
    pub actions: Vec<Array1<f64>>,
    q_factor: Array2<f64>,
    r_factor: Array2<f64>,
    sigma0_factor: Array2<f64>,
}

impl EnvParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gamma: Array2<f64>,
        c_theta: Array2<f64>,
        q: Array2<f64>,
        r: Array2<f64>,
        mu: Array1<f64>,
        sigma0: Array2<f64>,
        sigma_eta: f64,
        actions: Vec<Array1<f64>>,
    ) -> Result<Self, EnvError> {
        let d = gamma.nrows();
        if gamma.ncols() != d {
            return Err(EnvError::Dimension("gamma must be square".into()));
        }
        let m = c_theta.nrows();
        if c_theta.ncols() != d {
            return Err(EnvError::Dimension(format!(
                "c_theta is {}x{}, expected {m}x{d}",
                c_theta.nrows(),
                c_theta.ncols()
            )));
        }
        if q.nrows() != d || q.ncols() != d || sigma0.nrows() != d || sigma0.ncols() != d {
            return Err(EnvError::Dimension("q and sigma0 must be d x d".into()));
        }
        if r.nrows() != m || r.ncols() != m {
            return Err(EnvError::Dimension("r must be m x m".into()));
        }
        if mu.len() != d {
            return Err(EnvError::Dimension("mu must have length d".into()));
        }
        if actions.is_empty() {
            return Err(EnvError::Domain("need at least one action".into()));
        }
        if actions.iter().any(|a| a.len() != d) {
            return Err(EnvError::Dimension("every action must live in R^d".into()));
        }
        if !(sigma_eta >= 0.0) {
            return Err(EnvError::Domain("sigma_eta must be non-negative".into()));
        }
        let rho = numerics::spectral_radius(&gamma.view())?;
        if rho > 1.0 + 1e-9 {
            return Err(EnvError::Domain(format!(
                "gamma must be marginally stable, spectral radius {rho}"
            )));
        }
        let q_factor = numerics::psd_factor(&q.view())?;
        let r_factor = numerics::psd_factor(&r.view())?;
        let sigma0_factor = numerics::psd_factor(&sigma0.view())?;
        Ok(Self {
            gamma,
            c_theta,
            q,
            r,
            mu,
            sigma0,
            sigma_eta,
            actions,
            q_factor,
            r_factor,
            sigma0_factor,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn context_dim(&self) -> usize {
        self.c_theta.nrows()
    }

    pub fn num_arms(&self) -> usize {
        self.actions.len()
    }

    /// Noiseless mean reward of each arm at state `z`.
    pub fn mean_rewards(&self, z: &Array1<f64>) -> Vec<f64> {
        self.actions.iter().map(|c| c.dot(z)).collect()
    }
}

/// Latent state of one simulation.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub z: Array1<f64>,
    pub round: u64,
}

/// Everything one round emits. Rewards are realized for *every* arm; the
/// policy under test only gets to see the one it picked, while regret
/// accounting uses the realized reward of the optimal arm.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub context: Array1<f64>,
    pub rewards: Vec<f64>,
    pub optimal_arm: usize,
    pub optimal_reward: f64,
    /// Noiseless ⟨c_{a*}, z⟩, kept as an auxiliary metric alongside the
    /// realized optimal reward.
    pub optimal_mean: f64,
}

/// The banded matrix `T` behind the benchmark systems:
/// `T[i,j] = 2^(-psi·|i-j|)` above the diagonal and `-2^(-psi·|i-j|)` on
/// and below it (1-based indices).
pub fn banded_test_matrix(psi: f64, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| {
        let mag = 2f64.powf(-psi * (i as f64 - j as f64).abs());
        if i < j {
            mag
        } else {
            -mag
        }
    })
}

/// Builds the benchmark LGDS for a given `psi`: the banded `T` rescaled to
/// spectral radius 0.99, a scalar context observing the first state
/// coordinate, unit noise everywhere, and the last two basis vectors as
/// the action set.
pub fn make_psi_system(psi: f64, d: usize) -> Result<EnvParams, EnvError> {
    if !(psi > 0.0) {
        return Err(EnvError::Domain(format!("psi must be positive, got {psi}")));
    }
    if d < 2 {
        return Err(EnvError::Domain("need d >= 2 for the two-arm action set".into()));
    }
    let t = banded_test_matrix(psi, d);
    let rho = numerics::spectral_radius(&t.view())?;
    let gamma = t.mapv(|v| v * 0.99 / rho);
    let mut c_theta = Array2::<f64>::zeros((1, d));
    c_theta[[0, 0]] = 1.0;
    let mut e_second_last = Array1::<f64>::zeros(d);
    e_second_last[d - 2] = 1.0;
    let mut e_last = Array1::<f64>::zeros(d);
    e_last[d - 1] = 1.0;
    EnvParams::new(
        gamma,
        c_theta,
        Array2::eye(d),
        Array2::eye(1),
        Array1::zeros(d),
        Array2::eye(d),
        1.0,
        vec![e_second_last, e_last],
    )
}

/// Draws `z0 ~ N(0, Σ0)` and advances the state `rounds` steps without
/// emitting observations, leaving it near its stationary distribution.
pub fn burn_in<R: Rng + ?Sized>(params: &EnvParams, rounds: u64, rng: &mut R) -> EnvState {
    let zero = Array1::<f64>::zeros(params.state_dim());
    let mut z = numerics::sample_with_factor(&zero.view(), &params.sigma0_factor.view(), rng);
    for _ in 0..rounds {
        z = advance(params, &z, rng);
    }
    EnvState { z, round: 0 }
}

fn advance<R: Rng + ?Sized>(params: &EnvParams, z: &Array1<f64>, rng: &mut R) -> Array1<f64> {
    let xi = numerics::sample_with_factor(&params.mu.view(), &params.q_factor.view(), rng);
    params.gamma.dot(z) + xi
}

/// Emits one round (context + per-arm rewards) and advances the state.
///
/// Noise draw order is fixed — context noise, then one reward noise per
/// arm, then the process noise — so a seeded stream reproduces the exact
/// same trajectory.
pub fn step<R: Rng + ?Sized>(
    params: &EnvParams,
    state: &EnvState,
    rng: &mut R,
) -> (EnvState, RoundOutcome) {
    let zero_m = Array1::<f64>::zeros(params.context_dim());
    let phi = numerics::sample_with_factor(&zero_m.view(), &params.r_factor.view(), rng);
    let context = params.c_theta.dot(&state.z) + phi;

    let means = params.mean_rewards(&state.z);
    let rewards: Vec<f64> = means
        .iter()
        .map(|m| m + params.sigma_eta * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let optimal_arm = argmax_lowest(&means).expect("at least one action");

    let outcome = RoundOutcome {
        context,
        optimal_reward: rewards[optimal_arm],
        optimal_mean: means[optimal_arm],
        rewards,
        optimal_arm,
    };
    let next = EnvState {
        z: advance(params, &state.z, rng),
        round: state.round + 1,
    };
    (next, outcome)
}

/// Runs `horizon` rounds from `state`, collecting the outcome tape that
/// every policy in a simulation replays (common random numbers).
pub fn simulate_tape<R: Rng + ?Sized>(
    params: &EnvParams,
    state: EnvState,
    horizon: u64,
    rng: &mut R,
) -> Vec<RoundOutcome> {
    let mut tape = Vec::with_capacity(horizon as usize);
    let mut s = state;
    for _ in 0..horizon {
        let (next, outcome) = step(params, &s, rng);
        tape.push(outcome);
        s = next;
    }
    tape
}

/// Stationary state covariance `Z = ΓZΓᵀ + Q` of the system.
pub fn stationary_state_cov(params: &EnvParams) -> Result<Array2<f64>, EnvError> {
    Ok(numerics::solve_lyapunov(
        &params.gamma.view(),
        &params.q.view(),
    )?)
}

/// Convenience for tests and diagnostics: a copy of `params` with every
/// noise source silenced.
pub fn noiseless(params: &EnvParams) -> EnvParams {
    let d = params.state_dim();
    let m = params.context_dim();
    EnvParams::new(
        params.gamma.clone(),
        params.c_theta.clone(),
        Array2::zeros((d, d)),
        Array2::zeros((m, m)),
        params.mu.clone(),
        Array2::zeros((d, d)),
        0.0,
        params.actions.clone(),
    )
    .expect("silencing noise keeps params valid")
}
