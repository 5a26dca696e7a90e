//! Time-varying and steady-state Kalman filters for the LGDS, and the
//! action selection rule of the full-knowledge Oracle baseline.
//!
//! The Oracle runs the time-varying filter on the context stream only
//! (never on chosen-arm rewards) and picks the arm with the highest
//! one-step reward prediction ⟨c_a, ẑ_{t|t-1}⟩.

use ndarray::{Array1, Array2};

use crate::env::EnvParams;
use crate::numerics::{self, Cholesky, NumericsError};
use crate::support::argmax_lowest;

/// State of the time-varying filter. `z_pred`/`p_pred` refer to the next
/// unobserved round, `z_filt`/`p_filt` and `gain` to the last round whose
/// context has been absorbed.
#[derive(Debug, Clone)]
pub struct KalmanState {
    pub z_pred: Array1<f64>,
    pub p_pred: Array2<f64>,
    pub gain: Array2<f64>,
    pub z_filt: Array1<f64>,
    pub p_filt: Array2<f64>,
}

impl KalmanState {
    /// Filter initialization: zero state estimate, prior covariance Σ0.
    pub fn init(params: &EnvParams) -> Self {
        let d = params.state_dim();
        let m = params.context_dim();
        Self {
            z_pred: Array1::zeros(d),
            p_pred: params.sigma0.clone(),
            gain: Array2::zeros((d, m)),
            z_filt: Array1::zeros(d),
            p_filt: params.sigma0.clone(),
        }
    }
}

/// One measurement + time update. Absorbs the context of the current
/// round and rolls the prediction to the next one.
///
/// Fails if the innovation covariance `C P Cᵀ + R` is numerically
/// singular.
pub fn kf_step(
    params: &EnvParams,
    state: &KalmanState,
    theta: &Array1<f64>,
) -> Result<KalmanState, NumericsError> {
    let c = &params.c_theta;
    let cp = c.dot(&state.p_pred); // m x d
    let mut innov_cov = cp.dot(&c.t()) + &params.r;
    numerics::symmetrize(&mut innov_cov);
    let chol = Cholesky::new(&innov_cov.view())?;
    let gain = chol.solve_mat(&cp.view()).t().to_owned(); // P Cᵀ S⁻¹, d x m

    let innovation = theta - &c.dot(&state.z_pred);
    let z_filt = &state.z_pred + &gain.dot(&innovation);
    let mut p_filt = &state.p_pred - &gain.dot(&cp);
    numerics::symmetrize(&mut p_filt);

    let z_pred = params.gamma.dot(&z_filt) + &params.mu;
    let mut p_pred = params.gamma.dot(&p_filt).dot(&params.gamma.t()) + &params.q;
    numerics::symmetrize(&mut p_pred);

    Ok(KalmanState {
        z_pred,
        p_pred,
        gain,
        z_filt,
        p_filt,
    })
}

/// Oracle action choice: the arm whose predicted reward ⟨c_a, ẑ⟩ is
/// largest, ties toward the lowest index.
pub fn oracle_select(params: &EnvParams, state: &KalmanState) -> usize {
    let preds = params.mean_rewards(&state.z_pred);
    argmax_lowest(&preds).expect("at least one action")
}

/// Steady-state filter: the limit gain from the Riccati equation and the
/// Schur-stable closed-loop matrix `Γ - ΓKC_θ` that drives the windowed
/// linear model.
#[derive(Debug, Clone)]
pub struct SteadyKalman {
    pub gain: Array2<f64>,
    pub p: Array2<f64>,
    pub closed_loop: Array2<f64>,
}

impl SteadyKalman {
    pub fn new(params: &EnvParams) -> Result<Self, NumericsError> {
        let sol = numerics::solve_dare(
            &params.gamma.view(),
            &params.c_theta.view(),
            &params.q.view(),
            &params.r.view(),
        )?;
        let closed_loop = &params.gamma - &params.gamma.dot(&sol.gain).dot(&params.c_theta);
        Ok(Self {
            gain: sol.gain,
            p: sol.p,
            closed_loop,
        })
    }
}

/// One step of the steady-state predictor: `Γẑ + μ + ΓK(θ - C_θẑ)`.
pub fn steady_filter_step(
    sk: &SteadyKalman,
    params: &EnvParams,
    z_hat: &Array1<f64>,
    theta: &Array1<f64>,
) -> Array1<f64> {
    let innovation = theta - &params.c_theta.dot(z_hat);
    params.gamma.dot(z_hat) + &params.mu + params.gamma.dot(&sk.gain.dot(&innovation))
}
