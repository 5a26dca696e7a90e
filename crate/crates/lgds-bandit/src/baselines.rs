//! Comparison policies and the shared per-round policy contract.
//!
//! Every policy follows the same loop the environment tape drives:
//! `select` an arm using everything observed so far, then `update` with
//! the chosen arm's realized reward and the context of the round. The
//! context arrives after the choice — predictions for round t only ever
//! see θ_1..θ_{t-1}.
//!
//! Policies are registered by string id: `oracle`, `ucb`, `swucb`,
//! `rexp3`, `pies-s<j>`, `random`, `ares`.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::VecDeque;
use thiserror::Error;

use crate::ares::{Ares, AresConfig};
use crate::env::EnvParams;
use crate::kalman::{self, KalmanState};
use crate::regressor::{ContextWindow, RegressorState};
use crate::support::argmax_lowest;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("unknown policy id `{0}`")]
    UnknownPolicy(String),
    #[error("invalid policy settings: {0}")]
    InvalidSettings(String),
}

/// Per-round snapshot of a policy's internals, taken after `select` and
/// before `update`. All fields optional; most baselines report nothing.
#[derive(Debug, Clone, Default)]
pub struct PolicyProbe {
    /// Perturbation u_a per arm (adaptive policies).
    pub per_arm_u: Option<Vec<f64>>,
    /// Chosen window s_a per arm (adaptive policies).
    pub per_arm_s: Option<Vec<usize>>,
    /// (arm, window, predicted reward) for windowed predictors.
    pub predictions: Vec<(usize, usize, f64)>,
}

/// The contract every policy implements; one instance per simulation.
pub trait Policy: Send {
    /// Picks the arm for the upcoming round.
    fn select(&mut self) -> usize;
    /// Absorbs the played round: the chosen arm's reward and the round's
    /// context (observed regardless of the choice).
    fn update(&mut self, arm: usize, reward: f64, context: &Array1<f64>);
    /// Diagnostics hook; called between `select` and `update`.
    fn probe(&self) -> PolicyProbe {
        PolicyProbe::default()
    }
    /// Instrumented runs need direct access to the adaptive policy's
    /// regressor bank; everything else reports `None`.
    fn as_ares(&self) -> Option<&Ares> {
        None
    }
}

// ---------------------------------------------------------------------
// Oracle: full knowledge of the system, Kalman one-step prediction.
// ---------------------------------------------------------------------

/// Runs the time-varying Kalman filter on the context stream and plays
/// the arm with the highest predicted reward.
pub struct OraclePolicy {
    params: EnvParams,
    kf: KalmanState,
}

impl OraclePolicy {
    pub fn new(params: EnvParams) -> Self {
        let kf = KalmanState::init(&params);
        Self { params, kf }
    }
}

impl Policy for OraclePolicy {
    fn select(&mut self) -> usize {
        kalman::oracle_select(&self.params, &self.kf)
    }

    fn update(&mut self, _arm: usize, _reward: f64, context: &Array1<f64>) {
        self.kf = kalman::kf_step(&self.params, &self.kf, context)
            .expect("innovation covariance stays invertible for SPD R");
    }
}

// ---------------------------------------------------------------------
// UCB with a δ-based bonus.
// ---------------------------------------------------------------------

pub struct Ucb {
    delta: f64,
    counts: Vec<u64>,
    sums: Vec<f64>,
}

impl Ucb {
    pub fn new(num_arms: usize, delta: f64) -> Self {
        Self {
            delta,
            counts: vec![0; num_arms],
            sums: vec![0.0; num_arms],
        }
    }
}

impl Policy for Ucb {
    fn select(&mut self) -> usize {
        if let Some(arm) = self.counts.iter().position(|&c| c == 0) {
            return arm;
        }
        let bonus_num = 2.0 * (1.0 / self.delta).ln();
        let scores: Vec<f64> = self
            .counts
            .iter()
            .zip(&self.sums)
            .map(|(&c, &s)| s / c as f64 + (bonus_num / c as f64).sqrt())
            .collect();
        argmax_lowest(&scores).expect("at least one arm")
    }

    fn update(&mut self, arm: usize, reward: f64, _context: &Array1<f64>) {
        self.counts[arm] += 1;
        self.sums[arm] += reward;
    }
}

// ---------------------------------------------------------------------
// Sliding-window UCB.
// ---------------------------------------------------------------------

pub struct SwUcb {
    tau: usize,
    xi: f64,
    round: u64,
    history: VecDeque<(usize, f64)>,
    win_counts: Vec<u64>,
    win_sums: Vec<f64>,
}

impl SwUcb {
    pub fn new(num_arms: usize, tau: usize, xi: f64) -> Self {
        assert!(tau >= 1, "window must be at least one round");
        Self {
            tau,
            xi,
            round: 0,
            history: VecDeque::with_capacity(tau + 1),
            win_counts: vec![0; num_arms],
            win_sums: vec![0.0; num_arms],
        }
    }
}

impl Policy for SwUcb {
    fn select(&mut self) -> usize {
        // Arms with no pulls inside the window are treated as unpulled.
        if let Some(arm) = self.win_counts.iter().position(|&c| c == 0) {
            return arm;
        }
        let t = self.round + 1;
        let horizon = (t.min(self.tau as u64)) as f64;
        let scores: Vec<f64> = self
            .win_counts
            .iter()
            .zip(&self.win_sums)
            .map(|(&c, &s)| s / c as f64 + self.xi * (horizon.ln().max(0.0) / c as f64).sqrt())
            .collect();
        argmax_lowest(&scores).expect("at least one arm")
    }

    fn update(&mut self, arm: usize, reward: f64, _context: &Array1<f64>) {
        self.history.push_back((arm, reward));
        self.win_counts[arm] += 1;
        self.win_sums[arm] += reward;
        if self.history.len() > self.tau {
            let (old_arm, old_reward) = self.history.pop_front().expect("non-empty");
            self.win_counts[old_arm] -= 1;
            self.win_sums[old_arm] -= old_reward;
        }
        self.round += 1;
    }
}

// ---------------------------------------------------------------------
// Rexp3: Exp3 with periodic restarts and reward clipping.
// ---------------------------------------------------------------------

pub struct Rexp3 {
    gamma: f64,
    batch_len: u64,
    clip: f64,
    weights: Vec<f64>,
    last_probs: Vec<f64>,
    rounds_in_batch: u64,
    rng: ChaCha12Rng,
}

impl Rexp3 {
    /// `clip` maps rewards from [-clip, clip] onto [0, 1] (clamped).
    pub fn new(num_arms: usize, gamma: f64, batch_len: u64, clip: f64, seed: u64) -> Self {
        assert!(batch_len >= 1);
        assert!(clip > 0.0);
        let k = num_arms;
        Self {
            gamma,
            batch_len,
            clip,
            weights: vec![1.0 / k as f64; k],
            last_probs: vec![1.0 / k as f64; k],
            rounds_in_batch: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Literature defaults for an n-round horizon: batch length
    /// ⌈(k·ln k·n²)^(1/3)⌉ clamped to [50, n], mixing rate
    /// min{1, √(k·ln k/((e-1)·batch))}.
    pub fn defaults(num_arms: usize, horizon: u64) -> (u64, f64) {
        let k = num_arms as f64;
        let klogk = (k * k.ln()).max(f64::MIN_POSITIVE);
        let batch = (klogk * (horizon as f64).powi(2)).cbrt().ceil() as u64;
        let batch = batch.clamp(50, horizon.max(50));
        let gamma = (klogk / ((std::f64::consts::E - 1.0) * batch as f64))
            .sqrt()
            .min(1.0);
        (batch, gamma)
    }

    fn probabilities(&self) -> Vec<f64> {
        let k = self.weights.len() as f64;
        let total: f64 = self.weights.iter().sum();
        self.weights
            .iter()
            .map(|w| (1.0 - self.gamma) * w / total + self.gamma / k)
            .collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Policy for Rexp3 {
    fn select(&mut self) -> usize {
        if self.rounds_in_batch >= self.batch_len {
            // Restart: forget everything learned in the previous batch.
            let k = self.weights.len();
            self.weights = vec![1.0 / k as f64; k];
            self.rounds_in_batch = 0;
        }
        self.last_probs = self.probabilities();
        let draw: f64 = self.rng.random();
        let mut acc = 0.0;
        for (arm, p) in self.last_probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                return arm;
            }
        }
        self.last_probs.len() - 1
    }

    fn update(&mut self, arm: usize, reward: f64, _context: &Array1<f64>) {
        let k = self.weights.len() as f64;
        let x = ((reward + self.clip) / (2.0 * self.clip)).clamp(0.0, 1.0);
        let x_hat = x / self.last_probs[arm];
        self.weights[arm] *= (self.gamma * x_hat / k).exp();
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
        self.rounds_in_batch += 1;
    }
}

// ---------------------------------------------------------------------
// PIES: fixed window, round-robin exploration phase, then greedy.
// ---------------------------------------------------------------------

pub struct Pies {
    s: usize,
    num_arms: usize,
    round: u64,
    regressors: Vec<RegressorState>,
    window: ContextWindow,
}

impl Pies {
    pub fn new(num_arms: usize, context_dim: usize, s: usize, lambda: f64) -> Self {
        assert!(s >= 1, "window must be at least 1");
        Self {
            s,
            num_arms,
            round: 0,
            regressors: (0..num_arms)
                .map(|_| RegressorState::new(s, context_dim, lambda))
                .collect(),
            window: ContextWindow::new(s),
        }
    }

    fn in_exploration(&self) -> bool {
        // First k·s rounds cycle through the arms (truncated by the
        // horizon if it is shorter).
        self.round < (self.num_arms * self.s) as u64
    }
}

impl Policy for Pies {
    fn select(&mut self) -> usize {
        if self.in_exploration() {
            (self.round % self.num_arms as u64) as usize
        } else if let Some(theta) = self.window.build_theta(self.s) {
            let preds: Vec<f64> = self
                .regressors
                .iter()
                .map(|r| r.predict(&theta.view()))
                .collect();
            argmax_lowest(&preds).expect("at least one arm")
        } else {
            (self.round % self.num_arms as u64) as usize
        }
    }

    fn update(&mut self, arm: usize, reward: f64, context: &Array1<f64>) {
        if let Some(theta) = self.window.build_theta(self.s) {
            self.regressors[arm]
                .rls_update(&theta.view(), reward)
                .expect("environment rewards and contexts are finite");
        }
        self.window.push(context.clone());
        self.round += 1;
    }

    fn probe(&self) -> PolicyProbe {
        let mut probe = PolicyProbe::default();
        if let Some(theta) = self.window.build_theta(self.s) {
            probe.predictions = self
                .regressors
                .iter()
                .enumerate()
                .map(|(arm, r)| (arm, self.s, r.predict(&theta.view())))
                .collect();
        }
        probe
    }
}

// ---------------------------------------------------------------------
// Uniform random.
// ---------------------------------------------------------------------

pub struct RandomPolicy {
    num_arms: usize,
    rng: ChaCha12Rng,
}

impl RandomPolicy {
    pub fn new(num_arms: usize, seed: u64) -> Self {
        Self {
            num_arms,
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn select(&mut self) -> usize {
        self.rng.random_range(0..self.num_arms)
    }

    fn update(&mut self, _arm: usize, _reward: f64, _context: &Array1<f64>) {}
}

// ---------------------------------------------------------------------
// ARES behind the shared contract.
// ---------------------------------------------------------------------

impl Policy for Ares {
    fn select(&mut self) -> usize {
        self.select_windows();
        self.select_action()
    }

    fn update(&mut self, arm: usize, reward: f64, context: &Array1<f64>) {
        self.observe(arm, reward, context);
    }

    fn probe(&self) -> PolicyProbe {
        PolicyProbe {
            per_arm_u: Some(self.last_perturbations().to_vec()),
            per_arm_s: Some(self.chosen_windows().to_vec()),
            predictions: Vec::new(),
        }
    }

    fn as_ares(&self) -> Option<&Ares> {
        Some(self)
    }
}

// ---------------------------------------------------------------------
// Registry.
// ---------------------------------------------------------------------

/// Everything needed to instantiate any registered policy for one
/// simulation.
pub struct PolicySetup<'a> {
    pub params: &'a EnvParams,
    pub ares: AresConfig,
    pub horizon: u64,
    /// Sliding-window UCB settings (window, bonus scale).
    pub swucb_tau: usize,
    pub swucb_xi: f64,
    /// Rexp3 overrides; zero means "use the horizon-based default".
    pub rexp3_batch: u64,
    pub rexp3_gamma: f64,
    /// Reward clip for Rexp3, from the true stationary reward spread.
    pub reward_clip: f64,
    /// Seed for policies that randomize.
    pub seed: u64,
}

/// Builds a policy from its string id.
pub fn build_policy(id: &str, setup: &PolicySetup) -> Result<Box<dyn Policy>, PolicyError> {
    let k = setup.params.num_arms();
    let m = setup.params.context_dim();
    let bounds = &setup.ares.bounds;
    match id {
        "oracle" => Ok(Box::new(OraclePolicy::new(setup.params.clone()))),
        "ucb" => Ok(Box::new(Ucb::new(k, bounds.delta))),
        "swucb" => Ok(Box::new(SwUcb::new(k, setup.swucb_tau, setup.swucb_xi))),
        "rexp3" => {
            let (batch_default, gamma_default) = Rexp3::defaults(k, setup.horizon);
            let batch = if setup.rexp3_batch > 0 {
                setup.rexp3_batch
            } else {
                batch_default
            };
            let gamma = if setup.rexp3_gamma > 0.0 {
                setup.rexp3_gamma
            } else {
                gamma_default
            };
            Ok(Box::new(Rexp3::new(k, gamma, batch, setup.reward_clip, setup.seed)))
        }
        "random" => Ok(Box::new(RandomPolicy::new(k, setup.seed))),
        "ares" => Ok(Box::new(Ares::new(k, m, setup.ares.clone()))),
        _ => {
            if let Some(s_str) = id.strip_prefix("pies-s") {
                let s: usize = s_str.parse().map_err(|_| {
                    PolicyError::InvalidSettings(format!("bad PIES window in `{id}`"))
                })?;
                if s < 1 {
                    return Err(PolicyError::InvalidSettings(
                        "PIES window must be at least 1".into(),
                    ));
                }
                Ok(Box::new(Pies::new(k, m, s, bounds.lambda)))
            } else {
                Err(PolicyError::UnknownPolicy(id.to_string()))
            }
        }
    }
}

/// All ids `build_policy` accepts (PIES as a pattern).
pub const POLICY_IDS: &[&str] = &[
    "oracle", "ucb", "swucb", "rexp3", "pies-s<j>", "random", "ares",
];
