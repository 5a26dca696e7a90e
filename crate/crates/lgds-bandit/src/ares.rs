//! ARES: adaptive window selection plus perturbed action selection.
//!
//! Each round has two parts. Part 1 picks a window size per arm,
//! `s_a = argmin_s Ĵ_a(s)` over the bank of (arm, window) regressors,
//! and a shared `s = max_a s_a` that parameterizes every perturbation.
//! Part 2 scores each arm with its windowed prediction plus an optimism
//! perturbation `u_a = ê_a(δ,s)·√(Θ_tᵀV_a(s)⁻¹Θ_t)` and plays the argmax.
//!
//! `ê` is the radius cached at the arm's previous pull; it starts at a
//! large sentinel, which is what forces every arm to be tried before its
//! uncertainty has ever been measured. Before enough contexts are
//! buffered for the shared window, arms fall back to a sample-mean rule
//! with bonus `√(2·log(1/δ)/M_a)` (infinite while `M_a = 0`).

use ndarray::Array1;

use crate::regressor::{BoundParams, ContextWindow, RegressorState};
use crate::support::argmax_lowest;

#[derive(Debug, Clone)]
pub struct AresConfig {
    /// Largest window size considered; the bank holds s ∈ {0..s_max}.
    pub s_max: usize,
    pub bounds: BoundParams,
    /// When set, the exploration-penalty half of every arm's Ĵ is
    /// recomputed each round instead of only the chosen arm's. Off by
    /// default: unchosen arms' costs go stale until their next pull.
    pub refresh_all_costs: bool,
}

impl Default for AresConfig {
    fn default() -> Self {
        Self {
            s_max: 10,
            bounds: BoundParams::default(),
            refresh_all_costs: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ares {
    config: AresConfig,
    num_arms: usize,
    /// Bank of regressors, indexed [arm][s].
    regressors: Vec<Vec<RegressorState>>,
    window: ContextWindow,
    /// Warm-up pull counts per arm (rounds chosen while t < s_a).
    m_count: Vec<u64>,
    /// Post-warm-up pull counts per arm.
    n_count: Vec<u64>,
    /// Rounds at which each arm was pulled.
    pull_rounds: Vec<Vec<u64>>,
    /// Running reward sums backing the warm-up means.
    warm_sum: Vec<f64>,
    /// Current per-arm window choices and their maximum.
    chosen_s: Vec<usize>,
    s_shared: usize,
    /// Perturbations computed at the latest selection.
    last_u: Vec<f64>,
    /// Completed rounds; the upcoming round is `round + 1` (1-based).
    round: u64,
}

impl Ares {
    pub fn new(num_arms: usize, context_dim: usize, config: AresConfig) -> Self {
        assert!(num_arms >= 1, "need at least one arm");
        let regressors = (0..num_arms)
            .map(|_| {
                (0..=config.s_max)
                    .map(|s| RegressorState::new(s, context_dim, config.bounds.lambda))
                    .collect()
            })
            .collect();
        let window = ContextWindow::new(config.s_max);
        Self {
            num_arms,
            regressors,
            window,
            m_count: vec![0; num_arms],
            n_count: vec![0; num_arms],
            pull_rounds: vec![Vec::new(); num_arms],
            warm_sum: vec![0.0; num_arms],
            chosen_s: vec![0; num_arms],
            s_shared: 0,
            last_u: vec![0.0; num_arms],
            round: 0,
            config,
        }
    }

    pub fn config(&self) -> &AresConfig {
        &self.config
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    /// The round about to be played (1-based).
    pub fn current_round(&self) -> u64 {
        self.round + 1
    }

    pub fn chosen_windows(&self) -> &[usize] {
        &self.chosen_s
    }

    pub fn shared_window(&self) -> usize {
        self.s_shared
    }

    pub fn last_perturbations(&self) -> &[f64] {
        &self.last_u
    }

    pub fn pull_counts(&self) -> (&[u64], &[u64]) {
        (&self.m_count, &self.n_count)
    }

    pub fn pull_rounds(&self) -> &[Vec<u64>] {
        &self.pull_rounds
    }

    pub fn regressor(&self, arm: usize, s: usize) -> &RegressorState {
        &self.regressors[arm][s]
    }

    /// Part 1: per-arm `s_a = argmin_s Ĵ_a(s)` (ties toward the smallest
    /// s) and the shared `s = max_a s_a`.
    pub fn select_windows(&mut self) -> (Vec<usize>, usize) {
        for (arm, bank) in self.regressors.iter().enumerate() {
            let mut best = 0usize;
            for s in 1..bank.len() {
                if bank[s].j_hat < bank[best].j_hat {
                    best = s;
                }
            }
            self.chosen_s[arm] = best;
        }
        self.s_shared = self.chosen_s.iter().copied().max().unwrap_or(0);
        (self.chosen_s.clone(), self.s_shared)
    }

    /// True once enough contexts are buffered to build the shared-window
    /// Θ; before that every arm scores through the warm-up path.
    fn steady_ready(&self) -> bool {
        self.window.len() >= self.s_shared
    }

    /// Perturbation of one arm for the upcoming round: the cached radius
    /// times the shared-window uncertainty when ready, otherwise the
    /// warm-up bonus (infinite for a never-warm-pulled arm).
    pub fn perturbation(&self, arm: usize) -> f64 {
        let t = self.current_round();
        if t >= self.chosen_s[arm] as u64 && self.steady_ready() {
            let theta = self
                .window
                .build_theta(self.s_shared)
                .expect("steady_ready guarantees the shared window");
            let reg = &self.regressors[arm][self.s_shared];
            reg.e_cached * reg.quad_form(&theta.view()).sqrt()
        } else if self.m_count[arm] == 0 {
            f64::INFINITY
        } else {
            (2.0 * (1.0 / self.config.bounds.delta).ln() / self.m_count[arm] as f64).sqrt()
        }
    }

    /// Part 2: argmax over arms of prediction + perturbation. Steady arms
    /// predict with their own window `s_a`; warm arms use their running
    /// reward mean. Ties go to the lowest index.
    #[allow(clippy::needless_range_loop)]
    pub fn select_action(&mut self) -> usize {
        let t = self.current_round();
        let ready = self.steady_ready();
        let mut scores = vec![0.0; self.num_arms];
        for arm in 0..self.num_arms {
            let u = self.perturbation(arm);
            self.last_u[arm] = u;
            let base = if t >= self.chosen_s[arm] as u64 && ready {
                let s_a = self.chosen_s[arm];
                let theta = self
                    .window
                    .build_theta(s_a)
                    .expect("s_a <= shared window which is ready");
                self.regressors[arm][s_a].predict(&theta.view())
            } else {
                let pulls = self.pull_rounds[arm].len();
                if pulls == 0 {
                    0.0
                } else {
                    self.warm_sum[arm] / pulls as f64
                }
            };
            scores[arm] = base + u;
        }
        argmax_lowest(&scores).expect("at least one arm")
    }

    /// Absorbs the played round: pull bookkeeping, then for every window
    /// with enough history the chosen arm's cost smoothing, least-squares
    /// update, and radius re-cache. The context enters the shared ring
    /// last — predictions for round t only ever see θ_1..θ_{t-1}.
    pub fn observe(&mut self, arm: usize, reward: f64, context: &Array1<f64>) {
        let t = self.current_round();
        self.pull_rounds[arm].push(t);
        if t < self.chosen_s[arm] as u64 {
            self.m_count[arm] += 1;
        } else {
            self.n_count[arm] += 1;
        }
        self.warm_sum[arm] += reward;

        let bp = &self.config.bounds;
        let s_hi = self.config.s_max.min(t as usize);
        for s in 0..=s_hi {
            if let Some(theta) = self.window.build_theta(s) {
                let reg = &mut self.regressors[arm][s];
                reg.update_window_cost(&theta.view(), reward, bp);
                reg.rls_update(&theta.view(), reward)
                    .expect("environment rewards and contexts are finite");
            }
        }
        // Re-cache the radius across the pulled arm's whole bank: the
        // radius needs only V, so windows still waiting for history drop
        // off their forcing sentinel the first time the arm is tried.
        for reg in self.regressors[arm].iter_mut() {
            reg.update_e_cache(bp);
        }
        if self.config.refresh_all_costs {
            for other in 0..self.num_arms {
                if other == arm {
                    continue;
                }
                for s in 0..=s_hi {
                    if let Some(theta) = self.window.build_theta(s) {
                        self.regressors[other][s].refresh_cost_penalty(&theta.view(), bp);
                    }
                }
            }
        }
        self.window.push(context.clone());
        self.round += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, make_psi_system, EnvState};
    use crate::regressor::E_INIT;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn fresh(num_arms: usize) -> Ares {
        Ares::new(num_arms, 1, AresConfig::default())
    }

    #[test]
    fn equal_costs_pick_smallest_window() {
        let mut a = fresh(2);
        let (per_arm, shared) = a.select_windows();
        assert_eq!(per_arm, vec![0, 0]);
        assert_eq!(shared, 0);
    }

    #[test]
    fn shared_window_is_max_of_per_arm() {
        let mut a = fresh(2);
        for s in 0..=10 {
            a.regressors[0][s].j_hat = (s as f64 - 8.0).abs();
            a.regressors[1][s].j_hat = (s as f64 - 10.0).abs();
        }
        let (per_arm, shared) = a.select_windows();
        assert_eq!(per_arm, vec![8, 10]);
        assert_eq!(shared, 10);
    }

    #[test]
    fn decreasing_cost_selects_largest_window() {
        let mut a = fresh(1);
        for s in 0..=10 {
            a.regressors[0][s].j_hat = -(s as f64);
        }
        let (per_arm, shared) = a.select_windows();
        assert_eq!(per_arm, vec![10]);
        assert_eq!(shared, 10);
    }

    #[test]
    fn warm_perturbation_rules() {
        let mut a = Ares::new(
            2,
            1,
            AresConfig {
                bounds: BoundParams {
                    delta: (-2.0f64).exp(), // 2·ln(1/δ) = 4
                    ..BoundParams::default()
                },
                ..AresConfig::default()
            },
        );
        // Force the warm branch: a window choice larger than the round.
        a.regressors[0][5].j_hat = -1.0;
        a.regressors[1][5].j_hat = -1.0;
        a.select_windows();
        assert_eq!(a.shared_window(), 5);
        // Never pulled: the sentinel forces the arm.
        assert_eq!(a.perturbation(0), f64::INFINITY);
        // M_a = 4 with 2·ln(1/δ) = 4 gives exactly u = 1.
        a.m_count[1] = 4;
        assert_abs_diff_eq!(a.perturbation(1), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn steady_perturbation_at_fresh_gram_matrix() {
        // With V = λI the quadratic form is ‖Θ‖²/λ.
        let mut a = fresh(2);
        a.observe(0, 0.5, &arr1(&[2.0]));
        a.select_windows();
        // Arm 1 has never been pulled: V = λI at every s and ê is the
        // sentinel.
        let s = a.shared_window();
        let theta = a.window.build_theta(s).unwrap();
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let lambda = a.config.bounds.lambda;
        let u = a.perturbation(1);
        assert_abs_diff_eq!(u, E_INIT * norm / lambda.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn infinite_bonus_wins_selection() {
        let mut a = fresh(3);
        a.regressors.iter_mut().for_each(|bank| {
            bank.iter_mut().for_each(|r| r.j_hat = 1.0);
        });
        a.regressors[2][7].j_hat = 0.5; // chosen_s = [0, 0, 7] -> warm round
        a.select_windows();
        a.m_count[0] = 5;
        a.m_count[1] = 5;
        // Arm 2 still unpulled: must be forced.
        assert_eq!(a.select_action(), 2);
    }

    #[test]
    fn equal_bonus_prefers_higher_prediction_then_lowest_index() {
        let mut a = fresh(2);
        // One pull each so the warm means differ.
        a.regressors[0][4].j_hat = -1.0;
        a.regressors[1][4].j_hat = -1.0;
        a.select_windows();
        a.m_count = vec![3, 3];
        a.warm_sum = vec![1.0, 0.5];
        a.pull_rounds[0].push(1);
        a.pull_rounds[1].push(2);
        assert_eq!(a.select_action(), 0);
        // Equal everything ties to the lowest index.
        a.warm_sum = vec![0.5, 0.5];
        assert_eq!(a.select_action(), 0);
        // Adding a common constant to every warm mean changes nothing.
        a.warm_sum = vec![0.5 + 17.0, 0.5 + 17.0];
        assert_eq!(a.select_action(), 0);
    }

    #[test]
    fn first_round_updates_only_intercept_regressor() {
        let mut a = fresh(2);
        a.select_windows();
        let arm = a.select_action();
        assert_eq!(arm, 0, "fresh state ties to the first arm");
        a.observe(arm, 1.5, &arr1(&[0.3]));
        assert_eq!(a.regressors[0][0].n_obs, 1);
        for s in 1..=10 {
            assert_eq!(a.regressors[0][s].n_obs, 0, "no history for s={s}");
        }
        assert_eq!(a.pull_rounds[0], vec![1]);
    }

    #[test]
    fn pull_accounting_identity() {
        let params = make_psi_system(2.0, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut state = env::burn_in(&params, 100, &mut rng);
        let mut a = fresh(2);
        let n = 300;
        for _ in 0..n {
            a.select_windows();
            let arm = a.select_action();
            let (next, out) = env::step(&params, &state, &mut rng);
            a.observe(arm, out.rewards[arm], &out.context);
            state = next;
        }
        let (m, nn) = a.pull_counts();
        let mut total = 0;
        for arm in 0..2 {
            assert_eq!(
                m[arm] + nn[arm],
                a.pull_rounds()[arm].len() as u64,
                "M + N must equal the pull count"
            );
            total += a.pull_rounds()[arm].len();
        }
        assert_eq!(total, n, "every round pulls exactly one arm");
    }

    #[test]
    fn every_arm_tried_early() {
        let params = make_psi_system(1.0, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut state = env::burn_in(&params, 100, &mut rng);
        let k = 2;
        let mut a = fresh(k);
        for _ in 0..k {
            a.select_windows();
            let arm = a.select_action();
            let (next, out) = env::step(&params, &state, &mut rng);
            a.observe(arm, out.rewards[arm], &out.context);
            state = next;
        }
        for arm in 0..k {
            assert!(
                !a.pull_rounds()[arm].is_empty(),
                "arm {arm} must be pulled within the first k rounds"
            );
        }
    }

    #[test]
    fn dominant_window_wins_and_stays() {
        let mut a = fresh(2);
        for _ in 0..20 {
            for bank in a.regressors.iter_mut() {
                for (s, reg) in bank.iter_mut().enumerate() {
                    reg.j_hat = if s == 6 { 0.1 } else { 1.0 };
                }
            }
            let (per_arm, shared) = a.select_windows();
            assert_eq!(per_arm, vec![6, 6]);
            assert_eq!(shared, 6);
        }
    }

    #[test]
    fn deterministic_given_identical_tapes() {
        let params = make_psi_system(3.0, 5).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let state = env::burn_in(&params, 50, &mut rng);
            let tape = env::simulate_tape(&params, state, 200, &mut rng);
            let mut a = fresh(2);
            for out in &tape {
                a.select_windows();
                let arm = a.select_action();
                a.observe(arm, out.rewards[arm], &out.context);
            }
            a.pull_rounds().to_vec()
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn commits_under_constant_noiseless_state() {
        // Frozen state, exact rewards: after its exploration phase the
        // policy must lock onto the better arm and stop accruing regret.
        let params = crate::env::EnvParams::new(
            Array2::eye(2),
            arr2(&[[1.0, 0.0]]),
            Array2::zeros((2, 2)),
            Array2::zeros((1, 1)),
            arr1(&[0.0, 0.0]),
            Array2::zeros((2, 2)),
            0.0,
            vec![arr1(&[1.0, 0.0]), arr1(&[0.0, 1.0])],
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        // Reward gap 2.0: wide enough for the shrinking bonus to cross
        // within the horizon.
        let mut state = EnvState {
            z: arr1(&[2.0, 0.0]),
            round: 0,
        };
        let mut a = Ares::new(
            2,
            1,
            AresConfig {
                s_max: 2,
                bounds: BoundParams {
                    b_g: 1.0,
                    ..BoundParams::default()
                },
                refresh_all_costs: false,
            },
        );
        let mut regret = vec![0.0];
        for _ in 0..500 {
            a.select_windows();
            let arm = a.select_action();
            let (next, out) = env::step(&params, &state, &mut rng);
            regret.push(regret.last().unwrap() + (out.optimal_reward - out.rewards[arm]));
            a.observe(arm, out.rewards[arm], &out.context);
            state = next;
        }
        assert_eq!(
            regret[500], regret[200],
            "no regret growth after commitment: {:?}",
            &regret[195..205]
        );
    }
}
