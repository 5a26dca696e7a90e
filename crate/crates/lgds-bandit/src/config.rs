//! Experiment configuration: a TOML file with nested sections, plus CLI
//! overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ares::AresConfig;
use crate::regressor::{default_k_subg, BoundParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvironmentConfig,
    pub policies: PoliciesConfig,
    pub bounds: BoundsConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// Coupling-decay parameters of the banded test systems.
    pub psi: Vec<f64>,
    pub state_dim: usize,
    /// Rounds per simulation.
    pub horizon: u64,
    /// Rounds the latent state runs before the experiment starts.
    pub burn_in: u64,
    pub num_sims: u64,
    pub base_seed: u64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            psi: vec![1.0, 2.0, 3.0, 4.0],
            state_dim: 5,
            horizon: 5_000,
            burn_in: 10_000,
            num_sims: 50,
            base_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoliciesConfig {
    pub ids: Vec<String>,
    pub swucb: SwUcbConfig,
    pub rexp3: Rexp3Config,
}

impl Default for PoliciesConfig {
    fn default() -> Self {
        Self {
            ids: [
                "oracle", "ares", "ucb", "swucb", "rexp3", "random", "pies-s1", "pies-s10",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            swucb: SwUcbConfig::default(),
            rexp3: Rexp3Config::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwUcbConfig {
    /// Sliding window length τ.
    pub tau: usize,
    /// Bonus scale ξ.
    pub xi: f64,
}

impl Default for SwUcbConfig {
    fn default() -> Self {
        Self { tau: 500, xi: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rexp3Config {
    /// Batch length between restarts; 0 derives it from the horizon.
    pub batch: u64,
    /// Mixing rate γ; 0 derives it from the batch length.
    pub gamma: f64,
}

impl Default for Rexp3Config {
    fn default() -> Self {
        Self {
            batch: 0,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub delta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub s_max: usize,
    pub nu: f64,
    /// Residual-variance bound; omitted (None) means "compute
    /// max_a c_aᵀPc_a + σ_η² from the solved filter covariance".
    pub b_r: Option<f64>,
    pub b_g: f64,
    pub b_c: f64,
    pub c_tilde: f64,
    pub k_subg: f64,
    /// Refresh the exploration penalty of every arm's window cost each
    /// round (default: only the pulled arm's, which can go stale).
    pub refresh_all_costs: bool,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            lambda: 1.0,
            alpha: 0.99,
            s_max: 10,
            nu: 0.1,
            b_r: None,
            b_g: 100.0,
            b_c: 1.0,
            c_tilde: 1.0,
            k_subg: default_k_subg(),
            refresh_all_costs: false,
        }
    }
}

impl BoundsConfig {
    /// Bound parameters with B_R resolved for a concrete system.
    pub fn bound_params(&self, resolved_b_r: f64) -> BoundParams {
        BoundParams {
            delta: self.delta,
            lambda: self.lambda,
            b_r: resolved_b_r,
            b_g: self.b_g,
            b_c: self.b_c,
            nu: self.nu,
            alpha: self.alpha,
            c_tilde: self.c_tilde,
            k_subg: self.k_subg,
        }
    }

    pub fn ares_config(&self, resolved_b_r: f64) -> AresConfig {
        AresConfig {
            s_max: self.s_max,
            bounds: self.bound_params(resolved_b_r),
            refresh_all_costs: self.refresh_all_costs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Adds true-system diagnostic columns (confidence radii) to the
    /// per-arm diagnostics output.
    pub instrumented: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            instrumented: false,
        }
    }
}

/// CLI-level overrides layered on top of the file (or defaults).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub psi: Option<Vec<f64>>,
    pub rounds: Option<u64>,
    pub sims: Option<u64>,
    pub seed: Option<u64>,
    pub policies: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub instrumented: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(psi) = &o.psi {
            self.environment.psi = psi.clone();
        }
        if let Some(rounds) = o.rounds {
            self.environment.horizon = rounds;
        }
        if let Some(sims) = o.sims {
            self.environment.num_sims = sims;
        }
        if let Some(seed) = o.seed {
            self.environment.base_seed = seed;
        }
        if let Some(policies) = &o.policies {
            self.policies.ids = policies.clone();
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        if o.instrumented {
            self.output.instrumented = true;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let env = &self.environment;
        if env.horizon < 1 {
            return Err(ConfigError::Invalid("horizon must be at least 1".into()));
        }
        if env.num_sims < 1 {
            return Err(ConfigError::Invalid("num_sims must be at least 1".into()));
        }
        if env.psi.is_empty() {
            return Err(ConfigError::Invalid("need at least one psi value".into()));
        }
        if env.psi.iter().any(|&p| !(p > 0.0)) {
            return Err(ConfigError::Invalid("psi values must be positive".into()));
        }
        if env.state_dim < 2 {
            return Err(ConfigError::Invalid("state_dim must be at least 2".into()));
        }
        if self.policies.ids.is_empty() {
            return Err(ConfigError::Invalid("need at least one policy".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.policies.ids {
            if !seen.insert(id.clone()) {
                return Err(ConfigError::Invalid(format!("duplicate policy id `{id}`")));
            }
            let known = matches!(
                id.as_str(),
                "oracle" | "ucb" | "swucb" | "rexp3" | "random" | "ares"
            ) || id
                .strip_prefix("pies-s")
                .is_some_and(|s| s.parse::<usize>().is_ok_and(|v| v >= 1));
            if !known {
                return Err(ConfigError::Invalid(format!("unknown policy id `{id}`")));
            }
        }
        let b = &self.bounds;
        if !(b.delta > 0.0 && b.delta < 1.0) {
            return Err(ConfigError::Invalid("delta must lie in (0, 1)".into()));
        }
        if !(b.lambda > 0.0) {
            return Err(ConfigError::Invalid("lambda must be positive".into()));
        }
        if !(b.alpha > 0.0 && b.alpha < 1.0) {
            return Err(ConfigError::Invalid("alpha must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&b.nu) {
            return Err(ConfigError::Invalid("nu must lie in [0, 1]".into()));
        }
        if let Some(b_r) = b.b_r {
            if !(b_r > 0.0) {
                return Err(ConfigError::Invalid("b_r must be positive".into()));
            }
        }
        if self.policies.swucb.tau < 1 {
            return Err(ConfigError::Invalid("swucb window must be >= 1".into()));
        }
        Ok(())
    }
}
