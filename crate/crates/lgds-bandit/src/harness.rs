//! Experiment orchestration: seeded parallel simulation over (ψ, sim)
//! cells, regret aggregation, and CSV/JSON emission.
//!
//! Within one simulation every policy replays the identical
//! environment realization (a pre-generated outcome tape), so paired
//! comparisons across policies are common-random-number comparisons.
//! Determinism: the cell seed is a pure function of (base seed, ψ index,
//! sim index); policies that randomize derive their stream from the cell
//! seed and their own id, so reordering the policy list changes nothing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::baselines::{build_policy, PolicyError, PolicySetup};
use crate::config::ExperimentConfig;
use crate::env::{self, EnvError, EnvParams};
use crate::kalman::SteadyKalman;
use crate::numerics::NumericsError;
use crate::regressor::{self, BoundParams, OracleDiagnostics};
use crate::support::splitmix64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One row of a policy trace.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub round: u64,
    pub arm: usize,
    pub reward: f64,
    pub optimal_reward: f64,
}

/// Prefix sums of the per-round pseudo-regret X* - X.
pub fn compute_regret(trace: &[RunRecord]) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for rec in trace {
        acc += rec.optimal_reward - rec.reward;
        out.push(acc);
    }
    out
}

/// Nearest-rank quantile of an unsorted sample (q in (0, 1]).
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in samples"));
    let rank = ((q * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank.min(sorted.len()) - 1]
}

/// Everything fixed about one ψ system across its simulations.
pub struct SystemContext {
    pub psi: f64,
    pub params: EnvParams,
    pub steady: SteadyKalman,
    pub z_cov: Array2<f64>,
    pub bounds: BoundParams,
    /// Resolved residual-variance bound (squared): max_a c_aᵀPc_a + σ_η².
    pub b_r_squared: f64,
    pub reward_clip: f64,
    pub rexp3_batch: u64,
    pub rexp3_gamma: f64,
}

impl SystemContext {
    pub fn build(psi: f64, config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let params = env::make_psi_system(psi, config.environment.state_dim)?;
        let steady = SteadyKalman::new(&params)?;
        let z_cov = env::stationary_state_cov(&params)?;
        let max_cpc = params
            .actions
            .iter()
            .map(|c| c.dot(&steady.p.dot(c)))
            .fold(f64::NEG_INFINITY, f64::max);
        let b_r_squared = max_cpc + params.sigma_eta * params.sigma_eta;
        let b_r = config.bounds.b_r.unwrap_or_else(|| b_r_squared.sqrt());
        let bounds = config.bounds.bound_params(b_r);
        let max_action_norm = params
            .actions
            .iter()
            .map(|c| c.dot(c).sqrt())
            .fold(0.0f64, f64::max);
        if max_action_norm > bounds.b_c + 1e-12 {
            return Err(crate::config::ConfigError::Invalid(format!(
                "b_c = {} does not bound the action norms (max {max_action_norm})",
                bounds.b_c
            ))
            .into());
        }
        let max_czc = params
            .actions
            .iter()
            .map(|c| c.dot(&z_cov.dot(c)))
            .fold(f64::NEG_INFINITY, f64::max);
        let reward_clip = 3.0 * (max_czc + params.sigma_eta * params.sigma_eta).sqrt();
        let (batch_default, gamma_default) =
            crate::baselines::Rexp3::defaults(params.num_arms(), config.environment.horizon);
        let rexp3_batch = if config.policies.rexp3.batch > 0 {
            config.policies.rexp3.batch
        } else {
            batch_default
        };
        let rexp3_gamma = if config.policies.rexp3.gamma > 0.0 {
            config.policies.rexp3.gamma
        } else {
            gamma_default
        };
        Ok(Self {
            psi,
            params,
            steady,
            z_cov,
            bounds,
            b_r_squared,
            reward_clip,
            rexp3_batch,
            rexp3_gamma,
        })
    }
}

/// Deterministic seed of one (ψ index, sim) cell.
pub fn cell_seed(base_seed: u64, psi_index: usize, sim: u64) -> u64 {
    base_seed ^ splitmix64(((psi_index as u64) << 32) ^ sim)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Policy stream seed: independent of the policy's position in the list.
fn policy_seed(cell: u64, id: &str) -> u64 {
    splitmix64(cell ^ fnv1a(id.as_bytes()))
}

/// Raw results of one (ψ, sim) cell.
pub struct CellOutput {
    pub sim: u64,
    /// Cumulative pseudo-regret per policy per round.
    pub regret: Vec<Vec<f64>>,
    /// Adaptive-policy diagnostics, [round][arm]; empty when no `ares`.
    pub ares_u: Vec<Vec<f64>>,
    pub ares_s: Vec<Vec<f64>>,
    /// Instrumented radii, [round][arm]; empty unless requested.
    pub ares_e: Vec<Vec<f64>>,
    pub ares_b: Vec<Vec<f64>>,
    /// Per fixed-window policy: (window, [round][arm] |X_a - pred_a|,
    /// NaN while the window has no prediction yet).
    pub residuals: Vec<(usize, Vec<Vec<f64>>)>,
}

/// Runs every configured policy over one simulation's shared tape.
#[allow(clippy::needless_range_loop)]
pub fn run_cell(
    ctx: &SystemContext,
    config: &ExperimentConfig,
    psi_index: usize,
    sim: u64,
) -> Result<CellOutput, HarnessError> {
    let seed = cell_seed(config.environment.base_seed, psi_index, sim);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let state = env::burn_in(&ctx.params, config.environment.burn_in, &mut rng);
    let tape = env::simulate_tape(&ctx.params, state, config.environment.horizon, &mut rng);

    let horizon = tape.len();
    let k = ctx.params.num_arms();
    let instrumented = config.output.instrumented;
    let diag_bank: Vec<Vec<OracleDiagnostics>> = if instrumented {
        (0..k)
            .map(|arm| {
                (0..=config.bounds.s_max)
                    .map(|s| {
                        OracleDiagnostics::for_arm(&ctx.params, &ctx.steady, &ctx.bounds, arm, s)
                            .expect("diagnostics for a solvable system")
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut out = CellOutput {
        sim,
        regret: Vec::with_capacity(config.policies.ids.len()),
        ares_u: Vec::new(),
        ares_s: Vec::new(),
        ares_e: Vec::new(),
        ares_b: Vec::new(),
        residuals: Vec::new(),
    };

    for id in &config.policies.ids {
        let setup = PolicySetup {
            params: &ctx.params,
            ares: config.bounds.ares_config(ctx.bounds.b_r),
            horizon: config.environment.horizon,
            swucb_tau: config.policies.swucb.tau,
            swucb_xi: config.policies.swucb.xi,
            rexp3_batch: ctx.rexp3_batch,
            rexp3_gamma: ctx.rexp3_gamma,
            reward_clip: ctx.reward_clip,
            seed: policy_seed(seed, id),
        };
        let mut policy = build_policy(id, &setup)?;
        let is_ares = id == "ares";
        let is_pies = id.starts_with("pies-s");
        let mut curve = Vec::with_capacity(horizon);
        let mut pies_resid: Vec<Vec<f64>> = Vec::new();
        let mut cum = 0.0;
        for out_round in &tape {
            let arm = policy.select();
            if is_ares {
                let probe = policy.probe();
                if let (Some(u), Some(s)) = (probe.per_arm_u, probe.per_arm_s) {
                    out.ares_u.push(u);
                    out.ares_s.push(s.iter().map(|&v| v as f64).collect());
                    if instrumented {
                        let ares = policy.as_ares().expect("id `ares` builds an Ares");
                        let shared = ares.shared_window();
                        let (mut es, mut bs) = (Vec::with_capacity(k), Vec::with_capacity(k));
                        for a in 0..k {
                            let reg = ares.regressor(a, shared);
                            es.push(reg.bound_e(&ctx.bounds));
                            bs.push(
                                reg.bound_b(&ctx.bounds, &diag_bank[a][shared], &ctx.z_cov)
                                    .expect("valid delta"),
                            );
                        }
                        out.ares_e.push(es);
                        out.ares_b.push(bs);
                    }
                }
            } else if is_pies {
                let probe = policy.probe();
                let mut row = vec![f64::NAN; k];
                for (a, _s, pred) in probe.predictions {
                    row[a] = (out_round.rewards[a] - pred).abs();
                }
                pies_resid.push(row);
            }
            let reward = out_round.rewards[arm];
            cum += out_round.optimal_reward - reward;
            curve.push(cum);
            policy.update(arm, reward, &out_round.context);
        }
        out.regret.push(curve);
        if is_pies {
            let s: usize = id
                .strip_prefix("pies-s")
                .and_then(|v| v.parse().ok())
                .expect("validated id");
            out.residuals.push((s, pies_resid));
        }
    }
    Ok(out)
}

/// Aggregated statistics of one ψ system.
pub struct PsiReport {
    pub psi: f64,
    pub policy_ids: Vec<String>,
    /// [policy][round] nearest-rank medians and quartiles across sims.
    pub median: Vec<Vec<f64>>,
    pub q25: Vec<Vec<f64>>,
    pub q75: Vec<Vec<f64>>,
    /// Policy median / oracle median per round (NaN without an oracle or
    /// a positive denominator).
    pub normalized: Vec<Vec<f64>>,
    /// [policy][sim] final cumulative regret.
    pub final_per_sim: Vec<Vec<f64>>,
    /// [round][arm] means across sims (empty when no `ares` policy).
    pub mean_u: Vec<Vec<f64>>,
    pub mean_s: Vec<Vec<f64>>,
    pub mean_e: Vec<Vec<f64>>,
    pub mean_b: Vec<Vec<f64>>,
    /// Per fixed-window policy: (window, [round][arm] mean |residual|).
    pub residual_mean: Vec<(usize, Vec<Vec<f64>>)>,
    /// Resolved by-system values echoed into the summary.
    pub b_r_squared: f64,
    pub reward_clip: f64,
    pub rexp3_batch: u64,
    pub rexp3_gamma: f64,
    pub seeds: Vec<u64>,
}

/// Reduces one ψ's cells (must be non-empty and sim-ordered).
pub fn aggregate(ctx: &SystemContext, config: &ExperimentConfig, cells: &[CellOutput]) -> PsiReport {
    assert!(!cells.is_empty());
    let ids = config.policies.ids.clone();
    let horizon = cells[0].regret[0].len();
    let sims = cells.len();
    let num_policies = ids.len();

    let mut median = vec![vec![0.0; horizon]; num_policies];
    let mut q25 = vec![vec![0.0; horizon]; num_policies];
    let mut q75 = vec![vec![0.0; horizon]; num_policies];
    let mut sample = vec![0.0; sims];
    for p in 0..num_policies {
        for t in 0..horizon {
            for (i, cell) in cells.iter().enumerate() {
                sample[i] = cell.regret[p][t];
            }
            median[p][t] = nearest_rank(&sample, 0.5);
            q25[p][t] = nearest_rank(&sample, 0.25);
            q75[p][t] = nearest_rank(&sample, 0.75);
        }
    }

    let oracle_idx = ids.iter().position(|id| id == "oracle");
    let mut normalized = vec![vec![f64::NAN; horizon]; num_policies];
    if let Some(oi) = oracle_idx {
        for p in 0..num_policies {
            for t in 0..horizon {
                let denom = median[oi][t];
                normalized[p][t] = if denom > 0.0 {
                    median[p][t] / denom
                } else {
                    f64::NAN
                };
            }
        }
    }

    let final_per_sim: Vec<Vec<f64>> = (0..num_policies)
        .map(|p| cells.iter().map(|c| c.regret[p][horizon - 1]).collect())
        .collect();

    let k = ctx.params.num_arms();
    let mean_rounds = |field: fn(&CellOutput) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        if field(&cells[0]).is_empty() {
            return Vec::new();
        }
        let rounds = field(&cells[0]).len();
        let mut acc = vec![vec![0.0; k]; rounds];
        for cell in cells {
            let data = field(cell);
            for t in 0..rounds {
                for a in 0..k {
                    acc[t][a] += data[t][a];
                }
            }
        }
        for row in &mut acc {
            for v in row.iter_mut() {
                *v /= sims as f64;
            }
        }
        acc
    };
    let mean_u = mean_rounds(|c| &c.ares_u);
    let mean_s = mean_rounds(|c| &c.ares_s);
    let mean_e = mean_rounds(|c| &c.ares_e);
    let mean_b = mean_rounds(|c| &c.ares_b);

    // Residual availability is deterministic (depends only on the round),
    // so a plain mean is well-defined wherever any sim has a value.
    let mut residual_mean = Vec::new();
    for (ri, (s, _)) in cells[0].residuals.iter().enumerate() {
        let mut acc = vec![vec![0.0; k]; horizon];
        let mut cnt = vec![vec![0u64; k]; horizon];
        for cell in cells {
            let (_, data) = &cell.residuals[ri];
            for t in 0..horizon {
                for a in 0..k {
                    if data[t][a].is_finite() {
                        acc[t][a] += data[t][a];
                        cnt[t][a] += 1;
                    }
                }
            }
        }
        for t in 0..horizon {
            for a in 0..k {
                acc[t][a] = if cnt[t][a] > 0 {
                    acc[t][a] / cnt[t][a] as f64
                } else {
                    f64::NAN
                };
            }
        }
        residual_mean.push((*s, acc));
    }

    PsiReport {
        psi: ctx.psi,
        policy_ids: ids,
        median,
        q25,
        q75,
        normalized,
        final_per_sim,
        mean_u,
        mean_s,
        mean_e,
        mean_b,
        residual_mean,
        b_r_squared: ctx.b_r_squared,
        reward_clip: ctx.reward_clip,
        rexp3_batch: ctx.rexp3_batch,
        rexp3_gamma: ctx.rexp3_gamma,
        seeds: cells.iter().map(|c| c.sim).collect(),
    }
}

/// Full experiment output.
pub struct AggregateReport {
    pub psis: Vec<PsiReport>,
}

impl AggregateReport {
    pub fn for_psi(&self, psi: f64) -> Option<&PsiReport> {
        self.psis.iter().find(|r| r.psi == psi)
    }
}

impl PsiReport {
    pub fn policy_index(&self, id: &str) -> Option<usize> {
        self.policy_ids.iter().position(|p| p == id)
    }

    /// Median across sims of the final cumulative regret.
    pub fn final_median(&self, id: &str) -> Option<f64> {
        self.policy_index(id)
            .map(|p| nearest_rank(&self.final_per_sim[p], 0.5))
    }
}

/// Runs the configured experiment: every (ψ, sim) cell, aggregation, and
/// artifact emission into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<AggregateReport, HarnessError> {
    config.validate()?;
    let mut psis = Vec::with_capacity(config.environment.psi.len());
    for (psi_index, &psi) in config.environment.psi.iter().enumerate() {
        let ctx = SystemContext::build(psi, config)?;
        let cells: Result<Vec<CellOutput>, HarnessError> = (0..config.environment.num_sims)
            .into_par_iter()
            .map(|sim| run_cell(&ctx, config, psi_index, sim))
            .collect();
        let mut cells = cells?;
        cells.sort_by_key(|c| c.sim);
        let mut report = aggregate(&ctx, config, &cells);
        report.seeds = (0..config.environment.num_sims)
            .map(|sim| cell_seed(config.environment.base_seed, psi_index, sim))
            .collect();
        psis.push(report);
    }
    let report = AggregateReport { psis };
    write_outputs(&report, config)?;
    Ok(report)
}

// ---------------------------------------------------------------------
// Output files.
// ---------------------------------------------------------------------

/// 9 significant digits, deterministic across runs.
fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.8e}")
    }
}

fn fmt_psi(psi: f64) -> String {
    format!("{psi}")
}

#[derive(Serialize)]
struct SummaryPolicyRow {
    policy: String,
    median_final_regret: f64,
    q25_final_regret: f64,
    q75_final_regret: f64,
    /// Median over sims of (R_policy - R_ares)/R_policy; positive means
    /// the adaptive policy collected more reward.
    median_pct_decrease_vs_ares: Option<f64>,
}

#[derive(Serialize)]
struct SummaryPsi {
    psi: f64,
    b_r_squared: f64,
    rexp3_batch: u64,
    rexp3_gamma: f64,
    rexp3_reward_clip: f64,
    cell_seeds: Vec<u64>,
    final_regret: Vec<SummaryPolicyRow>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    seed_scheme: &'static str,
    common_random_numbers: bool,
    crn_note: &'static str,
    swucb_settings: (usize, f64),
    systems: BTreeMap<String, SummaryPsi>,
}

/// Writes regret_<psi>.csv, diagnostics_<psi>.csv, residuals_<psi>.csv
/// and summary.json. Row order is fixed (round-major) and numbers carry
/// 9 significant digits, so identical runs emit identical bytes.
pub fn write_outputs(report: &AggregateReport, config: &ExperimentConfig) -> Result<(), HarnessError> {
    let dir = &config.output.dir;
    fs::create_dir_all(dir)?;
    for psi_report in &report.psis {
        write_regret_csv(psi_report, dir)?;
        write_diagnostics_csv(psi_report, dir, config.output.instrumented)?;
        write_residuals_csv(psi_report, dir)?;
    }
    write_summary_json(report, config, dir)?;
    Ok(())
}

fn write_regret_csv(r: &PsiReport, dir: &Path) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(fs::File::create(
        dir.join(format!("regret_{}.csv", fmt_psi(r.psi))),
    )?);
    writeln!(w, "round,policy,median,q25,q75,normalized")?;
    let horizon = r.median.first().map_or(0, |c| c.len());
    for t in 0..horizon {
        for (p, id) in r.policy_ids.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                t + 1,
                id,
                fmt_sig(r.median[p][t]),
                fmt_sig(r.q25[p][t]),
                fmt_sig(r.q75[p][t]),
                fmt_sig(r.normalized[p][t]),
            )?;
        }
    }
    Ok(())
}

fn write_diagnostics_csv(r: &PsiReport, dir: &Path, instrumented: bool) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(fs::File::create(
        dir.join(format!("diagnostics_{}.csv", fmt_psi(r.psi))),
    )?);
    if instrumented && !r.mean_e.is_empty() {
        writeln!(w, "round,arm,mean_u,mean_s,mean_e,mean_b")?;
    } else {
        writeln!(w, "round,arm,mean_u,mean_s")?;
    }
    for t in 0..r.mean_u.len() {
        for a in 0..r.mean_u[t].len() {
            if instrumented && !r.mean_e.is_empty() {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    t + 1,
                    a + 1,
                    fmt_sig(r.mean_u[t][a]),
                    fmt_sig(r.mean_s[t][a]),
                    fmt_sig(r.mean_e[t][a]),
                    fmt_sig(r.mean_b[t][a]),
                )?;
            } else {
                writeln!(
                    w,
                    "{},{},{},{}",
                    t + 1,
                    a + 1,
                    fmt_sig(r.mean_u[t][a]),
                    fmt_sig(r.mean_s[t][a]),
                )?;
            }
        }
    }
    Ok(())
}

fn write_residuals_csv(r: &PsiReport, dir: &Path) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(fs::File::create(
        dir.join(format!("residuals_{}.csv", fmt_psi(r.psi))),
    )?);
    writeln!(w, "round,arm,s,mean_abs_residual")?;
    // Round-major, then arm, then window.
    let horizon = r
        .residual_mean
        .first()
        .map_or(0, |(_, data)| data.len());
    let num_arms = r
        .residual_mean
        .first()
        .and_then(|(_, data)| data.first().map(|row| row.len()))
        .unwrap_or(0);
    let mut windows: Vec<usize> = (0..r.residual_mean.len()).collect();
    windows.sort_by_key(|&i| r.residual_mean[i].0);
    for t in 0..horizon {
        for a in 0..num_arms {
            for &wi in &windows {
                let (s, data) = &r.residual_mean[wi];
                writeln!(
                    w,
                    "{},{},{},{}",
                    t + 1,
                    a + 1,
                    s,
                    fmt_sig(data[t][a]),
                )?;
            }
        }
    }
    Ok(())
}

fn write_summary_json(
    report: &AggregateReport,
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<(), HarnessError> {
    let mut systems = BTreeMap::new();
    for r in &report.psis {
        let ares_idx = r.policy_index("ares");
        let rows = r
            .policy_ids
            .iter()
            .enumerate()
            .map(|(p, id)| {
                let pct = ares_idx.and_then(|ai| {
                    if ai == p {
                        return None;
                    }
                    let per_sim: Vec<f64> = r.final_per_sim[p]
                        .iter()
                        .zip(&r.final_per_sim[ai])
                        .filter(|(alg, _)| **alg != 0.0)
                        .map(|(alg, ares)| (alg - ares) / alg)
                        .collect();
                    if per_sim.is_empty() {
                        None
                    } else {
                        Some(nearest_rank(&per_sim, 0.5))
                    }
                });
                SummaryPolicyRow {
                    policy: id.clone(),
                    median_final_regret: nearest_rank(&r.final_per_sim[p], 0.5),
                    q25_final_regret: nearest_rank(&r.final_per_sim[p], 0.25),
                    q75_final_regret: nearest_rank(&r.final_per_sim[p], 0.75),
                    median_pct_decrease_vs_ares: pct,
                }
            })
            .collect();
        systems.insert(
            fmt_psi(r.psi),
            SummaryPsi {
                psi: r.psi,
                b_r_squared: r.b_r_squared,
                rexp3_batch: r.rexp3_batch,
                rexp3_gamma: r.rexp3_gamma,
                rexp3_reward_clip: r.reward_clip,
                cell_seeds: r.seeds.clone(),
                final_regret: rows,
            },
        );
    }
    let summary = Summary {
        config,
        seed_scheme: "cell_seed = base_seed XOR splitmix64((psi_index << 32) XOR sim); policy streams re-seeded per policy id",
        common_random_numbers: true,
        crn_note: "every policy within a simulation replays one pre-generated environment tape (identical states, contexts and per-arm reward noise)",
        swucb_settings: (config.policies.swucb.tau, config.policies.swucb.xi),
        systems,
    };
    let file = fs::File::create(dir.join("summary.json"))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &summary).map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    Ok(())
}

// Re-exported for instrumented audits in tests and downstream tools.
pub use regressor::b_beta as bias_envelope;
