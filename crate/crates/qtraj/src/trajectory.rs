//! Stochastic trajectory engine.
//!
//! A trajectory carries a normalized pure state through `N = T/dt` steps.
//! Each step visits every dissipation channel in fixed order and then (by
//! default) applies the Hamiltonian propagator. Per channel the branch is
//! sampled from the dilation measurement statistics:
//!
//! * `p_C = |C psi|^2` — postselected-away jump: the trajectory is discarded
//!   (`nlme_2dilation`, `enhh_1dilation`) or converted into an importance
//!   weight (`nlme_weighted`);
//! * `p_B = |B psi|^2` — recorded jump, `psi -> L psi / |L psi|`;
//! * `p_A = |A psi|^2` — no-jump branch, `psi -> A psi / |A psi|`.
//!
//! The `nlme_weighted` scheme samples only the surviving branches with the
//! renormalized jump probability `p_B / (1 - p_C)` and accumulates
//! `log w += ln(1 - p_C)`; its weighted ensemble is identical in law to the
//! discard ensemble restricted to survivors, but never throws samples away.
//!
//! Determinism contract: each trajectory's random stream depends only on
//! `(config.seed, traj_index)`, and ensemble reduction is a sequential pass
//! over trajectory records in index order, so results are byte-identical for
//! any worker count.

use crate::dilation::{build_blocks, DilationBlocks, DilationError};
use crate::linalg::{
    c, cr, dagger, matrix_exp, normalize, vec_norm, CMat, CVec, LinalgError,
};
use crate::model::OpenSystemModel;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("dissipation step called on a discarded trajectory")]
    DeadTrajectory,
    #[error("branch probabilities sum to 1{residual:+.3e}; exceeds the 1e-8 completeness budget")]
    ProbabilityUnderflow { residual: f64 },
    #[error("scheme {scheme:?} requires every channel eta = {required}, channel {channel} has eta = {actual}")]
    SchemeEtaMismatch {
        scheme: Scheme,
        required: f64,
        channel: usize,
        actual: f64,
    },
    #[error("model has no odd/even bond split; Trotter mode unavailable")]
    TrotterUnavailable,
    #[error("all {0} trajectories were discarded by postselection")]
    AllTrajectoriesDiscarded(usize),
    #[error(transparent)]
    Dilation(#[from] DilationError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// Which dynamical equation is sampled and how postselection is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Plain Lindblad dynamics via the one-ancilla dilation (needs eta = 0).
    #[serde(rename = "lme_1dilation")]
    Lme1Dilation,
    /// Nonlinear dynamics via the two-ancilla dilation with hard discards.
    #[serde(rename = "nlme_2dilation")]
    Nlme2Dilation,
    /// Same ensemble as `nlme_2dilation` but importance-weighted instead of
    /// discarded; every trajectory survives with weight `prod (1 - p_C)`.
    NlmeWeighted,
    /// Fully postselected no-jump dynamics (needs eta = 1).
    #[serde(rename = "enhh_1dilation")]
    Enhh1Dilation,
    /// Sampling-free Kraus map on density matrices (needs eta = 0).
    DeterministicChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianMode {
    #[default]
    ExactExp,
    Trotter2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrder {
    /// Channels then Hamiltonian, matching the ordered update
    /// `|phi(t+dt)> = e^{-iH dt} prod_mu U_mu |phi(t)>`.
    #[default]
    DissipationThenHamiltonian,
    HamiltonianThenDissipation,
}

/// Operator used for the no-jump branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoJumpBranch {
    /// The exact square-root block `A = sqrt(1 - gamma dt L^dag L)`.
    #[default]
    SqrtBlock,
    /// The first-order surrogate `exp(-gamma dt L^dag L / 2)`, for studying
    /// the gap to the circuit's exact block.
    Exponential,
}

pub const DEFAULT_SEED: u64 = 20250824;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    pub n_trajectories: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub scheme: Scheme,
    #[serde(default)]
    pub hamiltonian_mode: HamiltonianMode,
    #[serde(default)]
    pub step_order: StepOrder,
    #[serde(default)]
    pub no_jump_branch: NoJumpBranch,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(TrajectoryError::InvalidConfig(format!(
                "dt = {} must be positive",
                self.dt
            )));
        }
        if self.t_final < 0.0 {
            return Err(TrajectoryError::InvalidConfig(format!(
                "t_final = {} must be non-negative",
                self.t_final
            )));
        }
        let steps = self.t_final / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(TrajectoryError::InvalidConfig(format!(
                "t_final = {} is not an integer multiple of dt = {}",
                self.t_final, self.dt
            )));
        }
        if self.n_trajectories == 0 {
            return Err(TrajectoryError::InvalidConfig(
                "n_trajectories must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub psi: CVec,
    pub t: f64,
    pub alive: bool,
    /// `(time, channel_index)` of every recorded jump.
    pub jump_log: Vec<(f64, usize)>,
    /// Accumulated `sum ln(1 - p_C)`. For discard schemes this is the
    /// trajectory's own survival product (the per-trajectory factor in the
    /// success probability); for `nlme_weighted` it is the statistical weight.
    pub log_weight: f64,
}

impl TrajectoryState {
    pub fn new(psi: CVec) -> Self {
        Self {
            psi,
            t: 0.0,
            alive: true,
            jump_log: Vec::new(),
            log_weight: 0.0,
        }
    }
}

/// Precomputed per-channel operators.
#[derive(Debug, Clone)]
pub struct ChannelOps {
    pub blocks: DilationBlocks,
    /// Exponential surrogate for the no-jump branch, built on demand.
    pub a_exp: Option<CMat>,
    pub eta: f64,
}

/// Everything a trajectory needs per step, immutable after construction.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub channels: Vec<ChannelOps>,
    /// Hamiltonian propagator as an ordered product of dense factors
    /// (one factor for `exact_exp`, three for `trotter2`).
    pub propagators: Vec<CMat>,
    pub dt: f64,
    pub scheme: Scheme,
    pub step_order: StepOrder,
    pub no_jump_branch: NoJumpBranch,
}

fn required_eta(scheme: Scheme) -> Option<f64> {
    match scheme {
        Scheme::Lme1Dilation | Scheme::DeterministicChannel => Some(0.0),
        Scheme::Enhh1Dilation => Some(1.0),
        Scheme::Nlme2Dilation | Scheme::NlmeWeighted => None,
    }
}

/// Build dilation blocks and Hamiltonian propagators for one run.
pub fn build_context(model: &OpenSystemModel, config: &SimConfig) -> Result<StepContext> {
    config.validate()?;
    if let Some(req) = required_eta(config.scheme) {
        for (i, ch) in model.channels.iter().enumerate() {
            if (ch.eta - req).abs() > 1e-12 {
                return Err(TrajectoryError::SchemeEtaMismatch {
                    scheme: config.scheme,
                    required: req,
                    channel: i,
                    actual: ch.eta,
                });
            }
        }
    }
    let mut channels = Vec::with_capacity(model.channels.len());
    for (i, ch) in model.channels.iter().enumerate() {
        let blocks = build_blocks(ch, config.dt, i)?;
        let a_exp = if config.no_jump_branch == NoJumpBranch::Exponential {
            let ldl = dagger(&ch.jump_operator).dot(&ch.jump_operator);
            Some(matrix_exp(
                &ldl.mapv(|z| z * cr(-0.5 * ch.rate * config.dt)),
            )?)
        } else {
            None
        };
        channels.push(ChannelOps {
            blocks,
            a_exp,
            eta: ch.eta,
        });
    }
    let propagators = match config.hamiltonian_mode {
        HamiltonianMode::ExactExp => {
            vec![matrix_exp(&model.hamiltonian.mapv(|z| z * c(0.0, -config.dt)))?]
        }
        HamiltonianMode::Trotter2 => {
            let split = model
                .trotter_split
                .as_ref()
                .ok_or(TrajectoryError::TrotterUnavailable)?;
            let half_odd = matrix_exp(&split.h_odd.mapv(|z| z * c(0.0, -0.5 * config.dt)))?;
            let even = matrix_exp(&split.h_even.mapv(|z| z * c(0.0, -config.dt)))?;
            vec![half_odd.clone(), even, half_odd]
        }
    };
    Ok(StepContext {
        channels,
        propagators,
        dt: config.dt,
        scheme: config.scheme,
        step_order: config.step_order,
        no_jump_branch: config.no_jump_branch,
    })
}

/// `(p_A, p_B, p_C)` for a normalized state: squared norms of the three
/// branch images.
pub fn branch_probabilities(psi: &CVec, ops: &ChannelOps) -> (f64, f64, f64) {
    let norm_sq = |m: &CMat| -> f64 {
        let v = m.dot(psi);
        v.iter().map(|z| z.norm_sqr()).sum()
    };
    (
        norm_sq(&ops.blocks.a),
        norm_sq(&ops.blocks.b),
        norm_sq(&ops.blocks.c),
    )
}

/// Visit one channel: sample the branch, update the state in place.
/// Consumes exactly one uniform variate per call.
pub fn dissipation_step(
    state: &mut TrajectoryState,
    ops: &ChannelOps,
    scheme: Scheme,
    no_jump_branch: NoJumpBranch,
    rng: &mut impl Rng,
    digest: &mut InvariantDigest,
) -> Result<()> {
    if !state.alive {
        return Err(TrajectoryError::DeadTrajectory);
    }
    let (p_a, p_b, p_c) = branch_probabilities(&state.psi, ops);
    if no_jump_branch == NoJumpBranch::SqrtBlock {
        let residual = p_a + p_b + p_c - 1.0;
        if residual.abs() > 1e-8 {
            return Err(TrajectoryError::ProbabilityUnderflow { residual });
        }
        digest.max_prob_residual = digest.max_prob_residual.max(residual.abs());
    }
    let u: f64 = rng.random();
    let apply_jump = |state: &mut TrajectoryState| {
        state.psi = ops.blocks.b.dot(&state.psi);
        normalize(&mut state.psi);
        state.jump_log.push((state.t, ops.blocks.channel_index));
    };
    let apply_no_jump = |state: &mut TrajectoryState| {
        let op = match no_jump_branch {
            NoJumpBranch::SqrtBlock => &ops.blocks.a,
            NoJumpBranch::Exponential => ops.a_exp.as_ref().expect("a_exp built in context"),
        };
        state.psi = op.dot(&state.psi);
        normalize(&mut state.psi);
    };
    match scheme {
        Scheme::Lme1Dilation => {
            // p_c = 0 by the eta = 0 contract
            if u < p_b {
                apply_jump(state);
            } else {
                apply_no_jump(state);
            }
        }
        Scheme::Nlme2Dilation | Scheme::Enhh1Dilation => {
            state.log_weight += (1.0 - p_c).ln();
            if u < p_c {
                state.alive = false;
            } else if u < p_c + p_b {
                apply_jump(state);
            } else {
                apply_no_jump(state);
            }
        }
        Scheme::NlmeWeighted => {
            state.log_weight += (1.0 - p_c).ln();
            if u * (1.0 - p_c) < p_b {
                apply_jump(state);
            } else {
                apply_no_jump(state);
            }
        }
        Scheme::DeterministicChannel => {
            return Err(TrajectoryError::InvalidConfig(
                "deterministic_channel does not sample trajectories".into(),
            ))
        }
    }
    Ok(())
}

/// Apply the (possibly Trotterized) Hamiltonian propagator.
pub fn hamiltonian_step(state: &mut TrajectoryState, ctx: &StepContext) {
    for p in &ctx.propagators {
        state.psi = p.dot(&state.psi);
    }
    normalize(&mut state.psi);
}

/// Worst-case invariant violations observed during a run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct InvariantDigest {
    pub max_norm_drift: f64,
    pub max_prob_residual: f64,
}

impl InvariantDigest {
    fn merge(&mut self, other: &InvariantDigest) {
        self.max_norm_drift = self.max_norm_drift.max(other.max_norm_drift);
        self.max_prob_residual = self.max_prob_residual.max(other.max_prob_residual);
    }
}

/// Per-trajectory output: observable values and weights at the recorded
/// steps, with `NaN`/zero after discard.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub values: Array2<f64>,
    /// Statistical weight at each recorded step (0 once discarded;
    /// `exp(log_weight)` for the weighted scheme, 1 otherwise).
    pub weights: Vec<f64>,
    /// Running survival product `prod (1 - p_C)` at each recorded step.
    pub survival: Vec<f64>,
    pub alive_at_end: bool,
    pub jump_log: Vec<(f64, usize)>,
    pub final_psi: Option<CVec>,
    pub digest: InvariantDigest,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-trajectory stream keyed by `(seed, traj_index)` only.
pub fn trajectory_rng(seed: u64, traj_index: u64) -> ChaCha12Rng {
    let mut state = seed ^ splitmix64(&mut { traj_index });
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

fn expectation_re(psi: &CVec, op: &CMat) -> f64 {
    let v = op.dot(psi);
    psi.iter().zip(v.iter()).map(|(a, b)| (a.conj() * b).re).sum()
}

/// Run a single trajectory, recording every observable at the given step
/// indices (step 0 = initial state). `record_steps` must be sorted.
pub fn run_trajectory(
    ctx: &StepContext,
    config: &SimConfig,
    initial: &CVec,
    observables: &[(String, CMat)],
    record_steps: &[usize],
    traj_index: usize,
    keep_final_psi: bool,
) -> Result<TrajectoryRecord> {
    let n_steps = config.n_steps();
    let mut rng = trajectory_rng(config.seed, traj_index as u64);
    let mut state = TrajectoryState::new(initial.clone());
    let mut digest = InvariantDigest::default();
    let n_rec = record_steps.len();
    let mut values = Array2::from_elem((observables.len(), n_rec), f64::NAN);
    let mut weights = vec![0.0; n_rec];
    let mut survival = vec![0.0; n_rec];
    let mut rec_cursor = 0usize;
    let record = |state: &TrajectoryState,
                      step: usize,
                      cursor: &mut usize,
                      values: &mut Array2<f64>,
                      weights: &mut [f64],
                      survival: &mut [f64]| {
        while *cursor < n_rec && record_steps[*cursor] == step {
            if state.alive {
                for (k, (_, op)) in observables.iter().enumerate() {
                    values[(k, *cursor)] = expectation_re(&state.psi, op);
                }
                weights[*cursor] = if matches!(ctx.scheme, Scheme::NlmeWeighted) {
                    state.log_weight.exp()
                } else {
                    1.0
                };
                survival[*cursor] = state.log_weight.exp();
            }
            *cursor += 1;
        }
    };
    record(&state, 0, &mut rec_cursor, &mut values, &mut weights, &mut survival);
    for step in 0..n_steps {
        if !state.alive {
            break;
        }
        let do_dissipation = |state: &mut TrajectoryState,
                              rng: &mut ChaCha12Rng,
                              digest: &mut InvariantDigest|
         -> Result<()> {
            for ops in &ctx.channels {
                if !state.alive {
                    break;
                }
                dissipation_step(state, ops, ctx.scheme, ctx.no_jump_branch, rng, digest)?;
            }
            Ok(())
        };
        match ctx.step_order {
            StepOrder::DissipationThenHamiltonian => {
                do_dissipation(&mut state, &mut rng, &mut digest)?;
                if state.alive {
                    hamiltonian_step(&mut state, ctx);
                }
            }
            StepOrder::HamiltonianThenDissipation => {
                hamiltonian_step(&mut state, ctx);
                do_dissipation(&mut state, &mut rng, &mut digest)?;
            }
        }
        state.t = (step + 1) as f64 * ctx.dt;
        if state.alive {
            digest.max_norm_drift = digest
                .max_norm_drift
                .max((vec_norm(&state.psi) - 1.0).abs());
        }
        record(&state, step + 1, &mut rec_cursor, &mut values, &mut weights, &mut survival);
    }
    Ok(TrajectoryRecord {
        values,
        weights,
        survival,
        alive_at_end: state.alive,
        jump_log: state.jump_log,
        final_psi: if keep_final_psi && state.alive {
            Some(state.psi)
        } else {
            None
        },
        digest,
    })
}

/// Per-observable time series statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub se: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub k_total: usize,
    /// Trajectories alive at the final recorded time.
    pub k_survivors: usize,
    /// Effective sample size `(sum w)^2 / sum w^2` at the final recorded
    /// time; equals the survivor count for unit weights.
    pub k_eff: f64,
    pub k_eff_series: Vec<f64>,
    pub observables: Vec<SeriesStats>,
    /// Raw per-trajectory values, one `(K x n_times)` array per observable
    /// (`NaN` after discard) — input for jackknife diagnostics.
    pub raw_values: Vec<Array2<f64>>,
    /// Raw per-trajectory weights, `K x n_times` (0 after discard).
    pub raw_weights: Array2<f64>,
    /// Weighted `sum w |psi><psi| / sum w` at the final time (small systems).
    pub rho_estimate: Option<CMat>,
    /// `K_eff / K` for discard schemes, `E[w]` for the weighted scheme.
    pub success_empirical: f64,
    /// Mean over survivors of the running `prod (1 - p_C)` product.
    pub success_predicted: f64,
    pub digest: InvariantDigest,
}

/// Maximum system dimension for which `rho_estimate` is reconstructed.
pub const RHO_ESTIMATE_MAX_DIM: usize = 64;

/// Run `K` trajectories (in parallel when a rayon pool is active) and reduce
/// them into ensemble statistics. Reduction is a sequential pass in
/// trajectory-index order, independent of worker count.
pub fn run_ensemble(
    model: &OpenSystemModel,
    config: &SimConfig,
    initial: &CVec,
    observables: &[(String, CMat)],
    record_steps: &[usize],
) -> Result<EnsembleStats> {
    let ctx = build_context(model, config)?;
    let keep_psi = model.dim() <= RHO_ESTIMATE_MAX_DIM;
    let records: Vec<TrajectoryRecord> = (0..config.n_trajectories)
        .into_par_iter()
        .map(|i| run_trajectory(&ctx, config, initial, observables, record_steps, i, keep_psi))
        .collect::<Result<_>>()?;
    reduce_records(model, config, observables, record_steps, &records, keep_psi)
}

fn reduce_records(
    model: &OpenSystemModel,
    config: &SimConfig,
    observables: &[(String, CMat)],
    record_steps: &[usize],
    records: &[TrajectoryRecord],
    keep_psi: bool,
) -> Result<EnsembleStats> {
    let k_total = records.len();
    let n_rec = record_steps.len();
    let times: Vec<f64> = record_steps.iter().map(|&s| s as f64 * config.dt).collect();
    let mut raw_weights = Array2::zeros((k_total, n_rec));
    let mut raw_values: Vec<Array2<f64>> =
        vec![Array2::from_elem((k_total, n_rec), f64::NAN); observables.len()];
    let mut digest = InvariantDigest::default();
    for (i, rec) in records.iter().enumerate() {
        for j in 0..n_rec {
            raw_weights[(i, j)] = rec.weights[j];
            for (k, arr) in raw_values.iter_mut().enumerate() {
                arr[(i, j)] = rec.values[(k, j)];
            }
        }
        digest.merge(&rec.digest);
    }
    let mut k_eff_series = vec![0.0; n_rec];
    let mut contributors = vec![0usize; n_rec];
    for j in 0..n_rec {
        let (mut sw, mut sw2) = (0.0, 0.0);
        for i in 0..k_total {
            let w = raw_weights[(i, j)];
            if w > 0.0 {
                sw += w;
                sw2 += w * w;
                contributors[j] += 1;
            }
        }
        k_eff_series[j] = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
    }
    let mut series = Vec::with_capacity(observables.len());
    for (k, (name, _)) in observables.iter().enumerate() {
        let mut mean = vec![f64::NAN; n_rec];
        let mut sd = vec![f64::NAN; n_rec];
        let mut se = vec![None; n_rec];
        for j in 0..n_rec {
            let mut sw = 0.0;
            let mut swx = 0.0;
            for i in 0..k_total {
                let w = raw_weights[(i, j)];
                if w > 0.0 {
                    sw += w;
                    swx += w * raw_values[k][(i, j)];
                }
            }
            if sw > 0.0 {
                let m = swx / sw;
                let mut swd = 0.0;
                for i in 0..k_total {
                    let w = raw_weights[(i, j)];
                    if w > 0.0 {
                        let d = raw_values[k][(i, j)] - m;
                        swd += w * d * d;
                    }
                }
                mean[j] = m;
                sd[j] = (swd / sw).sqrt();
                if contributors[j] >= 2 && k_eff_series[j] > 0.0 {
                    se[j] = Some(sd[j] / k_eff_series[j].sqrt());
                }
            }
        }
        series.push(SeriesStats {
            name: name.clone(),
            mean,
            sd,
            se,
        });
    }
    let k_survivors = records.iter().filter(|r| r.alive_at_end).count();
    if k_survivors == 0 && !matches!(config.scheme, Scheme::NlmeWeighted) {
        return Err(TrajectoryError::AllTrajectoriesDiscarded(k_total));
    }
    let last = n_rec.saturating_sub(1);
    let success_empirical = match config.scheme {
        Scheme::NlmeWeighted => {
            records.iter().map(|r| *r.survival.last().unwrap_or(&0.0)).sum::<f64>()
                / k_total as f64
        }
        _ => k_survivors as f64 / k_total as f64,
    };
    let survivors: Vec<&TrajectoryRecord> =
        records.iter().filter(|r| r.alive_at_end).collect();
    let success_predicted = if survivors.is_empty() {
        f64::NAN
    } else {
        survivors
            .iter()
            .map(|r| *r.survival.last().unwrap_or(&0.0))
            .sum::<f64>()
            / survivors.len() as f64
    };
    let rho_estimate = if keep_psi && n_rec > 0 {
        let dim = model.dim();
        let mut rho = Array2::from_elem((dim, dim), cr(0.0));
        let mut sw = 0.0;
        for rec in records {
            if let Some(psi) = &rec.final_psi {
                let w = rec.weights[last];
                if w > 0.0 {
                    sw += w;
                    for a in 0..dim {
                        for b in 0..dim {
                            rho[(a, b)] += psi[a] * psi[b].conj() * cr(w);
                        }
                    }
                }
            }
        }
        if sw > 0.0 {
            rho.mapv_inplace(|z| z / cr(sw));
            Some(rho)
        } else {
            None
        }
    } else {
        None
    };
    Ok(EnsembleStats {
        times,
        k_total,
        k_survivors,
        k_eff: *k_eff_series.last().unwrap_or(&0.0),
        k_eff_series,
        observables: series,
        raw_values,
        raw_weights,
        rho_estimate,
        success_empirical,
        success_predicted,
        digest,
    })
}

/// `(empirical, predicted)` postselection success probability per the
/// ensemble contract: `K_eff/K` (or `E[w]`) vs the mean running product of
/// `(1 - eta gamma dt <L^dag L>)` over survivors.
pub fn estimate_success_probability(
    model: &OpenSystemModel,
    config: &SimConfig,
    initial: &CVec,
) -> Result<(f64, f64)> {
    let n = config.n_steps();
    let stats = run_ensemble(model, config, initial, &[], &[n])?;
    Ok((stats.success_empirical, stats.success_predicted))
}

/// Sampling-free propagation of a density matrix through one full step of
/// the quantum map `E_dt(rho) = U0 [prod_mu (A rho A^dag + B rho B^dag)] U0^dag`.
pub fn deterministic_channel_step(rho: &CMat, ctx: &StepContext) -> Result<CMat> {
    let mut out = rho.clone();
    let apply_channel = |rho: &CMat, ops: &ChannelOps| -> CMat {
        let a = &ops.blocks.a;
        let b = &ops.blocks.b;
        a.dot(rho).dot(&dagger(a)) + b.dot(rho).dot(&dagger(b))
    };
    let apply_unitary = |rho: &CMat, props: &[CMat]| -> CMat {
        let mut r = rho.clone();
        for p in props {
            r = p.dot(&r).dot(&dagger(p));
        }
        r
    };
    match ctx.step_order {
        StepOrder::DissipationThenHamiltonian => {
            for ops in &ctx.channels {
                out = apply_channel(&out, ops);
            }
            out = apply_unitary(&out, &ctx.propagators);
        }
        StepOrder::HamiltonianThenDissipation => {
            out = apply_unitary(&out, &ctx.propagators);
            for ops in &ctx.channels {
                out = apply_channel(&out, ops);
            }
        }
    }
    Ok(out)
}

/// Build a context for the deterministic channel and propagate `rho0`
/// through `N = t_final/dt` steps.
pub fn run_channel(model: &OpenSystemModel, config: &SimConfig, rho0: &CMat) -> Result<CMat> {
    if let Some((i, ch)) = model
        .channels
        .iter()
        .enumerate()
        .find(|(_, ch)| ch.eta.abs() > 1e-12)
    {
        return Err(TrajectoryError::SchemeEtaMismatch {
            scheme: Scheme::DeterministicChannel,
            required: 0.0,
            channel: i,
            actual: ch.eta,
        });
    }
    let channel_config = SimConfig {
        scheme: Scheme::DeterministicChannel,
        ..config.clone()
    };
    let ctx = build_context(model, &channel_config)?;
    let mut rho = rho0.clone();
    for _ in 0..config.n_steps() {
        rho = deterministic_channel_step(&rho, &ctx)?;
    }
    Ok(rho)
}

/// SM-style standard deviation of a sample against an external reference
/// value instead of the sample mean.
pub fn sd_against_reference(values: &[f64], weights: &[f64], reference: f64) -> f64 {
    let mut sw = 0.0;
    let mut swd = 0.0;
    for (&x, &w) in values.iter().zip(weights) {
        if w > 0.0 && x.is_finite() {
            let d = x - reference;
            sw += w;
            swd += w * d * d;
        }
    }
    if sw > 0.0 {
        (swd / sw).sqrt()
    } else {
        f64::NAN
    }
}
