//! Experiment layer: TOML configs, run orchestration, CSV/JSON output.
//!
//! A config selects a model (`atom`, `xxz`, `localization`, `skin`), the
//! simulation parameters, the observables, and the output directory. The
//! five activities — `run`, `compare`, `scan-dt`, `verify`, `dump-unitary` —
//! each map to one function here so the CLI binary stays thin.
//!
//! Output contract: CSV files use 17-significant-digit scientific notation,
//! comma separators, LF line endings, and are byte-identical for a fixed
//! `(config, seed)` regardless of worker count.

use crate::dilation::{
    assemble_one_dilation_enhh, assemble_one_dilation_lme, assemble_two_dilation, build_blocks,
    completeness_error, verify_unitarity,
};
use crate::exact::{choi_error_bound_check, lme_series, nlme_series, propagate_lme};
use crate::linalg::{cr, spectral_norm, CMat, CVec};
use crate::model::{
    build_atom, build_localization, build_skin, build_xxz, DissipationChannel, ModelParams,
    OpenSystemModel,
};
use crate::observables::{
    derived_from_ensemble, dipr, fit_scaling_exponent, imbalance, trace_error, DerivedSeries,
    ObservableKind, ObservableSpec, ScalingFit,
};
use crate::trajectory::{
    run_channel, run_ensemble, EnsembleStats, InvariantDigest, Scheme, SimConfig,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    ConfigParse(String),
    #[error("model build error: {0}")]
    ModelBuild(String),
    #[error("simulation error: {0}")]
    Simulation(String),
}

impl ExperimentError {
    /// Process exit code contract: config 2, model 3, simulation 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::ConfigParse(_) => 2,
            ExperimentError::ModelBuild(_) => 3,
            ExperimentError::Simulation(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn sim_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Simulation(e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    /// One of `atom`, `xxz`, `localization`, `skin`.
    pub kind: String,
    #[serde(flatten)]
    pub params: ModelParams,
    /// Optional: repeat the experiment for each eta in the list.
    #[serde(default)]
    pub eta_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OutputSection {
    /// Output directory; default `out` next to the working directory.
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanSection {
    pub dt_list: Vec<f64>,
}

/// What to measure and from which initial state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunSection {
    /// `all_up`, `neel`, `excited`, `all_down`, or `basis:<index>`.
    #[serde(default)]
    pub initial: Option<String>,
    /// Observable names: `occ:<site>`, `czz`, `pe`, `dipr`, `imbalance`.
    #[serde(default)]
    pub observables: Vec<String>,
    /// Times at which to record; must be multiples of `sim.dt`.
    /// Default: every step.
    #[serde(default)]
    pub record_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub sim: SimConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub scan: Option<ScanSection>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ExperimentError::ConfigParse(format!("cannot read {}: {e}", path.display()))
    })?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| {
        ExperimentError::ConfigParse(format!("{}: {e}", path.display()))
    })?;
    cfg.sim
        .validate()
        .map_err(|e| ExperimentError::ConfigParse(e.to_string()))?;
    Ok(cfg)
}

/// Build the model named in the config, optionally overriding eta (for
/// `eta_grid` sweeps).
pub fn build_model(section: &ModelSection, eta_override: Option<f64>) -> Result<OpenSystemModel> {
    let mut params = section.params.clone();
    if let Some(eta) = eta_override {
        params.eta = eta;
    }
    let model = match section.kind.as_str() {
        "atom" => build_atom(params.j, params.gamma, params.eta),
        "xxz" => build_xxz(&params),
        "localization" => build_localization(&params),
        "skin" => build_skin(&params),
        other => {
            return Err(ExperimentError::ConfigParse(format!(
                "unknown model kind '{other}'"
            )))
        }
    };
    model.map_err(|e| ExperimentError::ModelBuild(e.to_string()))
}

/// Pick the sampling scheme compatible with a given eta during grid sweeps.
pub fn effective_scheme(base: Scheme, eta: f64) -> Scheme {
    if eta.abs() < 1e-12 {
        Scheme::Lme1Dilation
    } else if (eta - 1.0).abs() < 1e-12 {
        Scheme::Enhh1Dilation
    } else if matches!(base, Scheme::NlmeWeighted) {
        Scheme::NlmeWeighted
    } else {
        Scheme::Nlme2Dilation
    }
}

/// Resolve the initial pure state.
pub fn initial_state(cfg: &ExperimentConfig, model: &OpenSystemModel) -> Result<CVec> {
    let dim = model.dim();
    let name = cfg.run.initial.as_deref().unwrap_or(match cfg.model.kind.as_str() {
        "atom" => "excited",
        "localization" | "skin" => "neel",
        _ => "all_up",
    });
    let index = match name {
        "all_up" | "excited" => 0usize,
        "all_down" => dim - 1,
        "neel" => {
            // |up down up down ...>, site 1 leftmost: down sites set bit
            let l = model.n_sites;
            let mut idx = 0usize;
            for site in 1..=l {
                if site % 2 == 0 {
                    idx |= 1 << (l - site);
                }
            }
            idx
        }
        other => {
            if let Some(k) = other.strip_prefix("basis:") {
                k.parse::<usize>().map_err(|_| {
                    ExperimentError::ConfigParse(format!("bad basis index in '{other}'"))
                })?
            } else {
                return Err(ExperimentError::ConfigParse(format!(
                    "unknown initial state '{other}'"
                )));
            }
        }
    };
    if index >= dim {
        return Err(ExperimentError::ConfigParse(format!(
            "initial basis index {index} out of range for dimension {dim}"
        )));
    }
    let mut psi = CVec::from_elem(dim, cr(0.0));
    psi[index] = cr(1.0);
    Ok(psi)
}

/// Parsed observable plan: matrix observables to sample plus derived
/// diagnostics computed from the site-occupation profile.
pub struct ObservablePlan {
    pub matrix_specs: Vec<(String, CMat)>,
    /// Names of derived diagnostics requested (`dipr`, `imbalance`).
    pub derived: Vec<String>,
    /// Indices into `matrix_specs` of `occ:1..=L`, in chain order
    /// (populated when any derived diagnostic is requested).
    pub occ_indices: Vec<usize>,
}

pub fn parse_observable(name: &str) -> Result<ObservableSpec> {
    let spec = match name {
        "czz" => ObservableSpec::new("czz", ObservableKind::CorrelationZz),
        "pe" => ObservableSpec::new("pe", ObservableKind::ExcitedPop),
        "dipr" => ObservableSpec::new("dipr", ObservableKind::Dipr),
        "imbalance" => ObservableSpec::new("imbalance", ObservableKind::Imbalance),
        other => {
            if let Some(site) = other.strip_prefix("occ:") {
                let l: usize = site.parse().map_err(|_| {
                    ExperimentError::ConfigParse(format!("bad site in observable '{other}'"))
                })?;
                ObservableSpec::new(format!("occ_{l}"), ObservableKind::SiteOccupation(l))
            } else {
                return Err(ExperimentError::ConfigParse(format!(
                    "unknown observable '{other}'"
                )));
            }
        }
    };
    Ok(spec)
}

pub fn build_observable_plan(
    cfg: &ExperimentConfig,
    model: &OpenSystemModel,
) -> Result<ObservablePlan> {
    let mut matrix_specs: Vec<(String, CMat)> = Vec::new();
    let mut derived = Vec::new();
    for name in &cfg.run.observables {
        let spec = parse_observable(name)?;
        if spec.is_derived() {
            if !derived.contains(&spec.name) {
                derived.push(spec.name.clone());
            }
            continue;
        }
        let m = spec
            .matrix(model.n_sites)
            .map_err(|e| ExperimentError::ConfigParse(e.to_string()))?
            .expect("non-derived observable has a matrix");
        if m.nrows() != model.dim() {
            return Err(ExperimentError::ConfigParse(format!(
                "observable '{}' has dimension {}, model has {}",
                spec.name,
                m.nrows(),
                model.dim()
            )));
        }
        matrix_specs.push((spec.name, m));
    }
    let mut occ_indices = Vec::new();
    if !derived.is_empty() {
        for l in 1..=model.n_sites {
            let name = format!("occ_{l}");
            let idx = match matrix_specs.iter().position(|(n, _)| *n == name) {
                Some(i) => i,
                None => {
                    let spec =
                        ObservableSpec::new(name.clone(), ObservableKind::SiteOccupation(l));
                    let m = spec
                        .matrix(model.n_sites)
                        .map_err(|e| ExperimentError::ConfigParse(e.to_string()))?
                        .expect("site occupation has a matrix");
                    matrix_specs.push((name, m));
                    matrix_specs.len() - 1
                }
            };
            occ_indices.push(idx);
        }
    }
    Ok(ObservablePlan {
        matrix_specs,
        derived,
        occ_indices,
    })
}

/// Step indices at which to record, from `record_times` (validated as
/// multiples of dt) or every step by default.
pub fn record_steps(cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    let n = cfg.sim.n_steps();
    match &cfg.run.record_times {
        None => Ok((0..=n).collect()),
        Some(times) => {
            let mut steps = Vec::with_capacity(times.len());
            for &t in times {
                let s = t / cfg.sim.dt;
                if (s - s.round()).abs() > 1e-9 * s.abs().max(1.0) {
                    return Err(ExperimentError::ConfigParse(format!(
                        "record time {t} is not a multiple of dt = {}",
                        cfg.sim.dt
                    )));
                }
                let step = s.round() as usize;
                if step > n {
                    return Err(ExperimentError::ConfigParse(format!(
                        "record time {t} is beyond t_final = {}",
                        cfg.sim.t_final
                    )));
                }
                steps.push(step);
            }
            steps.sort_unstable();
            steps.dedup();
            Ok(steps)
        }
    }
}

/// Full-precision scientific formatting (17 significant digits).
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{:.16e}", x)
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => fmt_float(v),
        None => "nan".to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalValue {
    pub name: String,
    pub value: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub label: String,
    pub seed: u64,
    pub k_total: usize,
    pub k_survivors: usize,
    pub k_eff: f64,
    pub success_empirical: f64,
    pub success_predicted: f64,
    pub wall_time_s: f64,
    pub finals: Vec<FinalValue>,
    pub invariant_digest: InvariantDigest,
    pub scaling_fit: Option<ScalingFit>,
    pub config: ExperimentConfig,
}

/// Time-series CSV: `time, <obs>_mean, <obs>_sd, <obs>_se, ...` with derived
/// diagnostics appended as `<name>_mean,(nan),<name>_se`.
fn timeseries_csv(stats: &EnsembleStats, derived: &[DerivedSeries]) -> String {
    let mut header = String::from("time");
    for s in &stats.observables {
        let _ = write!(header, ",{0}_mean,{0}_sd,{0}_se", s.name);
    }
    for d in derived {
        let _ = write!(header, ",{0}_mean,{0}_sd,{0}_se", d.name);
    }
    let mut out = header;
    out.push('\n');
    for (j, &t) in stats.times.iter().enumerate() {
        let mut row = fmt_float(t);
        for s in &stats.observables {
            let _ = write!(
                row,
                ",{},{},{}",
                fmt_float(s.mean[j]),
                fmt_float(s.sd[j]),
                fmt_opt(s.se[j])
            );
        }
        for d in derived {
            let _ = write!(row, ",{},nan,{}", fmt_float(d.value[j]), fmt_opt(d.se[j]));
        }
        out.push_str(&row);
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| sim_err(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, content)
        .map_err(|e| sim_err(format!("cannot write {}: {e}", path.display())))
}

fn eta_label(eta: f64) -> String {
    format!("eta{}", format!("{eta}").replace('.', "p"))
}

fn out_dir(cfg: &ExperimentConfig, override_dir: Option<&Path>) -> PathBuf {
    if let Some(d) = override_dir {
        d.to_path_buf()
    } else {
        PathBuf::from(cfg.output.dir.as_deref().unwrap_or("out"))
    }
}

/// One ensemble run (a single (model, eta) point) producing stats, derived
/// series, and a summary.
fn run_single(
    cfg: &ExperimentConfig,
    model: &OpenSystemModel,
    sim: &SimConfig,
    label: &str,
) -> Result<(EnsembleStats, Vec<DerivedSeries>, RunSummary)> {
    let start = Instant::now();
    let initial = initial_state(cfg, model)?;
    let plan = build_observable_plan(cfg, model)?;
    let steps = record_steps(cfg)?;
    let stats = run_ensemble(model, sim, &initial, &plan.matrix_specs, &steps)
        .map_err(sim_err)?;
    let mut derived_series = Vec::new();
    for name in &plan.derived {
        let series = match name.as_str() {
            "dipr" => derived_from_ensemble(&stats, &plan.occ_indices, "dipr", |occ| {
                dipr(occ).map_err(|e| e)
            }),
            "imbalance" => {
                derived_from_ensemble(&stats, &plan.occ_indices, "imbalance", |occ| imbalance(occ))
            }
            _ => unreachable!("derived names are filtered at parse time"),
        }
        .map_err(sim_err)?;
        derived_series.push(series);
    }
    let last = stats.times.len().saturating_sub(1);
    let mut finals: Vec<FinalValue> = stats
        .observables
        .iter()
        .map(|s| FinalValue {
            name: s.name.clone(),
            value: s.mean[last],
            se: s.se[last],
        })
        .collect();
    for d in &derived_series {
        finals.push(FinalValue {
            name: d.name.clone(),
            value: d.value[last],
            se: d.se[last],
        });
    }
    let summary = RunSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        label: label.to_string(),
        seed: sim.seed,
        k_total: stats.k_total,
        k_survivors: stats.k_survivors,
        k_eff: stats.k_eff,
        success_empirical: stats.success_empirical,
        success_predicted: stats.success_predicted,
        wall_time_s: start.elapsed().as_secs_f64(),
        finals,
        invariant_digest: stats.digest,
        scaling_fit: None,
        config: cfg.clone(),
    };
    Ok((stats, derived_series, summary))
}

/// Eta points for the experiment: the grid if present, else the single
/// configured eta.
fn eta_points(cfg: &ExperimentConfig) -> Vec<Option<f64>> {
    match &cfg.model.eta_grid {
        Some(grid) => grid.iter().map(|&e| Some(e)).collect(),
        None => vec![None],
    }
}

/// `run` subcommand: execute the ensemble(s), write time-series CSV and
/// summary JSON per eta point.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    stem: &str,
    override_dir: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    let dir = out_dir(cfg, override_dir);
    let mut summaries = Vec::new();
    for eta in eta_points(cfg) {
        let model = build_model(&cfg.model, eta)?;
        let mut sim = cfg.sim.clone();
        if let Some(e) = eta {
            sim.scheme = effective_scheme(cfg.sim.scheme, e);
        }
        let label = match eta {
            Some(e) => format!("{stem}_{}", eta_label(e)),
            None => stem.to_string(),
        };
        let (stats, derived, summary) = run_single(cfg, &model, &sim, &label)?;
        write_file(
            &dir.join(format!("{label}_timeseries.csv")),
            &timeseries_csv(&stats, &derived),
        )?;
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| sim_err(format!("summary serialization: {e}")))?;
        write_file(&dir.join(format!("{label}_summary.json")), &json)?;
        log::info!(
            "{label}: K={} K_surv={} K_eff={:.1} success={:.4}",
            summary.k_total,
            summary.k_survivors,
            summary.k_eff,
            summary.success_empirical
        );
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Exact reference series for the configured model at the recorded times.
fn exact_reference_series(
    cfg: &ExperimentConfig,
    model: &OpenSystemModel,
    plan: &ObservablePlan,
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let initial = initial_state(cfg, model)?;
    let dim = model.dim();
    let mut rho0 = CMat::from_elem((dim, dim), cr(0.0));
    for a in 0..dim {
        for b in 0..dim {
            rho0[(a, b)] = initial[a] * initial[b].conj();
        }
    }
    let all_eta_zero = model.channels.iter().all(|c| c.eta.abs() < 1e-12);
    let rhos = if all_eta_zero {
        lme_series(model, &rho0, times).map_err(sim_err)?
    } else {
        let h_int = 1e-3f64.min(cfg.sim.dt / 10.0);
        nlme_series(model, &rho0, times, h_int).map_err(sim_err)?
    };
    let mut out = Vec::with_capacity(plan.matrix_specs.len());
    for (_, op) in &plan.matrix_specs {
        let series: Vec<f64> = rhos
            .iter()
            .map(|rho| crate::observables::expectation_rho(rho, op))
            .collect::<std::result::Result<_, _>>()
            .map_err(sim_err)?;
        out.push(series);
    }
    Ok(out)
}

/// `compare` subcommand: trajectory ensemble vs exact solver on the same
/// model; one CSV per observable with columns
/// `time, trajectory_mean, exact_value, abs_diff, se`.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    stem: &str,
    override_dir: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    let dir = out_dir(cfg, override_dir);
    let mut summaries = Vec::new();
    for eta in eta_points(cfg) {
        let model = build_model(&cfg.model, eta)?;
        if model.dim() > crate::exact::LIOUVILLIAN_MAX_DIM {
            return Err(ExperimentError::Simulation(format!(
                "exact branch needs dimension <= {}, model has {}",
                crate::exact::LIOUVILLIAN_MAX_DIM,
                model.dim()
            )));
        }
        let mut sim = cfg.sim.clone();
        if let Some(e) = eta {
            sim.scheme = effective_scheme(cfg.sim.scheme, e);
        }
        let label = match eta {
            Some(e) => format!("{stem}_{}", eta_label(e)),
            None => stem.to_string(),
        };
        let (stats, _, summary) = run_single(cfg, &model, &sim, &label)?;
        let plan = build_observable_plan(cfg, &model)?;
        let exact = exact_reference_series(cfg, &model, &plan, &stats.times)?;
        for (k, s) in stats.observables.iter().enumerate() {
            let mut csv = String::from("time,trajectory_mean,exact_value,abs_diff,se\n");
            for (j, &t) in stats.times.iter().enumerate() {
                let diff = (s.mean[j] - exact[k][j]).abs();
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    fmt_float(t),
                    fmt_float(s.mean[j]),
                    fmt_float(exact[k][j]),
                    fmt_float(diff),
                    fmt_opt(s.se[j])
                );
            }
            write_file(&dir.join(format!("{label}_compare_{}.csv", s.name)), &csv)?;
        }
        let json = serde_json::to_string_pretty(&summary)
            .map_err(|e| sim_err(format!("summary serialization: {e}")))?;
        write_file(&dir.join(format!("{label}_summary.json")), &json)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// `scan-dt` subcommand: sampling-free channel mode at each dt, trace-norm
/// error against the exact solver at `t_final`, plus a power-law fit.
pub fn cmd_scan_dt(
    cfg: &ExperimentConfig,
    stem: &str,
    override_dir: Option<&Path>,
) -> Result<RunSummary> {
    let dir = out_dir(cfg, override_dir);
    let scan = cfg.scan.as_ref().ok_or_else(|| {
        ExperimentError::ConfigParse("scan-dt needs a [scan] section with dt_list".into())
    })?;
    let model = build_model(&cfg.model, None)?;
    let initial = initial_state(cfg, &model)?;
    let dim = model.dim();
    let mut rho0 = CMat::from_elem((dim, dim), cr(0.0));
    for a in 0..dim {
        for b in 0..dim {
            rho0[(a, b)] = initial[a] * initial[b].conj();
        }
    }
    let rho_exact = propagate_lme(&model, &rho0, cfg.sim.t_final).map_err(sim_err)?;
    let mut points = Vec::new();
    let mut csv = String::from("dt,trace_error\n");
    for &dt in &scan.dt_list {
        let mut sim = cfg.sim.clone();
        sim.dt = dt;
        sim.scheme = Scheme::DeterministicChannel;
        let rho_channel = run_channel(&model, &sim, &rho0).map_err(sim_err)?;
        let err = trace_error(&rho_channel, &rho_exact).map_err(sim_err)?;
        let _ = writeln!(csv, "{},{}", fmt_float(dt), fmt_float(err));
        points.push((dt, err));
    }
    write_file(&dir.join(format!("{stem}_scan.csv")), &csv)?;
    let fit = match fit_scaling_exponent(&points) {
        Ok(f) => Some(f),
        Err(e) => {
            log::warn!("scaling fit unavailable: {e}");
            None
        }
    };
    let summary = RunSummary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        label: format!("{stem}_scan"),
        seed: cfg.sim.seed,
        k_total: 0,
        k_survivors: 0,
        k_eff: 0.0,
        success_empirical: 1.0,
        success_predicted: 1.0,
        wall_time_s: 0.0,
        finals: points
            .iter()
            .map(|&(dt, err)| FinalValue {
                name: format!("trace_error_dt_{dt}"),
                value: err,
                se: None,
            })
            .collect(),
        invariant_digest: InvariantDigest::default(),
        scaling_fit: fit,
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| sim_err(format!("summary serialization: {e}")))?;
    write_file(&dir.join(format!("{stem}_scan_summary.json")), &json)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<VerifyCheck>,
    pub all_passed: bool,
}

fn random_test_channel(seed: u64) -> (DissipationChannel, f64) {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(17);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state as f64 / u64::MAX as f64) - 0.5
    };
    let l_op = CMat::from_shape_fn((4, 4), |_| crate::linalg::c(next(), next()));
    let eta = (next() + 0.5).clamp(0.0, 1.0);
    let gamma = (next() + 0.5).abs() * 2.0 + 0.01;
    let n = spectral_norm(&l_op);
    let dt = 0.9 / (gamma * n * n);
    (
        DissipationChannel::new(l_op, gamma, eta).expect("valid random channel"),
        dt,
    )
}

/// `verify` subcommand: the invariant suite. The configured model's own
/// blocks are also exercised so config problems (e.g. a too-large dt)
/// surface as failed checks without aborting the suite.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let push = |name: String, measured: f64, tolerance: f64, checks: &mut Vec<VerifyCheck>| {
        checks.push(VerifyCheck {
            name,
            passed: measured <= tolerance,
            measured,
            tolerance,
        });
    };

    // 100-channel sweep: completeness, unitarity, forbidden branch
    let mut worst_completeness = 0.0f64;
    let mut worst_unitarity = 0.0f64;
    let mut worst_forbidden = 0.0f64;
    for seed in 0..100u64 {
        let (ch, dt) = random_test_channel(seed);
        let blocks = build_blocks(&ch, dt, 0).map_err(sim_err)?;
        worst_completeness = worst_completeness.max(completeness_error(&blocks));
        let u = assemble_two_dilation(&blocks);
        worst_unitarity = worst_unitarity.max(verify_unitarity(&u));
        let d = blocks.a.nrows();
        let forbidden = u.slice(ndarray::s![3 * d..4 * d, 0..d]);
        worst_forbidden = worst_forbidden
            .max(forbidden.iter().map(|z| z.norm()).fold(0.0, f64::max));
    }
    push("completeness_100_random_channels".into(), worst_completeness, 1e-10, &mut checks);
    push("two_dilation_unitarity_100_random_channels".into(), worst_unitarity, 1e-9, &mut checks);
    push("forbidden_branch_100_random_channels".into(), worst_forbidden, 1e-12, &mut checks);

    // one-dilation assemblies on the atom
    let atom0 = build_atom(1.0, 0.5, 0.0).map_err(|e| ExperimentError::ModelBuild(e.to_string()))?;
    let b0 = build_blocks(&atom0.channels[0], 0.1, 0).map_err(sim_err)?;
    push(
        "one_dilation_lme_unitarity".into(),
        verify_unitarity(&assemble_one_dilation_lme(&b0).map_err(sim_err)?),
        1e-9,
        &mut checks,
    );
    let atom1 = build_atom(1.0, 0.5, 1.0).map_err(|e| ExperimentError::ModelBuild(e.to_string()))?;
    let b1 = build_blocks(&atom1.channels[0], 0.1, 0).map_err(sim_err)?;
    push(
        "one_dilation_enhh_unitarity".into(),
        verify_unitarity(&assemble_one_dilation_enhh(&b1).map_err(sim_err)?),
        1e-9,
        &mut checks,
    );

    // exact solver trace preservation on the atom
    {
        let rho0 = ndarray::array![[cr(1.0), cr(0.0)], [cr(0.0), cr(0.0)]];
        let rho_t = propagate_lme(&atom0, &rho0, 5.0).map_err(sim_err)?;
        let drift = (crate::linalg::trace(&rho_t).re - 1.0).abs();
        push("lme_trace_preservation".into(), drift, 1e-9, &mut checks);
        let rho_n = nlme_series(&atom1, &rho0, &[5.0], 1e-3).map_err(sim_err)?;
        let drift_n = (crate::linalg::trace(&rho_n[0]).re - 1.0).abs();
        push("nlme_trace_preservation".into(), drift_n, 1e-8, &mut checks);
        // channel mode trace preservation over 50 steps
        let sim = SimConfig {
            dt: 0.1,
            t_final: 5.0,
            n_trajectories: 1,
            seed: 0,
            scheme: Scheme::DeterministicChannel,
            hamiltonian_mode: Default::default(),
            step_order: Default::default(),
            no_jump_branch: Default::default(),
        };
        let rho_c = run_channel(&atom0, &sim, &rho0).map_err(sim_err)?;
        let drift_c = (crate::linalg::trace(&rho_c).re - 1.0).abs();
        push("channel_trace_preservation".into(), drift_c, 1e-12, &mut checks);
    }

    // Choi bound on the atom at three time steps
    for &dt in &[0.1, 0.05, 0.01] {
        let report = choi_error_bound_check(&atom0, dt).map_err(sim_err)?;
        push(
            format!("choi_bound_dt_{dt}"),
            report.choi_distance,
            report.bound,
            &mut checks,
        );
    }

    // normalization digest from a short sampled run
    {
        let sim = SimConfig {
            dt: 0.1,
            t_final: 5.0,
            n_trajectories: 50,
            seed: 1,
            scheme: Scheme::Lme1Dilation,
            hamiltonian_mode: Default::default(),
            step_order: Default::default(),
            no_jump_branch: Default::default(),
        };
        let psi0: CVec = ndarray::array![cr(1.0), cr(0.0)];
        let stats = run_ensemble(&atom0, &sim, &psi0, &[], &[sim.n_steps()]).map_err(sim_err)?;
        push("trajectory_norm_drift".into(), stats.digest.max_norm_drift, 1e-10, &mut checks);
        push(
            "trajectory_probability_completeness".into(),
            stats.digest.max_prob_residual,
            1e-8,
            &mut checks,
        );
    }

    // the user's configured model: block construction at the configured dt
    {
        let model = build_model(&cfg.model, None)?;
        let mut worst = 0.0f64;
        let mut failed = false;
        for (i, ch) in model.channels.iter().enumerate() {
            match build_blocks(ch, cfg.sim.dt, i) {
                Ok(b) => worst = worst.max(completeness_error(&b)),
                Err(e) => {
                    log::warn!("configured model channel {i}: {e}");
                    failed = true;
                }
            }
        }
        checks.push(VerifyCheck {
            name: "configured_model_blocks".into(),
            passed: !failed && worst <= 1e-10,
            measured: if failed { f64::INFINITY } else { worst },
            tolerance: 1e-10,
        });
    }

    let all_passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, all_passed })
}

/// `dump-unitary` subcommand: write every channel's assembled dilation
/// unitary as CSV of `row,col,re,im`.
pub fn cmd_dump_unitary(
    cfg: &ExperimentConfig,
    stem: &str,
    override_dir: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg, override_dir);
    let model = build_model(&cfg.model, None)?;
    let mut files = Vec::new();
    for (i, ch) in model.channels.iter().enumerate() {
        let blocks = build_blocks(ch, cfg.sim.dt, i).map_err(sim_err)?;
        let u = match cfg.sim.scheme {
            Scheme::Lme1Dilation | Scheme::DeterministicChannel => {
                assemble_one_dilation_lme(&blocks).map_err(sim_err)?
            }
            Scheme::Enhh1Dilation => assemble_one_dilation_enhh(&blocks).map_err(sim_err)?,
            Scheme::Nlme2Dilation | Scheme::NlmeWeighted => assemble_two_dilation(&blocks),
        };
        let mut csv = String::from("row,col,re,im\n");
        for r in 0..u.nrows() {
            for c_ in 0..u.ncols() {
                let z = u[(r, c_)];
                let _ = writeln!(csv, "{r},{c_},{},{}", fmt_float(z.re), fmt_float(z.im));
            }
        }
        let path = dir.join(format!("{stem}_U{}.csv", i + 1));
        write_file(&path, &csv)?;
        files.push(path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{HamiltonianMode, NoJumpBranch, StepOrder};

    fn atom_config() -> ExperimentConfig {
        toml::from_str(
            r#"
            [model]
            kind = "atom"
            j = 1.0
            gamma = 0.5
            eta = 0.0

            [sim]
            dt = 0.1
            t_final = 1.0
            n_trajectories = 20
            seed = 5
            scheme = "lme_1dilation"

            [run]
            observables = ["pe"]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = atom_config();
        assert_eq!(cfg.model.kind, "atom");
        assert_eq!(cfg.sim.seed, 5);
        assert_eq!(cfg.sim.hamiltonian_mode, HamiltonianMode::ExactExp);
        assert_eq!(cfg.sim.step_order, StepOrder::DissipationThenHamiltonian);
        assert_eq!(cfg.sim.no_jump_branch, NoJumpBranch::SqrtBlock);
        assert!(cfg.run.record_times.is_none());
    }

    #[test]
    fn neel_initial_state_index() {
        let mut cfg = atom_config();
        cfg.model.kind = "xxz".into();
        cfg.model.params.l_sites = 4;
        cfg.run.initial = Some("neel".into());
        let model = build_model(&cfg.model, None).unwrap();
        let psi = initial_state(&cfg, &model).unwrap();
        // |up down up down>: bits 0101 -> index 5
        assert!((psi[0b0101].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn observable_plan_adds_occupations_for_derived() {
        let mut cfg = atom_config();
        cfg.model.kind = "xxz".into();
        cfg.model.params.l_sites = 3;
        cfg.run.observables = vec!["dipr".into(), "occ:2".into()];
        let model = build_model(&cfg.model, None).unwrap();
        let plan = build_observable_plan(&cfg, &model).unwrap();
        assert_eq!(plan.derived, vec!["dipr".to_string()]);
        assert_eq!(plan.occ_indices.len(), 3);
        // occ_2 came first from the user, occ_1/occ_3 were appended
        let names: Vec<&str> = plan.matrix_specs.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["occ_2", "occ_1", "occ_3"]);
        assert_eq!(plan.occ_indices, vec![1, 0, 2]);
    }

    #[test]
    fn record_steps_validation() {
        let mut cfg = atom_config();
        cfg.run.record_times = Some(vec![0.0, 0.5, 1.0]);
        assert_eq!(record_steps(&cfg).unwrap(), vec![0, 5, 10]);
        cfg.run.record_times = Some(vec![0.55]);
        assert!(record_steps(&cfg).is_err());
        cfg.run.record_times = Some(vec![2.0]);
        assert!(record_steps(&cfg).is_err());
        cfg.run.record_times = None;
        assert_eq!(record_steps(&cfg).unwrap().len(), 11);
    }

    #[test]
    fn effective_scheme_rules() {
        assert_eq!(effective_scheme(Scheme::Nlme2Dilation, 0.0), Scheme::Lme1Dilation);
        assert_eq!(effective_scheme(Scheme::Nlme2Dilation, 1.0), Scheme::Enhh1Dilation);
        assert_eq!(effective_scheme(Scheme::Nlme2Dilation, 0.5), Scheme::Nlme2Dilation);
        assert_eq!(effective_scheme(Scheme::NlmeWeighted, 0.5), Scheme::NlmeWeighted);
    }

    #[test]
    fn summary_round_trips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = atom_config();
        let summaries = cmd_run(&cfg, "t", Some(dir.path())).unwrap();
        assert_eq!(summaries.len(), 1);
        let json = std::fs::read_to_string(dir.path().join("t_summary.json")).unwrap();
        let back: RunSummary = serde_json::from_str(&json).unwrap();
        let again = serde_json::to_string_pretty(&back).unwrap();
        assert_eq!(json, again, "summary JSON does not round-trip");
        assert_eq!(back.k_total, 20);
        assert_eq!(back.seed, 5);
    }

    #[test]
    fn run_produces_deterministic_csv() {
        let cfg = atom_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        cmd_run(&cfg, "t", Some(d1.path())).unwrap();
        cmd_run(&cfg, "t", Some(d2.path())).unwrap();
        let a = std::fs::read(d1.path().join("t_timeseries.csv")).unwrap();
        let b = std::fs::read(d2.path().join("t_timeseries.csv")).unwrap();
        assert_eq!(a, b);
        assert!(a.ends_with(b"\n"));
        assert!(!a.contains(&b'\r'));
    }

    #[test]
    fn empty_observables_gives_summary_only() {
        let mut cfg = atom_config();
        cfg.run.observables.clear();
        let dir = tempfile::tempdir().unwrap();
        let summaries = cmd_run(&cfg, "t", Some(dir.path())).unwrap();
        assert!(summaries[0].finals.is_empty());
        assert!(dir.path().join("t_summary.json").exists());
    }

    #[test]
    fn compare_writes_diff_columns() {
        let cfg = atom_config();
        let dir = tempfile::tempdir().unwrap();
        cmd_compare(&cfg, "t", Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("t_compare_pe.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "time,trajectory_mean,exact_value,abs_diff,se"
        );
        // t=0 row: mean and exact both 1 up to solver round-off
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        let diff: f64 = first[3].parse().unwrap();
        assert!(diff.abs() < 1e-12, "t=0 diff {diff}");
    }

    #[test]
    fn verify_passes_on_defaults() {
        let cfg = atom_config();
        let report = cmd_verify(&cfg).unwrap();
        for c in &report.checks {
            assert!(
                c.passed,
                "check {} failed: measured {:e} > tol {:e}",
                c.name, c.measured, c.tolerance
            );
        }
        assert!(report.all_passed);
    }

    #[test]
    fn verify_flags_oversized_timestep_but_completes() {
        let mut cfg = atom_config();
        cfg.sim.dt = 10.0;
        cfg.sim.t_final = 10.0;
        let report = cmd_verify(&cfg).unwrap();
        assert!(!report.all_passed);
        let own = report
            .checks
            .iter()
            .find(|c| c.name == "configured_model_blocks")
            .unwrap();
        assert!(!own.passed);
        // everything else still ran and passed
        assert!(report
            .checks
            .iter()
            .filter(|c| c.name != "configured_model_blocks")
            .all(|c| c.passed));
    }

    #[test]
    fn dump_unitary_writes_one_file_per_channel() {
        let mut cfg = atom_config();
        cfg.model.kind = "xxz".into();
        cfg.model.params.l_sites = 2;
        cfg.model.params.gamma = 0.5;
        let dir = tempfile::tempdir().unwrap();
        let files = cmd_dump_unitary(&cfg, "t", Some(dir.path())).unwrap();
        assert_eq!(files.len(), 2);
        let csv = std::fs::read_to_string(&files[0]).unwrap();
        assert!(csv.starts_with("row,col,re,im\n"));
        // 1-dilation on a 4-dim system: 8x8 = 64 entries + header
        assert_eq!(csv.lines().count(), 65);
    }

    #[test]
    fn scan_dt_fits_trotter_order_on_unitary_model() {
        // gamma = 0: the only error is second-order Trotter -> exponent ~ 2
        let mut cfg = atom_config();
        cfg.model.kind = "xxz".into();
        cfg.model.params.l_sites = 3;
        cfg.model.params.delta = 2.0;
        cfg.model.params.gamma = 0.0;
        // the all-up state is an eigenstate of both Trotter halves, so the
        // splitting error only shows up from a nontrivial initial state
        cfg.run.initial = Some("neel".into());
        cfg.sim.t_final = 1.0;
        cfg.sim.hamiltonian_mode = HamiltonianMode::Trotter2;
        cfg.scan = Some(ScanSection {
            dt_list: vec![0.5, 0.25, 0.125, 0.0625],
        });
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_scan_dt(&cfg, "t", Some(dir.path())).unwrap();
        let fit = summary.scaling_fit.unwrap();
        assert!(
            (1.8..2.2).contains(&fit.exponent),
            "Trotter2 exponent {} not ~2",
            fit.exponent
        );
        assert!(fit.r_squared > 0.99);
    }

    #[test]
    fn exit_codes_are_distinct() {
        assert_eq!(ExperimentError::ConfigParse("x".into()).exit_code(), 2);
        assert_eq!(ExperimentError::ModelBuild("x".into()).exit_code(), 3);
        assert_eq!(ExperimentError::Simulation("x".into()).exit_code(), 4);
    }
}

