//! Open-system model definitions.
//!
//! An [`OpenSystemModel`] is a Hermitian Hamiltonian plus an ordered list of
//! dissipation channels `(L_mu, gamma_mu, eta_mu)`. Constructors build the
//! four concrete systems the crate targets: a monitored two-level atom, a
//! dissipative XXZ chain, a quasiperiodic localization chain, and the
//! postselected-skin chain.
//!
//! Conventions fixed here once and for all:
//! * site 1 is the leftmost Kronecker factor;
//! * `|up> = (1,0)^T` is the excited state, so `sigma^+ = |up><down|` and
//!   the occupation `n_l = sigma_l^+ sigma_l^-` counts spin-up;
//! * all chains have open boundaries (bond sums run over `l = 1..L-1`).

use crate::linalg::{c, cr, dagger, hermiticity_error, identity, kron, zeros, CMat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("eta = {0} outside [0, 1]")]
    InvalidEta(f64),
    #[error("rate = {0} must be non-negative")]
    InvalidRate(f64),
    #[error("chain models need at least 2 sites, got {0}")]
    TooFewSites(usize),
    #[error("Hamiltonian is not Hermitian (max |H - H^dag| = {0:.3e})")]
    NonHermitianHamiltonian(f64),
    #[error("channel {index}: jump operator is {rows}x{cols}, system dimension is {dim}")]
    ChannelDimMismatch {
        index: usize,
        rows: usize,
        cols: usize,
        dim: usize,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Golden-ratio-conjugate default for the quasiperiodic frequency.
pub fn default_omega() -> f64 {
    (5.0f64.sqrt() - 1.0) / 2.0
}

pub fn sigma_x() -> CMat {
    ndarray::array![[cr(0.0), cr(1.0)], [cr(1.0), cr(0.0)]]
}

pub fn sigma_y() -> CMat {
    ndarray::array![[cr(0.0), c(0.0, -1.0)], [c(0.0, 1.0), cr(0.0)]]
}

pub fn sigma_z() -> CMat {
    ndarray::array![[cr(1.0), cr(0.0)], [cr(0.0), cr(-1.0)]]
}

/// `sigma^+ = |up><down|` with `|up> = (1,0)^T` (raises toward excited).
pub fn sigma_plus() -> CMat {
    ndarray::array![[cr(0.0), cr(1.0)], [cr(0.0), cr(0.0)]]
}

pub fn sigma_minus() -> CMat {
    ndarray::array![[cr(0.0), cr(0.0)], [cr(1.0), cr(0.0)]]
}

/// Occupation `n = sigma^+ sigma^- = |up><up|`.
pub fn number_op() -> CMat {
    ndarray::array![[cr(1.0), cr(0.0)], [cr(0.0), cr(0.0)]]
}

/// Embed a single-site operator at 1-based site `l` of an `n_sites` chain.
/// Site 1 is the leftmost Kronecker factor.
pub fn site_op(op: &CMat, l: usize, n_sites: usize) -> CMat {
    assert!(l >= 1 && l <= n_sites, "site index {l} out of 1..={n_sites}");
    let mut out = if l == 1 { op.clone() } else { identity(2) };
    for site in 2..=n_sites {
        let factor = if site == l { op.clone() } else { identity(2) };
        out = kron(&out, &factor);
    }
    out
}

/// One dissipation channel `gamma (L rho L^dag - ...)` with postselection
/// strength `eta`.
#[derive(Debug, Clone)]
pub struct DissipationChannel {
    pub jump_operator: CMat,
    pub rate: f64,
    pub eta: f64,
}

impl DissipationChannel {
    pub fn new(jump_operator: CMat, rate: f64, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(ModelError::InvalidEta(eta));
        }
        if rate < 0.0 {
            return Err(ModelError::InvalidRate(rate));
        }
        Ok(Self {
            jump_operator,
            rate,
            eta,
        })
    }
}

/// Odd/even bond split of a chain Hamiltonian for second-order Trotter.
/// On-site terms are folded into `h_odd`.
#[derive(Debug, Clone)]
pub struct TrotterSplit {
    pub h_odd: CMat,
    pub h_even: CMat,
}

#[derive(Debug, Clone)]
pub struct OpenSystemModel {
    pub hamiltonian: CMat,
    pub channels: Vec<DissipationChannel>,
    pub n_sites: usize,
    pub local_dim: usize,
    /// Present for chain models; `None` means Trotter mode is unavailable.
    pub trotter_split: Option<TrotterSplit>,
}

impl OpenSystemModel {
    pub fn new(
        hamiltonian: CMat,
        channels: Vec<DissipationChannel>,
        n_sites: usize,
        trotter_split: Option<TrotterSplit>,
    ) -> Result<Self> {
        let herr = hermiticity_error(&hamiltonian);
        if herr > 1e-12 {
            return Err(ModelError::NonHermitianHamiltonian(herr));
        }
        let dim = hamiltonian.nrows();
        for (i, ch) in channels.iter().enumerate() {
            if ch.jump_operator.nrows() != dim || ch.jump_operator.ncols() != dim {
                return Err(ModelError::ChannelDimMismatch {
                    index: i,
                    rows: ch.jump_operator.nrows(),
                    cols: ch.jump_operator.ncols(),
                    dim,
                });
            }
        }
        Ok(Self {
            hamiltonian,
            channels,
            n_sites,
            local_dim: 2,
            trotter_split,
        })
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.nrows()
    }
}

/// Physical parameters shared by all model builders. Unused fields are
/// ignored by builders that do not need them.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// Hopping / exchange coupling.
    pub j: f64,
    /// XXZ anisotropy.
    pub delta: f64,
    /// Dissipation rate gamma (shared by all channels).
    pub gamma: f64,
    /// Postselection strength eta.
    pub eta: f64,
    /// Quasiperiodic potential amplitude.
    pub v: f64,
    /// Quasiperiodic frequency omega.
    pub omega: f64,
    /// Bond-dissipator phase alpha (radians).
    pub alpha: f64,
    /// Bond-dissipator phase beta (radians).
    pub beta: f64,
    /// Number of chain sites.
    pub l_sites: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            j: 1.0,
            delta: 0.0,
            gamma: 0.0,
            eta: 0.0,
            v: 0.0,
            omega: default_omega(),
            alpha: 0.0,
            beta: 0.0,
            l_sites: 2,
        }
    }
}

/// Two-level atom with monitored spontaneous emission:
/// `H = J sigma^x`, one channel `L = sigma^-` at rate `gamma`, strength `eta`.
pub fn build_atom(j: f64, gamma: f64, eta: f64) -> Result<OpenSystemModel> {
    let h = sigma_x().mapv(|z| z * cr(j));
    let channel = DissipationChannel::new(sigma_minus(), gamma, eta)?;
    OpenSystemModel::new(h, vec![channel], 1, None)
}

fn require_chain(l: usize) -> Result<()> {
    if l < 2 {
        return Err(ModelError::TooFewSites(l));
    }
    Ok(())
}

/// Bond operator `op_l (x) op_{l+1}` on 1-based bond `l`.
fn bond_op(op_a: &CMat, op_b: &CMat, l: usize, n_sites: usize) -> CMat {
    site_op(op_a, l, n_sites).dot(&site_op(op_b, l + 1, n_sites))
}

/// Dissipative XXZ chain:
/// `H = J sum_l [sx sx + sy sy + Delta sz sz]` (open boundary), one channel
/// `L_l = sigma_l^-` per site at rate `gamma`, all `eta = 0`.
pub fn build_xxz(params: &ModelParams) -> Result<OpenSystemModel> {
    let l_sites = params.l_sites;
    require_chain(l_sites)?;
    let dim = 1usize << l_sites;
    let mut h_odd = zeros(dim, dim);
    let mut h_even = zeros(dim, dim);
    for l in 1..l_sites {
        let mut term = bond_op(&sigma_x(), &sigma_x(), l, l_sites)
            + bond_op(&sigma_y(), &sigma_y(), l, l_sites);
        term = term + bond_op(&sigma_z(), &sigma_z(), l, l_sites).mapv(|z| z * cr(params.delta));
        term.mapv_inplace(|z| z * cr(params.j));
        if l % 2 == 1 {
            h_odd += &term;
        } else {
            h_even += &term;
        }
    }
    let h = &h_odd + &h_even;
    let channels = (1..=l_sites)
        .map(|l| DissipationChannel::new(site_op(&sigma_minus(), l, l_sites), params.gamma, 0.0))
        .collect::<Result<Vec<_>>>()?;
    OpenSystemModel::new(h, channels, l_sites, Some(TrotterSplit { h_odd, h_even }))
}

/// Bond jump operator
/// `L_l = (1/2)(sigma_l^+ + e^{i alpha} sigma_{l+1}^+)(sigma_l^- + e^{i beta} sigma_{l+1}^-)`.
pub fn bond_jump_operator(alpha: f64, beta: f64, l: usize, n_sites: usize) -> CMat {
    let raise = site_op(&sigma_plus(), l, n_sites)
        + site_op(&sigma_plus(), l + 1, n_sites).mapv(|z| z * c(0.0, alpha).exp());
    let lower = site_op(&sigma_minus(), l, n_sites)
        + site_op(&sigma_minus(), l + 1, n_sites).mapv(|z| z * c(0.0, beta).exp());
    raise.dot(&lower).mapv(|z| z * cr(0.5))
}

/// Hopping + quasiperiodic chain Hamiltonian with odd/even bond split;
/// on-site `V cos(2 pi omega l) sigma_l^z` terms go into the odd layer.
fn hopping_hamiltonian(params: &ModelParams, v: f64) -> (CMat, CMat) {
    let l_sites = params.l_sites;
    let dim = 1usize << l_sites;
    let mut h_odd = zeros(dim, dim);
    let mut h_even = zeros(dim, dim);
    for l in 1..l_sites {
        let hop = bond_op(&sigma_plus(), &sigma_minus(), l, l_sites)
            + bond_op(&sigma_minus(), &sigma_plus(), l, l_sites);
        let term = hop.mapv(|z| z * cr(params.j));
        if l % 2 == 1 {
            h_odd += &term;
        } else {
            h_even += &term;
        }
    }
    if v != 0.0 {
        for l in 1..=l_sites {
            let amp = v * (2.0 * std::f64::consts::PI * params.omega * l as f64).cos();
            h_odd = h_odd + site_op(&sigma_z(), l, l_sites).mapv(|z| z * cr(amp));
        }
    }
    (h_odd, h_even)
}

fn build_bond_dissipation_chain(params: &ModelParams, v: f64, eta: f64) -> Result<OpenSystemModel> {
    let l_sites = params.l_sites;
    require_chain(l_sites)?;
    let (h_odd, h_even) = hopping_hamiltonian(params, v);
    let h = &h_odd + &h_even;
    let channels = (1..l_sites)
        .map(|l| {
            DissipationChannel::new(
                bond_jump_operator(params.alpha, params.beta, l, l_sites),
                params.gamma,
                eta,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    OpenSystemModel::new(h, channels, l_sites, Some(TrotterSplit { h_odd, h_even }))
}

/// Quasiperiodic localization chain: hopping plus `V cos(2 pi omega l)`
/// on-site potential, `L-1` bond channels with phases `(alpha, beta)`.
pub fn build_localization(params: &ModelParams) -> Result<OpenSystemModel> {
    build_bond_dissipation_chain(params, params.v, params.eta)
}

/// Postselected-skin chain: same bond channels but no on-site potential
/// (`V = 0`) and nonzero `eta`.
pub fn build_skin(params: &ModelParams) -> Result<OpenSystemModel> {
    build_bond_dissipation_chain(params, 0.0, params.eta)
}

/// `H_eff = H - (i/2) sum_mu gamma_mu L_mu^dag L_mu`.
pub fn effective_hamiltonian(model: &OpenSystemModel) -> CMat {
    let mut h_eff = model.hamiltonian.clone();
    for ch in &model.channels {
        let ldl = dagger(&ch.jump_operator).dot(&ch.jump_operator);
        h_eff = h_eff + ldl.mapv(|z| z * c(0.0, -0.5 * ch.rate));
    }
    h_eff
}
