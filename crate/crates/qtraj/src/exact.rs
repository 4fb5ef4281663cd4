//! Exact reference solvers on the density-matrix level.
//!
//! Vectorization uses column stacking, `vec(A X B) = (B^T (x) A) vec(X)`, so
//! the linear part of the master equation becomes
//!
//! ```text
//! Lvec = -i (I (x) H - H^T (x) I)
//!        + sum_mu gamma_mu [ (1-eta_mu) (conj(L) (x) L)
//!                            - 1/2 (I (x) L^dag L + (L^dag L)^T (x) I) ]
//! ```
//!
//! and the state-dependent `eta gamma <L^dag L> rho` term is handled by the
//! RK4 integrator. The exact solvers are the ground truth for every
//! small-system validation.

use crate::linalg::{
    c, cr, dagger, eig_general, identity, kron, matrix_exp, trace, trace_norm, vec_norm,
    zeros, CMat, CVec, LinalgError,
};
use crate::model::{effective_hamiltonian, OpenSystemModel};
use crate::trajectory::{build_context, deterministic_channel_step, Scheme, SimConfig};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("system dimension {dim} exceeds the limit {limit} for this solver")]
    DimensionTooLarge { dim: usize, limit: usize },
    #[error("channel {0} has eta != 0; this solver handles the linear Lindblad case only")]
    EtaNotZero(usize),
    #[error("integrator trace drift {0:.3e} exceeds 1e-6")]
    TraceDrift(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Trajectory(#[from] Box<crate::trajectory::TrajectoryError>),
}

pub type Result<T> = std::result::Result<T, ExactError>;

/// Largest system dimension whose Liouvillian (dim^2 x dim^2) is built.
pub const LIOUVILLIAN_MAX_DIM: usize = 64;
/// Largest dimension for the pure-state effective-Hamiltonian propagator.
pub const ENHH_MAX_DIM: usize = 1024;
/// Largest dimension for the Choi-state bound check.
pub const CHOI_MAX_DIM: usize = 16;

#[derive(Debug, Clone)]
pub struct Liouvillian {
    pub matrix: CMat,
    pub dim: usize,
}

/// Column-stacking `vec`: `out[j*d + i] = m[i, j]`.
pub fn vec_rho(m: &CMat) -> CVec {
    let d = m.nrows();
    CVec::from_shape_fn(d * d, |k| m[(k % d, k / d)])
}

pub fn unvec_rho(v: &CVec, d: usize) -> CMat {
    CMat::from_shape_fn((d, d), |(i, j)| v[j * d + i])
}

/// Build the linear superoperator: full Lindblad generator for `eta = 0`
/// channels; for `eta > 0` the jump term carries the `(1 - eta)` weight and
/// the compensating `eta gamma <L^dag L> rho` term is left to the nonlinear
/// integrator.
pub fn build_liouvillian(model: &OpenSystemModel) -> Result<Liouvillian> {
    let d = model.dim();
    if d > LIOUVILLIAN_MAX_DIM {
        return Err(ExactError::DimensionTooLarge {
            dim: d,
            limit: LIOUVILLIAN_MAX_DIM,
        });
    }
    let id = identity(d);
    let h = &model.hamiltonian;
    let mut sup = kron(&id, h).mapv(|z| z * c(0.0, -1.0));
    sup = sup + kron(&h.t().to_owned(), &id).mapv(|z| z * c(0.0, 1.0));
    for ch in &model.channels {
        let l_op = &ch.jump_operator;
        let ldl = dagger(l_op).dot(l_op);
        let jump = kron(&l_op.mapv(|z| z.conj()), l_op)
            .mapv(|z| z * cr((1.0 - ch.eta) * ch.rate));
        sup = sup + jump;
        let anti = kron(&id, &ldl) + kron(&ldl.t().to_owned(), &id);
        sup = sup + anti.mapv(|z| z * cr(-0.5 * ch.rate));
    }
    Ok(Liouvillian { matrix: sup, dim: d })
}

fn require_eta_zero(model: &OpenSystemModel) -> Result<()> {
    for (i, ch) in model.channels.iter().enumerate() {
        if ch.eta.abs() > 1e-12 {
            return Err(ExactError::EtaNotZero(i));
        }
    }
    Ok(())
}

/// `exp(M t)` preferring the eigendecomposition of the (generically
/// non-normal) generator, with a scaling-and-squaring fallback when the
/// eigenbasis is too ill-conditioned to reconstruct `M`.
fn superop_exp(m: &CMat, t: f64) -> Result<CMat> {
    match eig_general(m) {
        Ok((w, v, v_inv, resid)) if resid <= 1e-8 => {
            let mut scaled = v.clone();
            for (k, mut col) in scaled.columns_mut().into_iter().enumerate() {
                let f = (w[k] * cr(t)).exp();
                col.mapv_inplace(|z| z * f);
            }
            Ok(scaled.dot(&v_inv))
        }
        _ => Ok(matrix_exp(&m.mapv(|z| z * cr(t)))?),
    }
}

/// `rho(t) = unvec(exp(L t) vec(rho0))` for the plain Lindblad equation.
pub fn propagate_lme(model: &OpenSystemModel, rho0: &CMat, t: f64) -> Result<CMat> {
    Ok(lme_series(model, rho0, &[t])?.pop().expect("one time requested"))
}

/// Batched LME propagation: the Liouvillian is diagonalized once and
/// evaluated at every requested time.
pub fn lme_series(model: &OpenSystemModel, rho0: &CMat, times: &[f64]) -> Result<Vec<CMat>> {
    require_eta_zero(model)?;
    let liou = build_liouvillian(model)?;
    let v0 = vec_rho(rho0);
    let d = liou.dim;
    let eig = eig_general(&liou.matrix);
    let mut out = Vec::with_capacity(times.len());
    match eig {
        Ok((w, v, v_inv, resid)) if resid <= 1e-8 => {
            let coeffs = v_inv.dot(&v0);
            for &t in times {
                let evolved: CVec = CVec::from_shape_fn(d * d, |_| cr(0.0));
                let mut evolved = evolved;
                for k in 0..d * d {
                    let f = (w[k] * cr(t)).exp() * coeffs[k];
                    for i in 0..d * d {
                        evolved[i] += v[(i, k)] * f;
                    }
                }
                out.push(unvec_rho(&evolved, d));
            }
        }
        _ => {
            for &t in times {
                let prop = matrix_exp(&liou.matrix.mapv(|z| z * cr(t)))?;
                out.push(unvec_rho(&prop.dot(&v0), d));
            }
        }
    }
    for rho in &out {
        let drift = (trace(rho).re - 1.0).abs().max(trace(rho).im.abs());
        if drift > 1e-9 * trace_scale(rho0) {
            return Err(ExactError::TraceDrift(drift));
        }
    }
    Ok(out)
}

fn trace_scale(rho0: &CMat) -> f64 {
    trace(rho0).norm().max(1.0)
}

/// Right-hand side of the nonlinear master equation in matrix form.
fn nlme_rhs(liou: &Liouvillian, nl_ops: &[(f64, CMat)], rho: &CMat) -> CMat {
    let d = liou.dim;
    let linear = unvec_rho(&liou.matrix.dot(&vec_rho(rho)), d);
    let mut out = linear;
    for (coeff, ldl) in nl_ops {
        let expect = trace(&ldl.dot(rho)).re;
        out = out + rho.mapv(|z| z * cr(coeff * expect));
    }
    out
}

/// Classic fixed-step RK4 for the nonlinear master equation; `h_int` is the
/// integrator step (the caller usually passes `min(1e-3, dt/10)`).
pub fn propagate_nlme(model: &OpenSystemModel, rho0: &CMat, t: f64, h_int: f64) -> Result<CMat> {
    Ok(nlme_series(model, rho0, &[t], h_int)?.pop().expect("one time requested"))
}

/// RK4 integration recording the state at each requested time. Times must be
/// sorted ascending.
pub fn nlme_series(
    model: &OpenSystemModel,
    rho0: &CMat,
    times: &[f64],
    h_int: f64,
) -> Result<Vec<CMat>> {
    let d = model.dim();
    if d > LIOUVILLIAN_MAX_DIM {
        return Err(ExactError::DimensionTooLarge {
            dim: d,
            limit: LIOUVILLIAN_MAX_DIM,
        });
    }
    let liou = build_liouvillian(model)?;
    let nl_ops: Vec<(f64, CMat)> = model
        .channels
        .iter()
        .filter(|ch| ch.eta.abs() > 1e-12)
        .map(|ch| {
            (
                ch.eta * ch.rate,
                dagger(&ch.jump_operator).dot(&ch.jump_operator),
            )
        })
        .collect();
    let mut rho = rho0.clone();
    let mut t_now = 0.0f64;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        assert!(target >= t_now - 1e-12, "times must be sorted ascending");
        while target - t_now > 1e-12 {
            let h = h_int.min(target - t_now);
            let k1 = nlme_rhs(&liou, &nl_ops, &rho);
            let k2 = nlme_rhs(&liou, &nl_ops, &(&rho + &k1.mapv(|z| z * cr(h / 2.0))));
            let k3 = nlme_rhs(&liou, &nl_ops, &(&rho + &k2.mapv(|z| z * cr(h / 2.0))));
            let k4 = nlme_rhs(&liou, &nl_ops, &(&rho + &k3.mapv(|z| z * cr(h))));
            let incr = k1 + k2.mapv(|z| z * cr(2.0)) + k3.mapv(|z| z * cr(2.0)) + k4;
            rho = &rho + &incr.mapv(|z| z * cr(h / 6.0));
            t_now += h;
            let drift = (trace(&rho).re - 1.0).abs().max(trace(&rho).im.abs());
            if drift > 1e-6 * trace_scale(rho0) {
                return Err(ExactError::TraceDrift(drift));
            }
        }
        out.push(rho.clone());
    }
    Ok(out)
}

/// Normalized no-jump evolution `e^{-i H_eff t} |psi0> / |...|`.
pub fn propagate_enhh(model: &OpenSystemModel, psi0: &CVec, t: f64) -> Result<CVec> {
    let d = model.dim();
    if d > ENHH_MAX_DIM {
        return Err(ExactError::DimensionTooLarge {
            dim: d,
            limit: ENHH_MAX_DIM,
        });
    }
    let h_eff = effective_hamiltonian(model);
    let prop = matrix_exp(&h_eff.mapv(|z| z * c(0.0, -t)))?;
    let mut psi = prop.dot(psi0);
    let n = vec_norm(&psi);
    if n > 0.0 {
        psi.mapv_inplace(|z| z / cr(n));
    }
    Ok(psi)
}

#[derive(Debug, Clone, Copy)]
pub struct ChoiBoundReport {
    /// Trace distance between the Choi states of the one-step digital map
    /// and the exact semigroup step — a lower bound on the diamond distance.
    pub choi_distance: f64,
    /// `6 lambda^2 dt^2`.
    pub bound: f64,
    pub lambda: f64,
}

/// `lambda = |H| + M * max_mu gamma_mu |L_mu|^2`.
pub fn lambda_scale(model: &OpenSystemModel) -> f64 {
    use crate::linalg::spectral_norm;
    let h_norm = spectral_norm(&model.hamiltonian);
    let m = model.channels.len() as f64;
    let max_channel = model
        .channels
        .iter()
        .map(|ch| {
            let n = spectral_norm(&ch.jump_operator);
            ch.rate * n * n
        })
        .fold(0.0, f64::max);
    h_norm + m * max_channel
}

/// Compare one step of the digital channel against `e^{L dt}` through their
/// Choi states and check the quadratic error bound.
pub fn choi_error_bound_check(model: &OpenSystemModel, dt: f64) -> Result<ChoiBoundReport> {
    require_eta_zero(model)?;
    let d = model.dim();
    if d > CHOI_MAX_DIM {
        return Err(ExactError::DimensionTooLarge {
            dim: d,
            limit: CHOI_MAX_DIM,
        });
    }
    let config = SimConfig {
        dt,
        t_final: dt,
        n_trajectories: 1,
        seed: 0,
        scheme: Scheme::DeterministicChannel,
        hamiltonian_mode: Default::default(),
        step_order: Default::default(),
        no_jump_branch: Default::default(),
    };
    let ctx = build_context(model, &config).map_err(Box::new)?;
    let liou = build_liouvillian(model)?;
    let semigroup = superop_exp(&liou.matrix, dt)?;
    // Choi states J = (1/d) sum_ij Phi(E_ij) (x) E_ij for both maps
    let mut j_channel = zeros(d * d, d * d);
    let mut j_exact = zeros(d * d, d * d);
    for i in 0..d {
        for jj in 0..d {
            let mut e_ij = zeros(d, d);
            e_ij[(i, jj)] = cr(1.0);
            let phi_channel =
                deterministic_channel_step(&e_ij, &ctx).map_err(Box::new)?;
            let phi_exact = unvec_rho(&semigroup.dot(&vec_rho(&e_ij)), d);
            accumulate_choi(&mut j_channel, &phi_channel, i, jj, d);
            accumulate_choi(&mut j_exact, &phi_exact, i, jj, d);
        }
    }
    let scale = cr(1.0 / d as f64);
    j_channel.mapv_inplace(|z| z * scale);
    j_exact.mapv_inplace(|z| z * scale);
    let choi_distance = trace_norm(&(&j_channel - &j_exact))?;
    let lambda = lambda_scale(model);
    Ok(ChoiBoundReport {
        choi_distance,
        bound: 6.0 * lambda * lambda * dt * dt,
        lambda,
    })
}

/// Add `Phi(E_ij) (x) E_ij` into the Choi accumulator.
fn accumulate_choi(target: &mut Array2<crate::C64>, phi: &CMat, i: usize, j: usize, d: usize) {
    for a in 0..d {
        for b in 0..d {
            target[(a * d + i, b * d + j)] += phi[(a, b)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermiticity_error;
    use crate::model::{build_atom, build_xxz, ModelParams};
    use approx::assert_abs_diff_eq;

    fn rho_excited() -> CMat {
        ndarray::array![[cr(1.0), cr(0.0)], [cr(0.0), cr(0.0)]]
    }

    #[test]
    fn vec_unvec_roundtrip() {
        let m = ndarray::array![[c(1.0, 2.0), c(3.0, 4.0)], [c(5.0, 6.0), c(7.0, 8.0)]];
        let v = vec_rho(&m);
        // column stacking: (m00, m10, m01, m11)
        assert_eq!(v[0], m[(0, 0)]);
        assert_eq!(v[1], m[(1, 0)]);
        assert_eq!(v[2], m[(0, 1)]);
        let back = unvec_rho(&v, 2);
        assert_eq!(back, m);
    }

    #[test]
    fn liouvillian_decay_spectrum() {
        // H = 0, L = sigma-, gamma = 1: eigenvalues {0, -1/2, -1/2, -1}
        let model = build_atom(0.0, 1.0, 0.0).unwrap();
        let liou = build_liouvillian(&model).unwrap();
        let (w, _, _, resid) = eig_general(&liou.matrix).unwrap();
        assert!(resid < 1e-10);
        let mut re: Vec<f64> = w.iter().map(|z| z.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect = [-1.0, -0.5, -0.5, 0.0];
        for (got, want) in re.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn liouvillian_gamma_zero_is_commutator() {
        let model = build_atom(1.0, 0.0, 0.0).unwrap();
        let liou = build_liouvillian(&model).unwrap();
        // spectrum on the imaginary axis
        let (w, _, _, _) = eig_general(&liou.matrix).unwrap();
        for z in w.iter() {
            assert!(z.re.abs() < 1e-10, "eigenvalue {z} off the imaginary axis");
        }
    }

    #[test]
    fn liouvillian_trace_left_null_vector() {
        let model = build_atom(1.0, 0.5, 0.0).unwrap();
        let liou = build_liouvillian(&model).unwrap();
        // vec(I) is a left null vector: d/dt Tr rho = 0
        let vid = vec_rho(&identity(2));
        let left = vid.mapv(|z| z.conj()).dot(&liou.matrix);
        let worst = left.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn lme_pure_decay_closed_form() {
        let model = build_atom(0.0, 0.5, 0.0).unwrap();
        for &t in &[0.0, 0.5, 1.0, 2.0, 5.0] {
            let rho = propagate_lme(&model, &rho_excited(), t).unwrap();
            assert_abs_diff_eq!(rho[(0, 0)].re, (-0.5 * t).exp(), epsilon = 1e-9);
            assert_abs_diff_eq!(trace(&rho).re, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn lme_rejects_eta_nonzero_and_big_dims() {
        let m = build_atom(1.0, 0.5, 0.3).unwrap();
        assert!(matches!(
            propagate_lme(&m, &rho_excited(), 1.0),
            Err(ExactError::EtaNotZero(0))
        ));
        let params = ModelParams {
            l_sites: 7,
            gamma: 0.1,
            ..Default::default()
        };
        let big = build_xxz(&params).unwrap();
        let rho0 = identity(128).mapv(|z| z / cr(128.0));
        assert!(matches!(
            propagate_lme(&big, &rho0, 1.0),
            Err(ExactError::DimensionTooLarge { .. })
        ));
    }

    /// Independent RK4 oracle for the *linear* Lindblad equation, written
    /// directly in Lindblad form without the vectorized superoperator.
    fn rk4_lindblad_oracle(model: &OpenSystemModel, rho0: &CMat, t: f64, h: f64) -> CMat {
        let rhs = |rho: &CMat| -> CMat {
            let h_m = &model.hamiltonian;
            let mut out = (h_m.dot(rho) - rho.dot(h_m)).mapv(|z| z * c(0.0, -1.0));
            for ch in &model.channels {
                let l = &ch.jump_operator;
                let ldl = dagger(l).dot(l);
                let mut d = l.dot(rho).dot(&dagger(l));
                d = d - (ldl.dot(rho) + rho.dot(&ldl)).mapv(|z| z * cr(0.5));
                out = out + d.mapv(|z| z * cr(ch.rate));
            }
            out
        };
        let steps = (t / h).round() as usize;
        let hh = t / steps as f64;
        let mut rho = rho0.clone();
        for _ in 0..steps {
            let k1 = rhs(&rho);
            let k2 = rhs(&(&rho + &k1.mapv(|z| z * cr(hh / 2.0))));
            let k3 = rhs(&(&rho + &k2.mapv(|z| z * cr(hh / 2.0))));
            let k4 = rhs(&(&rho + &k3.mapv(|z| z * cr(hh))));
            let incr = k1 + k2.mapv(|z| z * cr(2.0)) + k3.mapv(|z| z * cr(2.0)) + k4;
            rho = &rho + &incr.mapv(|z| z * cr(hh / 6.0));
        }
        rho
    }

    #[test]
    fn lme_matches_rk4_oracle_on_atom() {
        let model = build_atom(1.0, 0.5, 0.0).unwrap();
        let rho_exact = propagate_lme(&model, &rho_excited(), 3.0).unwrap();
        let rho_rk4 = rk4_lindblad_oracle(&model, &rho_excited(), 3.0, 1e-3);
        let diff = (&rho_exact - &rho_rk4)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "LME vs RK4 oracle diff = {diff:e}");
    }

    #[test]
    fn lme_matches_rk4_oracle_on_xxz() {
        let params = ModelParams {
            j: 1.0,
            delta: 2.0,
            gamma: 0.5,
            l_sites: 3,
            ..Default::default()
        };
        let model = build_xxz(&params).unwrap();
        let mut rho0 = zeros(8, 8);
        rho0[(0, 0)] = cr(1.0); // all-up
        let a = propagate_lme(&model, &rho0, 2.0).unwrap();
        let b = rk4_lindblad_oracle(&model, &rho0, 2.0, 5e-4);
        let diff = trace_norm(&(&a - &b)).unwrap();
        assert!(diff < 1e-7, "trace-norm diff {diff:e}");
        assert!(hermiticity_error(&a) < 1e-9);
        assert_abs_diff_eq!(trace(&a).re, 1.0, epsilon = 1e-9);
        // positivity within tolerance
        let min_eig = crate::linalg::min_eigenvalue(&((&a + &dagger(&a)).mapv(|z| z * cr(0.5)))).unwrap();
        assert!(min_eig > -1e-7, "min eigenvalue {min_eig:e}");
    }

    #[test]
    fn nlme_reduces_to_lme_at_eta_zero() {
        let model = build_atom(1.0, 0.5, 0.0).unwrap();
        let a = propagate_lme(&model, &rho_excited(), 2.0).unwrap();
        let b = propagate_nlme(&model, &rho_excited(), 2.0, 1e-3).unwrap();
        assert!(trace_norm(&(&a - &b)).unwrap() < 1e-7);
    }

    #[test]
    fn nlme_eta_one_fixed_point() {
        // |e><e| is an eigenstate of L^dag L: normalized decay keeps rho_ee = 1
        let model = build_atom(0.0, 0.5, 1.0).unwrap();
        let rho = propagate_nlme(&model, &rho_excited(), 4.0, 1e-3).unwrap();
        assert_abs_diff_eq!(rho[(0, 0)].re, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn nlme_monotone_in_eta_at_t5() {
        // regression on the observed interpolation structure: at t = 5 the
        // excited population decreases monotonically from eta=0 to eta=1
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let eta = k as f64 / 10.0;
            let model = build_atom(1.0, 0.5, eta).unwrap();
            let rho = propagate_nlme(&model, &rho_excited(), 5.0, 1e-3).unwrap();
            let pe = rho[(0, 0)].re;
            assert!(
                pe <= last + 1e-6,
                "P_e(eta={eta}) = {pe} above previous {last}"
            );
            last = pe;
        }
    }

    #[test]
    fn enhh_closed_form_and_rk4_crosscheck() {
        // J=0: amplitudes decay as (e^{-gamma t / 2}, 1) / norm
        let model = build_atom(0.0, 0.5, 1.0).unwrap();
        let psi0: CVec = ndarray::array![cr(1.0), cr(1.0)].mapv(|z| z / cr(2.0f64.sqrt()));
        let t = 2.0;
        let psi = propagate_enhh(&model, &psi0, t).unwrap();
        let decay = (-0.25f64 * t).exp();
        let norm = (decay * decay + 1.0).sqrt();
        assert_abs_diff_eq!(psi[0].re, decay / norm, epsilon = 1e-9);
        assert_abs_diff_eq!(psi[1].re, 1.0 / norm, epsilon = 1e-9);
        // gamma=0 is plain unitary evolution
        let free = build_atom(1.0, 0.0, 1.0).unwrap();
        let psi_f = propagate_enhh(&free, &ndarray::array![cr(1.0), cr(0.0)], 0.7).unwrap();
        assert_abs_diff_eq!(psi_f[0].norm(), 0.7f64.cos().abs(), epsilon = 1e-10);
        // J=1 cross-check against the eta=1 RK4 density matrix
        let driven = build_atom(1.0, 0.5, 1.0).unwrap();
        let rho_rk4 = propagate_nlme(&driven, &rho_excited(), 10.0, 2e-4).unwrap();
        let psi_t = propagate_enhh(&driven, &ndarray::array![cr(1.0), cr(0.0)], 10.0).unwrap();
        let pe_psi = psi_t[0].norm_sqr();
        assert!(
            (pe_psi - rho_rk4[(0, 0)].re).abs() < 1e-6,
            "ENHH pure-state vs RK4: {} vs {}",
            pe_psi,
            rho_rk4[(0, 0)].re
        );
    }

    #[test]
    fn choi_bound_atom() {
        let model = build_atom(1.0, 0.5, 0.0).unwrap();
        // lambda = |H| + M gamma |L|^2 = 1 + 0.5
        assert_abs_diff_eq!(lambda_scale(&model), 1.5, epsilon = 1e-10);
        let mut distances = Vec::new();
        for &dt in &[0.1, 0.05, 0.01] {
            let report = choi_error_bound_check(&model, dt).unwrap();
            assert_abs_diff_eq!(report.lambda, 1.5, epsilon = 1e-10);
            assert_abs_diff_eq!(report.bound, 6.0 * 2.25 * dt * dt, epsilon = 1e-12);
            assert!(
                report.choi_distance <= report.bound,
                "Choi distance {} exceeds bound {} at dt={dt}",
                report.choi_distance,
                report.bound
            );
            distances.push((dt, report.choi_distance));
        }
        // quadratic scaling: distance ratio ~ (dt ratio)^2 between 0.1 and 0.01
        let ratio = distances[0].1 / distances[2].1;
        assert!(
            (30.0..300.0).contains(&ratio),
            "expected ~100x shrink, got {ratio}"
        );
    }

    #[test]
    fn choi_trivial_zero_model() {
        let model = build_atom(0.0, 0.0, 0.0).unwrap();
        let report = choi_error_bound_check(&model, 0.1).unwrap();
        assert!(report.choi_distance < 1e-12);
        assert_abs_diff_eq!(report.bound, 0.0, epsilon = 1e-15);
    }
}
