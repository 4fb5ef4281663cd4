//! Observables and derived diagnostics.
//!
//! Matrix observables (`P_1`, `C_zz`, `P_e`, site occupations, custom
//! Hermitian matrices) are evaluated as `<psi|O|psi>` or `Tr(O rho)`.
//! Derived diagnostics — the dynamic inverse participation ratio (dIPR) and
//! the left/right imbalance (IB) — are nonlinear functions of the
//! ensemble-mean occupation profile; their standard errors come from a
//! delete-one jackknife over trajectories.

use crate::linalg::{hermiticity_error, trace, trace_norm, CMat, CVec, LinalgError};
use crate::model::{number_op, site_op, sigma_z};
use crate::trajectory::EnsembleStats;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObservableError {
    #[error("observable is not Hermitian (max |O - O^dag| = {0:.3e})")]
    NonHermitianObservable(f64),
    #[error("expectation has imaginary residue {0:.3e} > 1e-10")]
    ImaginaryResidue(f64),
    #[error("occupation profile is identically zero")]
    AllZeroOccupations,
    #[error("imbalance requires an even number of sites, got {0}")]
    OddChain(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("scaling fit needs at least 3 strictly positive points")]
    DegenerateInput,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ObservableError>;

/// What to measure. `SiteOccupation` uses 1-based site indices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ObservableKind {
    /// `n_l = sigma_l^+ sigma_l^-` (spin-up probability at site `l`).
    SiteOccupation(usize),
    /// Averaged nearest-neighbor correlation
    /// `(1/(L-1)) sum_l <sigma_l^z sigma_{l+1}^z>`.
    CorrelationZz,
    /// Excited population of a single two-level system.
    ExcitedPop,
    /// Dynamic inverse participation ratio of the occupation profile
    /// (derived; no single matrix).
    Dipr,
    /// Left-right occupation imbalance (derived).
    Imbalance,
    /// Arbitrary Hermitian matrix (entries as `[[re, im], ...]` row-major
    /// when serialized).
    #[serde(skip)]
    Custom(CMat),
}

#[derive(Debug, Clone)]
pub struct ObservableSpec {
    pub name: String,
    pub kind: ObservableKind,
}

impl ObservableSpec {
    pub fn new(name: impl Into<String>, kind: ObservableKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    /// True for diagnostics computed from the occupation profile rather
    /// than from a single matrix.
    pub fn is_derived(&self) -> bool {
        matches!(self.kind, ObservableKind::Dipr | ObservableKind::Imbalance)
    }

    /// Materialize the observable matrix on an `n_sites` chain.
    /// Derived kinds return `None`.
    pub fn matrix(&self, n_sites: usize) -> Result<Option<CMat>> {
        let m = match &self.kind {
            ObservableKind::SiteOccupation(l) => Some(site_op(&number_op(), *l, n_sites)),
            ObservableKind::ExcitedPop => Some(number_op()),
            ObservableKind::CorrelationZz => {
                let mut sum = site_op(&sigma_z(), 1, n_sites).dot(&site_op(&sigma_z(), 2, n_sites));
                for l in 2..n_sites {
                    sum = sum
                        + site_op(&sigma_z(), l, n_sites).dot(&site_op(&sigma_z(), l + 1, n_sites));
                }
                Some(sum.mapv(|z| z / crate::linalg::cr((n_sites - 1) as f64)))
            }
            ObservableKind::Custom(m) => Some(m.clone()),
            ObservableKind::Dipr | ObservableKind::Imbalance => None,
        };
        if let Some(m) = &m {
            let herr = hermiticity_error(m);
            if herr > 1e-12 {
                return Err(ObservableError::NonHermitianObservable(herr));
            }
        }
        Ok(m)
    }
}

fn check_imaginary(value: crate::C64) -> Result<f64> {
    if value.im.abs() > 1e-10 {
        return Err(ObservableError::ImaginaryResidue(value.im.abs()));
    }
    Ok(value.re)
}

/// `<psi|O|psi>` with Hermiticity and reality checks.
pub fn expectation_state(psi: &CVec, op: &CMat) -> Result<f64> {
    let herr = hermiticity_error(op);
    if herr > 1e-12 {
        return Err(ObservableError::NonHermitianObservable(herr));
    }
    if psi.len() != op.nrows() {
        return Err(ObservableError::DimMismatch(psi.len(), op.nrows()));
    }
    let v = op.dot(psi);
    let val: crate::C64 = psi.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
    check_imaginary(val)
}

/// `Tr(O rho)` with Hermiticity and reality checks.
pub fn expectation_rho(rho: &CMat, op: &CMat) -> Result<f64> {
    let herr = hermiticity_error(op);
    if herr > 1e-12 {
        return Err(ObservableError::NonHermitianObservable(herr));
    }
    if rho.nrows() != op.nrows() {
        return Err(ObservableError::DimMismatch(rho.nrows(), op.nrows()));
    }
    check_imaginary(trace(&op.dot(rho)))
}

/// `dIPR = (sum n_l^2) / (sum n_l)^2`; near `1/L` for extended profiles,
/// larger for localized ones.
pub fn dipr(occupations: &[f64]) -> Result<f64> {
    let total: f64 = occupations.iter().sum();
    if total <= 0.0 {
        return Err(ObservableError::AllZeroOccupations);
    }
    let sq: f64 = occupations.iter().map(|n| n * n).sum();
    Ok(sq / (total * total))
}

/// `IB = (sum_{l <= L/2} n_l - sum_{l > L/2} n_l) / sum_l n_l`.
pub fn imbalance(occupations: &[f64]) -> Result<f64> {
    let l = occupations.len();
    if l % 2 != 0 {
        return Err(ObservableError::OddChain(l));
    }
    let total: f64 = occupations.iter().sum();
    if total <= 0.0 {
        return Err(ObservableError::AllZeroOccupations);
    }
    let left: f64 = occupations[..l / 2].iter().sum();
    let right: f64 = occupations[l / 2..].iter().sum();
    Ok((left - right) / total)
}

/// `|rho_est - rho_ref|_1`.
pub fn trace_error(rho_est: &CMat, rho_ref: &CMat) -> Result<f64> {
    if rho_est.nrows() != rho_ref.nrows() || rho_est.ncols() != rho_ref.ncols() {
        return Err(ObservableError::DimMismatch(rho_est.nrows(), rho_ref.nrows()));
    }
    Ok(trace_norm(&(rho_est - rho_ref))?)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub r_squared: f64,
}

/// Unweighted least-squares line in log-log space through
/// `(dt, error)` points: `error ~ prefactor * dt^exponent`.
pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 3 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(ObservableError::DegenerateInput);
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(ObservableError::DegenerateInput);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = logs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = logs
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Ok(ScalingFit {
        exponent: slope,
        prefactor: intercept.exp(),
        r_squared,
    })
}

/// A derived diagnostic (dIPR or IB) evaluated on ensemble-mean occupations
/// at each recorded time, with a delete-one jackknife standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedSeries {
    pub name: String,
    pub value: Vec<f64>,
    pub se: Vec<Option<f64>>,
}

/// Compute a derived diagnostic from an ensemble whose observable list
/// contains the site occupations at positions `occ_indices` (chain order).
///
/// The point estimate applies `f` to the weighted ensemble-mean profile;
/// the jackknife drops one trajectory at a time.
pub fn derived_from_ensemble(
    stats: &EnsembleStats,
    occ_indices: &[usize],
    name: &str,
    f: impl Fn(&[f64]) -> Result<f64>,
) -> Result<DerivedSeries> {
    let n_times = stats.times.len();
    let k = stats.k_total;
    let mut value = vec![f64::NAN; n_times];
    let mut se = vec![None; n_times];
    for j in 0..n_times {
        // weighted mean profile
        let mut profile = vec![0.0; occ_indices.len()];
        let mut sw = 0.0;
        for i in 0..k {
            let w = stats.raw_weights[(i, j)];
            if w > 0.0 {
                sw += w;
                for (s, &kk) in occ_indices.iter().enumerate() {
                    profile[s] += w * stats.raw_values[kk][(i, j)];
                }
            }
        }
        if sw <= 0.0 {
            continue;
        }
        for p in profile.iter_mut() {
            *p /= sw;
        }
        value[j] = f(&profile)?;
        // delete-one jackknife over contributing trajectories
        let contributors: Vec<usize> = (0..k)
            .filter(|&i| stats.raw_weights[(i, j)] > 0.0)
            .collect();
        let m = contributors.len();
        if m >= 2 {
            let mut jack = Vec::with_capacity(m);
            for &drop in &contributors {
                let w_drop = stats.raw_weights[(drop, j)];
                let sw_d = sw - w_drop;
                if sw_d <= 0.0 {
                    continue;
                }
                let prof_d: Vec<f64> = occ_indices
                    .iter()
                    .enumerate()
                    .map(|(s, &kk)| {
                        (profile[s] * sw - w_drop * stats.raw_values[kk][(drop, j)]) / sw_d
                    })
                    .collect();
                jack.push(f(&prof_d)?);
            }
            let mj = jack.len() as f64;
            if mj >= 2.0 {
                let mean_j: f64 = jack.iter().sum::<f64>() / mj;
                let var: f64 =
                    jack.iter().map(|x| (x - mean_j).powi(2)).sum::<f64>() * (mj - 1.0) / mj;
                se[j] = Some(var.sqrt());
            }
        }
    }
    Ok(DerivedSeries {
        name: name.to_string(),
        value,
        se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cr, identity};
    use crate::model::{build_xxz, ModelParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn site_occupation_on_product_states() {
        // |up up up>: n_1 = 1
        let spec = ObservableSpec::new("occ1", ObservableKind::SiteOccupation(1));
        let op = spec.matrix(3).unwrap().unwrap();
        let mut psi = CVec::from_elem(8, cr(0.0));
        psi[0] = cr(1.0);
        assert_abs_diff_eq!(expectation_state(&psi, &op).unwrap(), 1.0, epsilon = 1e-12);
        // |down ...>: 0
        let mut psi_d = CVec::from_elem(8, cr(0.0));
        psi_d[7] = cr(1.0);
        assert_abs_diff_eq!(expectation_state(&psi_d, &op).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn correlation_zz_on_neel_pair() {
        // |up down> on 2 sites: <sz sz> = -1
        let spec = ObservableSpec::new("czz", ObservableKind::CorrelationZz);
        let op = spec.matrix(2).unwrap().unwrap();
        let mut psi = CVec::from_elem(4, cr(0.0));
        psi[1] = cr(1.0); // |up, down>
        assert_abs_diff_eq!(expectation_state(&psi, &op).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn expectation_of_identity_is_one() {
        let psi = CVec::from_elem(4, cr(0.5));
        assert_abs_diff_eq!(
            expectation_state(&psi, &identity(4)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let rho = identity(4).mapv(|z| z / cr(4.0));
        assert_abs_diff_eq!(
            expectation_rho(&rho, &identity(4)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn expectation_rejects_non_hermitian() {
        let psi = CVec::from_elem(2, cr(0.5f64.sqrt()));
        let m = ndarray::array![[cr(0.0), cr(1.0)], [cr(0.0), cr(0.0)]];
        assert!(matches!(
            expectation_state(&psi, &m),
            Err(ObservableError::NonHermitianObservable(_))
        ));
    }

    #[test]
    fn expectation_linearity() {
        use crate::model::{sigma_x, sigma_z};
        let psi: CVec = ndarray::array![cr(0.6), cr(0.8)];
        let a = sigma_x();
        let b = sigma_z();
        let combo = a.mapv(|z| z * cr(0.3)) + b.mapv(|z| z * cr(-1.2));
        let lhs = expectation_state(&psi, &combo).unwrap();
        let rhs = 0.3 * expectation_state(&psi, &a).unwrap()
            - 1.2 * expectation_state(&psi, &b).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn p1_matches_exact_solver_on_xxz() {
        use crate::exact::propagate_lme;
        use crate::linalg::zeros;
        let params = ModelParams {
            j: 1.0,
            delta: 2.0,
            gamma: 0.5,
            l_sites: 3,
            ..Default::default()
        };
        let model = build_xxz(&params).unwrap();
        let mut rho0 = zeros(8, 8);
        rho0[(0, 0)] = cr(1.0);
        let rho_t = propagate_lme(&model, &rho0, 2.0).unwrap();
        let p1_op = ObservableSpec::new("p1", ObservableKind::SiteOccupation(1))
            .matrix(3)
            .unwrap()
            .unwrap();
        let p1 = expectation_rho(&rho_t, &p1_op).unwrap();
        assert!((0.0..=1.0).contains(&p1));
        // oracle: diagonal sum over basis states with site 1 up (indices 0..4)
        let direct: f64 = (0..4).map(|i| rho_t[(i, i)].re).sum();
        assert_abs_diff_eq!(p1, direct, epsilon = 1e-10);
    }

    #[test]
    fn dipr_examples_and_bounds() {
        assert_abs_diff_eq!(dipr(&vec![0.1; 10]).unwrap(), 0.1, epsilon = 1e-12);
        let mut single = vec![0.0; 10];
        single[3] = 0.7;
        assert_abs_diff_eq!(dipr(&single).unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            dipr(&[0.0, 0.0]),
            Err(ObservableError::AllZeroOccupations)
        ));
    }

    #[test]
    fn imbalance_examples() {
        assert_abs_diff_eq!(imbalance(&[1.0, 2.0, 0.0, 0.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(imbalance(&[0.5, 0.5, 0.5, 0.5]).unwrap(), 0.0, epsilon = 1e-12);
        assert!(matches!(
            imbalance(&[1.0, 1.0, 1.0]),
            Err(ObservableError::OddChain(3))
        ));
    }

    #[test]
    fn trace_error_examples() {
        let rho = identity(2).mapv(|z| z / cr(2.0));
        assert_abs_diff_eq!(trace_error(&rho, &rho).unwrap(), 0.0, epsilon = 1e-12);
        let up = ndarray::array![[cr(1.0), cr(0.0)], [cr(0.0), cr(0.0)]];
        let down = ndarray::array![[cr(0.0), cr(0.0)], [cr(0.0), cr(1.0)]];
        assert_abs_diff_eq!(trace_error(&up, &down).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn scaling_fit_synthetic() {
        let quad: Vec<(f64, f64)> = [1.0, 0.5, 0.2, 0.1]
            .iter()
            .map(|&dt: &f64| (dt, dt * dt))
            .collect();
        let fit = fit_scaling_exponent(&quad).unwrap();
        assert_abs_diff_eq!(fit.exponent, 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-10);
        let constant: Vec<(f64, f64)> = [1.0, 0.5, 0.2].iter().map(|&dt| (dt, 3.0)).collect();
        let fit_c = fit_scaling_exponent(&constant).unwrap();
        assert_abs_diff_eq!(fit_c.exponent, 0.0, epsilon = 1e-10);
        assert!(matches!(
            fit_scaling_exponent(&[(0.1, 1.0), (0.2, 2.0)]),
            Err(ObservableError::DegenerateInput)
        ));
        assert!(matches!(
            fit_scaling_exponent(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]),
            Err(ObservableError::DegenerateInput)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn dipr_stays_in_bounds(occ in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            prop_assume!(occ.iter().sum::<f64>() > 1e-9);
            let v = dipr(&occ).unwrap();
            let l = occ.len() as f64;
            prop_assert!(v >= 1.0 / l - 1e-12 && v <= 1.0 + 1e-12);
        }

        #[test]
        fn imbalance_stays_in_bounds(occ in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let mut occ = occ;
            if occ.len() % 2 == 1 { occ.pop(); }
            prop_assume!(occ.len() >= 2 && occ.iter().sum::<f64>() > 1e-9);
            let v = imbalance(&occ).unwrap();
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }
    }
}
