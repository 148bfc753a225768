//! Normalizing matrices and the random limit objects of the critical and
//! supercritical regimes.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, COND_LIMIT};
use crate::model_core::{classify, tau_len, theta_eigen, Classification, ModelError, ModelParams, Regime};
use crate::sde_sim::{CriticalLimitSample, Path};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AsymptoticsError {
    #[error("no limit theory available for this point: {0}")]
    UnsupportedRegime(String),
    #[error("scaled path has not stabilized: relative change {0:.3e} over the last tenth")]
    NotStabilized(f64),
    #[error("limit matrix U is singular (condition number {0:e})")]
    SingularU(f64),
    #[error("supercritical sign condition fails at mode {0}")]
    SignCondition(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Diagonal normalizer `Q_T` with `Q_T (τ̂_T - τ)` converging in law.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub regime: Regime,
    pub horizon: f64,
    pub q: DMatrix<f64>,
}

impl Normalizer {
    pub fn apply(&self, error: &DVector<f64>) -> DVector<f64> {
        &self.q * error
    }
}

/// Critical case covered by the limit theory: `b = 0`, `θ = 0`.
pub fn is_covered_critical(class: &Classification) -> bool {
    class.regime == Regime::Critical && class.b == 0.0 && class.eig_theta.iter().all(|&l| l == 0.0)
}

/// Supercritical case covered by the limit theory: `λ_max(θ) < b < 0`.
pub fn is_covered_supercritical(class: &Classification) -> bool {
    class.regime == Regime::Supercritical && class.lambda_max() < class.b && class.b < 0.0
}

fn block_normalizer(n: usize, first: [f64; 2], second: [f64; 2], third: f64) -> DMatrix<f64> {
    let mut diag = vec![first[0], first[1]];
    for _ in 0..n {
        diag.extend_from_slice(&second);
        diag.extend(std::iter::repeat_n(third, n));
    }
    DMatrix::from_diagonal(&DVector::from_vec(diag))
}

/// `Q_T` for a classified point:
///
/// * subcritical: `√T I`;
/// * critical with `b = 0`, `θ = 0`: `diag(1, T, I_n ⊗ diag(1, T, T I_n))`;
/// * supercritical with `λ_max < b < 0`:
///   `diag(T e^{bT/2}, e^{-bT/2}, I_n ⊗ diag(T e^{bT/2}, e^{-bT/2}, e^{(b-2λ_min)T/2} I_n))`.
pub fn normalizer(class: &Classification, horizon: f64) -> Result<Normalizer, AsymptoticsError> {
    let n = class.eig_theta.len();
    let t = horizon;
    let q = match class.regime {
        Regime::Subcritical => DMatrix::identity(tau_len(n), tau_len(n)) * t.sqrt(),
        Regime::Critical if is_covered_critical(class) => block_normalizer(n, [1.0, t], [1.0, t], t),
        Regime::Supercritical if is_covered_supercritical(class) => {
            let b = class.b;
            let first = [t * (b * t / 2.0).exp(), (-b * t / 2.0).exp()];
            block_normalizer(n, first, first, ((b - 2.0 * class.lambda_min()) * t / 2.0).exp())
        }
        r => {
            return Err(AsymptoticsError::UnsupportedRegime(format!(
                "{} with b = {} and eig(theta) = {:?}",
                r, class.b, class.eig_theta
            )))
        }
    };
    Ok(Normalizer {
        regime: class.regime,
        horizon,
        q,
    })
}

/// Checks the sign condition `(V⁻¹m)_p (V⁻¹κ)_p ≤ 0` for every mode, with
/// `θ = V diag(λ) V⁻¹`.
pub fn check_supercritical_hypothesis(params: &ModelParams) -> Result<(), AsymptoticsError> {
    let class = classify(params)?;
    if !is_covered_supercritical(&class) {
        return Err(AsymptoticsError::UnsupportedRegime(format!(
            "need λ_max(θ) < b < 0, got b = {} and eig(θ) = {:?}",
            class.b, class.eig_theta
        )));
    }
    let eig = theta_eigen(&params.drift)?;
    let mm = &eig.inverse * &params.drift.m;
    let kk = &eig.inverse * &params.drift.kappa;
    for p in 0..mm.len() {
        if mm[p] * kk[p] > 0.0 {
            return Err(AsymptoticsError::SignCondition(p));
        }
    }
    Ok(())
}

/// Almost sure limits `C1 = lim e^{bT} Y_T`, `C_J = lim e^{λ_min T} X_T` read
/// off a path, with the matrices of the mixed-normal limit built from them.
#[derive(Debug, Clone)]
pub struct SupercriticalLimits {
    pub c1: f64,
    pub cj: DVector<f64>,
    pub b: f64,
    pub lambda_min: f64,
    pub v1: DMatrix<f64>,
    pub v2: DMatrix<f64>,
    /// `ηηᵀ`, the conditional covariance of the limit.
    pub eta_eta_t: DMatrix<f64>,
    /// Largest relative change over the last tenth of the path.
    pub drift_ratio: f64,
}

/// Relative change of `e^{bt} Y_t` and `e^{λ_min t} X_t` over the last tenth
/// of the path must be below 1%.
pub const STABILIZATION_TOL: f64 = 0.01;

pub fn extract_supercritical_limits(path: &Path, params: &ModelParams) -> Result<SupercriticalLimits, AsymptoticsError> {
    let class = classify(params)?;
    if !is_covered_supercritical(&class) {
        return Err(AsymptoticsError::UnsupportedRegime(format!(
            "b = {}, eig(θ) = {:?}",
            class.b, class.eig_theta
        )));
    }
    let n = params.n();
    let b = class.b;
    let lam = class.lambda_min();
    let last = path.steps();
    let early = ((0.9 * last as f64).round() as usize).min(last);
    let fy = |k: usize| (b * path.times[k]).exp() * path.y(k);
    let fx = |k: usize| path.x(k) * (lam * path.times[k]).exp();
    let c1 = fy(last);
    let cj = fx(last);
    let ry = (c1 - fy(early)).abs() / c1.abs();
    let rx = (&cj - fx(early)).norm() / cj.norm();
    let ratio = if ry.is_nan() || rx.is_nan() { f64::INFINITY } else { ry.max(rx) };
    if !(ratio < STABILIZATION_TOL) {
        return Err(AsymptoticsError::NotStabilized(ratio));
    }

    let v1 = DMatrix::from_row_slice(2, 2, &[1.0, c1 / b, 0.0, -c1 * c1 / (2.0 * b)]);
    let p = n + 2;
    let mut v2 = DMatrix::zeros(p, p);
    v2[(0, 0)] = 1.0;
    v2[(0, 1)] = c1 / b;
    v2[(1, 1)] = -c1 * c1 / (2.0 * b);
    for j in 0..n {
        v2[(0, 2 + j)] = cj[j] / lam;
        v2[(1, 2 + j)] = -c1 * cj[j] / (b + lam);
        v2[(2 + j, 1)] = -c1 * cj[j] / (b + lam);
        for k in 0..n {
            v2[(2 + j, 2 + k)] = -cj[j] * cj[k] / (2.0 * lam);
        }
    }

    let cc1 = DMatrix::from_row_slice(2, 2, &[-c1 / b, c1 * c1 / (2.0 * b), c1 * c1 / (2.0 * b), -c1.powi(3) / (3.0 * b)]);
    let mut cc3 = DMatrix::zeros(p, p);
    cc3.view_mut((0, 0), (2, 2)).copy_from(&cc1);
    for j in 0..n {
        let u = c1 * cj[j] / (b + lam);
        let v = -c1 * c1 * cj[j] / (2.0 * b + lam);
        cc3[(0, 2 + j)] = u;
        cc3[(2 + j, 0)] = u;
        cc3[(1, 2 + j)] = v;
        cc3[(2 + j, 1)] = v;
        for k in 0..n {
            cc3[(2 + j, 2 + k)] = -c1 * cj[j] * cj[k] / (b + 2.0 * lam);
        }
    }
    let cc2 = cc3.rows(0, 2).into_owned();

    let sigma1 = params.sigma1();
    let rho_t = params.rho_tilde();
    let rho_j1 = DMatrix::from_row_slice(1, n, params.rho_j1().as_slice());
    let dim = tau_len(n);
    let mut eta = DMatrix::zeros(dim, dim);
    eta.view_mut((0, 0), (2, 2)).copy_from(&(cc1 * (sigma1 * sigma1)));
    let cross = linalg::kron(&rho_j1, &cc2) * sigma1;
    eta.view_mut((0, 2), (2, n * p)).copy_from(&cross);
    eta.view_mut((2, 0), (n * p, 2)).copy_from(&cross.transpose());
    eta.view_mut((2, 2), (n * p, n * p))
        .copy_from(&linalg::kron(&(&rho_t * rho_t.transpose()), &cc3));

    Ok(SupercriticalLimits {
        c1,
        cj,
        b,
        lambda_min: lam,
        v1,
        v2,
        eta_eta_t: eta,
        drift_ratio: ratio,
    })
}

/// `(U1, U2, R1, R2)` built from the time-one functionals of the limit
/// process; the limit of `Q_T (τ̂_T - τ)` is
/// `diag(U1⁻¹, I_n ⊗ U2⁻¹) (R1, vec R2)`.
#[derive(Debug, Clone)]
pub struct CriticalLimitFunctional {
    pub u1: DMatrix<f64>,
    pub u2: DMatrix<f64>,
    pub r1: DVector<f64>,
    /// (n+2)×n, column i belongs to the equation of X_i.
    pub r2: DMatrix<f64>,
}

pub fn critical_limit_functional(sample: &CriticalLimitSample, a: f64, m: &DVector<f64>) -> CriticalLimitFunctional {
    let n = sample.x1.len();
    let p = n + 2;
    let iy = sample.int_y;
    let u1 = DMatrix::from_row_slice(2, 2, &[1.0, -iy, -iy, sample.int_y2]);
    let mut u2 = DMatrix::zeros(p, p);
    u2.view_mut((0, 0), (2, 2)).copy_from(&u1);
    for i in 0..n {
        u2[(0, 2 + i)] = -sample.int_x[i];
        u2[(2 + i, 0)] = -sample.int_x[i];
        u2[(1, 2 + i)] = sample.int_yx[i];
        u2[(2 + i, 1)] = sample.int_yx[i];
        for j in 0..n {
            u2[(2 + i, 2 + j)] = sample.int_xx[i * n + j];
        }
    }
    let r1 = DVector::from_vec(vec![sample.y1 - a, a * iy - sample.int_y_dy]);
    let mut r2 = DMatrix::zeros(p, n);
    for j in 0..n {
        r2[(0, j)] = sample.x1[j] - m[j];
        r2[(1, j)] = iy * m[j] - sample.int_y_dx[j];
        for i in 0..n {
            // ∫ X_i dX_j
            r2[(2 + i, j)] = sample.int_x[i] * m[j] - sample.int_x_dx[i * n + j];
        }
    }
    CriticalLimitFunctional { u1, u2, r1, r2 }
}

impl CriticalLimitFunctional {
    /// One draw of the limit law, stacked like `τ`.
    pub fn limit_draw(&self) -> Result<DVector<f64>, AsymptoticsError> {
        let c1 = linalg::equilibrated_condition(&self.u1);
        let c2 = linalg::equilibrated_condition(&self.u2);
        let first = linalg::spd_solve(&self.u1, &DMatrix::from_column_slice(2, 1, self.r1.as_slice()), COND_LIMIT)
            .map_err(|_| AsymptoticsError::SingularU(c1))?;
        let second = linalg::spd_solve(&self.u2, &self.r2, COND_LIMIT).map_err(|_| AsymptoticsError::SingularU(c2))?;
        let mut out = Vec::with_capacity(2 + second.len());
        out.extend(first.iter().copied());
        out.extend(second.iter().copied());
        Ok(DVector::from_vec(out))
    }
}
