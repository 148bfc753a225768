//! Conditional least squares estimation of the drift parameters from a path
//! sampled on a uniform grid.
//!
//! Three flavours share the same sufficient statistics
//! `Γ̌ = Σ K Kᵀ` and `φ̌ = Σ K ΔZᵀ`, where `K = (1, -Y, -X)` is evaluated at the
//! left end point of every step:
//!
//! * [`Flavor::Discrete`]: `(Δ Γ̌)⁻¹ φ̌`;
//! * [`Flavor::Continuous`]: `G_T⁻¹ f_T` with the Riemann/Itô sums
//!   `G_T ≈ Δ Γ̌`, `f_T ≈ φ̌`, numerically identical to the discrete one;
//! * [`Flavor::Exact`]: the one-step regression `Γ̌⁻¹ φ̌` estimates the
//!   parameters of the exact conditional mean, which are mapped back
//!   through [`g_inverse`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, COND_LIMIT};
use crate::model_core::{stack_tau, Drift, ModelError, TauVector};
use crate::sde_sim::Path;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClseError {
    #[error("path has {points} points, at least {needed} are needed")]
    PathTooShort { points: usize, needed: usize },
    #[error("degenerate path: design block condition number {0:e}")]
    DegeneratePath(f64),
    #[error("singular design blocks")]
    SingularBlocks,
    #[error("one-step parameters outside the invertibility domain: {0}")]
    LogDomain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Continuous,
    Discrete,
    Exact,
}

impl std::str::FromStr for Flavor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" => Ok(Flavor::Continuous),
            "discrete" => Ok(Flavor::Discrete),
            "exact" => Ok(Flavor::Exact),
            other => Err(format!("unknown estimator flavor '{}'", other)),
        }
    }
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Flavor::Continuous => "continuous",
            Flavor::Discrete => "discrete",
            Flavor::Exact => "exact",
        })
    }
}

/// Which scaling the design blocks carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockScaling {
    /// Raw sums `Γ̌`, `φ̌`.
    Discrete,
    /// `(Δ Γ̌, φ̌)`, the approximation of `(G_T, f_T)`.
    ContinuousApprox,
}

/// Normal-equation blocks of the two decoupled least-squares problems.
#[derive(Debug, Clone)]
pub struct DesignBlocks {
    /// 2×2 block for `(a, b)`.
    pub gamma1: DMatrix<f64>,
    /// Right-hand side for `(a, b)`.
    pub phi1: DVector<f64>,
    /// (n+2)×(n+2) block shared by the n equations of X.
    pub gamma2: DMatrix<f64>,
    /// (n+2)×n right-hand side; column i belongs to the equation of X_i.
    pub phi2: DMatrix<f64>,
    pub scaling: BlockScaling,
    pub steps: usize,
    pub delta: f64,
    pub horizon: f64,
    pub cond1: f64,
    pub cond2: f64,
}

/// Accumulates `Σ K Kᵀ` and `Σ K ΔZᵀ` over the path.
pub fn design_blocks(path: &Path, scaling: BlockScaling) -> Result<DesignBlocks, ClseError> {
    let n = path.n();
    let points = path.len();
    if points < n + 3 {
        return Err(ClseError::PathTooShort { points, needed: n + 3 });
    }
    let p = n + 2;
    let mut g = vec![0.0; p * p];
    let mut f = vec![0.0; p * n];
    let mut g1 = [0.0; 4];
    let mut f1 = [0.0; 2];
    let mut k = vec![0.0; p];
    let mut dx = vec![0.0; n];
    let s = &path.states;
    for step in 1..points {
        let y = s[(step - 1, 0)];
        let dy = s[(step, 0)] - y;
        k[0] = 1.0;
        k[1] = -y;
        for i in 0..n {
            k[2 + i] = -s[(step - 1, 1 + i)];
            dx[i] = s[(step, 1 + i)] - s[(step - 1, 1 + i)];
        }
        g1[0] += 1.0;
        g1[1] -= y;
        g1[3] += y * y;
        f1[0] += dy;
        f1[1] -= y * dy;
        for r in 0..p {
            let kr = k[r];
            for c in r..p {
                g[r * p + c] += kr * k[c];
            }
            for c in 0..n {
                f[r * n + c] += kr * dx[c];
            }
        }
    }
    g1[2] = g1[1];
    for r in 0..p {
        for c in 0..r {
            g[r * p + c] = g[c * p + r];
        }
    }
    let mut gamma1 = DMatrix::from_row_slice(2, 2, &g1);
    let phi1 = DVector::from_column_slice(&f1);
    let mut gamma2 = DMatrix::from_row_slice(p, p, &g);
    let phi2 = DMatrix::from_row_slice(p, n, &f);
    if scaling == BlockScaling::ContinuousApprox {
        gamma1 *= path.delta;
        gamma2 *= path.delta;
    }
    let cond1 = linalg::equilibrated_condition(&gamma1);
    let cond2 = linalg::equilibrated_condition(&gamma2);
    if !(cond1 <= COND_LIMIT) {
        return Err(ClseError::DegeneratePath(cond1));
    }
    if !(cond2 <= COND_LIMIT) {
        return Err(ClseError::DegeneratePath(cond2));
    }
    Ok(DesignBlocks {
        gamma1,
        phi1,
        gamma2,
        phi2,
        scaling,
        steps: points - 1,
        delta: path.delta,
        horizon: path.horizon(),
        cond1,
        cond2,
    })
}

/// An estimate of the drift parameters with diagnostics.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub tau_hat: TauVector,
    pub drift: Drift,
    pub flavor: Flavor,
    pub cond1: f64,
    pub cond2: f64,
    pub horizon: f64,
    pub delta: f64,
}

impl Estimate {
    fn from_drift(drift: Drift, flavor: Flavor, blocks: &DesignBlocks) -> Self {
        Estimate {
            tau_hat: stack_tau(&drift),
            drift,
            flavor,
            cond1: blocks.cond1,
            cond2: blocks.cond2,
            horizon: blocks.horizon,
            delta: blocks.delta,
        }
    }
}

fn solve_blocks(blocks: &DesignBlocks, scale: f64) -> Result<Drift, ClseError> {
    let g1 = &blocks.gamma1 * scale;
    let g2 = &blocks.gamma2 * scale;
    let ab = linalg::spd_solve(&g1, &DMatrix::from_column_slice(2, 1, blocks.phi1.as_slice()), COND_LIMIT).map_err(map_singular)?;
    let coef = linalg::spd_solve(&g2, &blocks.phi2, COND_LIMIT).map_err(map_singular)?;
    let n = coef.ncols();
    let m = coef.row(0).transpose();
    let kappa = coef.row(1).transpose();
    let theta = coef.rows(2, n).transpose();
    Ok(Drift::new(ab[(0, 0)], ab[(1, 0)], m, kappa, theta)?)
}

fn map_singular(e: LinalgError) -> ClseError {
    match e {
        LinalgError::IllConditioned(_) => ClseError::SingularBlocks,
        _ => ClseError::SingularBlocks,
    }
}

/// Solves the blocks: `(Δ Γ̌)⁻¹ φ̌` for raw sums, `G⁻¹ f` for scaled ones.
pub fn clse_solve(blocks: &DesignBlocks) -> Result<Estimate, ClseError> {
    let (scale, flavor) = match blocks.scaling {
        BlockScaling::Discrete => (blocks.delta, Flavor::Discrete),
        BlockScaling::ContinuousApprox => (1.0, Flavor::Continuous),
    };
    let drift = solve_blocks(blocks, scale)?;
    Ok(Estimate::from_drift(drift, flavor, blocks))
}

/// Runs the estimator of the requested flavour on a path.
pub fn estimate(path: &Path, flavor: Flavor) -> Result<Estimate, ClseError> {
    match flavor {
        Flavor::Discrete => clse_solve(&design_blocks(path, BlockScaling::Discrete)?),
        Flavor::Continuous => clse_solve(&design_blocks(path, BlockScaling::ContinuousApprox)?),
        Flavor::Exact => {
            let blocks = design_blocks(path, BlockScaling::Discrete)?;
            let one_step = solve_blocks(&blocks, 1.0)?;
            let tilde = TildeParams {
                a: one_step.a,
                b: one_step.b,
                m: one_step.m,
                kappa: one_step.kappa,
                theta: one_step.theta,
            };
            let drift = g_inverse(&tilde, blocks.delta)?;
            Ok(Estimate::from_drift(drift, Flavor::Exact, &blocks))
        }
    }
}

/// `τ̂ - τ`.
pub fn error_term(estimate: &TauVector, truth: &TauVector) -> Result<DVector<f64>, ClseError> {
    if estimate.len() != truth.len() {
        return Err(ModelError::DimensionMismatch(format!("{} vs {}", estimate.len(), truth.len())).into());
    }
    Ok(&estimate.0 - &truth.0)
}

/// Parameters of the exact one-step conditional mean
/// `E[Z_{t+h} - Z_t | Z_t] = (ã - b̃ Y, m̃ - κ̃ Y - θ̃ X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TildeParams {
    pub a: f64,
    pub b: f64,
    pub m: DVector<f64>,
    pub kappa: DVector<f64>,
    pub theta: DMatrix<f64>,
}

impl TildeParams {
    pub fn zeros(n: usize) -> Self {
        let z = Drift::zeros(n);
        TildeParams {
            a: 0.0,
            b: 0.0,
            m: z.m,
            kappa: z.kappa,
            theta: z.theta,
        }
    }

    /// One-step conditional mean of the increment.
    pub fn mean_increment(&self, y: f64, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.a - self.b * y, &self.m - &self.kappa * y - &self.theta * x)
    }
}

/// The four matrix integrals behind `g_h`.
struct GIntegrals {
    /// `∫_0^h e^{-θu} du`
    exp_theta: DMatrix<f64>,
    /// `∫_0^h e^{-bu} e^{θ(u-h)} du`
    mixed: DMatrix<f64>,
    /// `∫_0^h (∫_0^u e^{-b(u-v)} dv) e^{θ(u-h)} du`
    nested: DMatrix<f64>,
}

fn g_integrals_closed(b: f64, theta: &DMatrix<f64>, h: f64) -> GIntegrals {
    let n = theta.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let exp_theta = linalg::exp_integral_matrix(&(-theta), h);
    // substitute v = h - u: e^{-bh} ∫_0^h e^{(bI - θ) v} dv
    let mixed = linalg::exp_integral_matrix(&(&id * b - theta), h) * (-b * h).exp();
    let nested = linalg::nested_exp_integral(theta, b, h);
    GIntegrals { exp_theta, mixed, nested }
}

fn g_integrals_quadrature(b: f64, theta: &DMatrix<f64>, h: f64) -> GIntegrals {
    let (abs, rel) = (1e-17, 1e-14);
    let exp_theta = linalg::integrate_matrix(|u| linalg::expm(&(-theta * u)), 0.0, h, abs, rel);
    let mixed = linalg::integrate_matrix(|u| linalg::expm(&(theta * (u - h))) * (-b * u).exp(), 0.0, h, abs, rel);
    let nested = linalg::integrate_matrix(|u| linalg::expm(&(theta * (u - h))) * linalg::exp_integral(b, u), 0.0, h, abs, rel);
    GIntegrals { exp_theta, mixed, nested }
}

fn g_integrals(b: f64, theta: &DMatrix<f64>, h: f64) -> GIntegrals {
    let closed = g_integrals_closed(b, theta, h);
    let finite = closed
        .exp_theta
        .iter()
        .chain(closed.mixed.iter())
        .chain(closed.nested.iter())
        .all(|v| v.is_finite());
    if finite {
        closed
    } else {
        g_integrals_quadrature(b, theta, h)
    }
}

fn g_from_integrals(drift: &Drift, h: f64, ints: GIntegrals) -> TildeParams {
    let n = drift.n();
    let a = drift.a * linalg::exp_integral(drift.b, h);
    let b = -(-drift.b * h).exp_m1();
    let theta = DMatrix::identity(n, n) - linalg::expm(&(&drift.theta * (-h)));
    let kappa = &ints.mixed * &drift.kappa;
    let m = &ints.exp_theta * &drift.m - (&ints.nested * &drift.kappa) * drift.a;
    TildeParams { a, b, m, kappa, theta }
}

/// The map `g_h(a, b, m, κ, θ) = (ã, b̃, m̃, κ̃, θ̃)`.
pub fn g_map(drift: &Drift, h: f64) -> TildeParams {
    let ints = g_integrals(drift.b, &drift.theta, h);
    g_from_integrals(drift, h, ints)
}

/// [`g_map`] with every integral evaluated by adaptive quadrature.
pub fn g_map_quadrature(drift: &Drift, h: f64) -> TildeParams {
    let ints = g_integrals_quadrature(drift.b, &drift.theta, h);
    g_from_integrals(drift, h, ints)
}

/// Inverse of [`g_map`]: recovers the drift from one-step parameters.
pub fn g_inverse(tilde: &TildeParams, h: f64) -> Result<Drift, ClseError> {
    let n = tilde.m.len();
    if !(tilde.b < 1.0) {
        return Err(ClseError::LogDomain(format!("b~ = {} is not below 1", tilde.b)));
    }
    let b = -(-tilde.b).ln_1p() / h;
    let a = tilde.a / linalg::exp_integral(b, h);
    let id = DMatrix::<f64>::identity(n, n);
    let log = linalg::logm(&(&id - &tilde.theta)).map_err(|e| ClseError::LogDomain(e.to_string()))?;
    let theta = log * (-1.0 / h);
    let ints = g_integrals(b, &theta, h);
    let kappa = ints
        .mixed
        .clone()
        .lu()
        .solve(&tilde.kappa)
        .ok_or_else(|| ClseError::LogDomain("kappa integral is singular".into()))?;
    let rhs = &tilde.m + (&ints.nested * &kappa) * a;
    let m = ints
        .exp_theta
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| ClseError::LogDomain("m integral is singular".into()))?;
    Ok(Drift::new(a, b, m, kappa, theta)?)
}
