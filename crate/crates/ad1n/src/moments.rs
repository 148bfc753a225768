//! Mixed moments `E(Y^k ∏ X̃_q^{ℓ_q})` in the modal coordinates `X̃ = P X`,
//! `P θ P⁻¹ = D = diag(λ)`.
//!
//! Itô's formula applied to `Y^k ∏ X̃^ℓ` closes the moment equations within
//! each total order: the time derivative of a moment of order `r` involves
//! only moments of order `≤ r`. Transient values solve that linear system by
//! a matrix exponential; stationary values follow from setting the
//! derivative to zero and sweeping the indices by `Σℓ` and then `k`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, COND_LIMIT};
use crate::model_core::{classify, tau_len, theta_eigen, ModelError, ModelParams, Regime};

/// Largest total order accepted by [`stationary_moment`] and [`transient_moment`].
pub const DEFAULT_MAX_ORDER: u32 = 4;
/// Hard cap for table builders.
pub const MAX_TABLE_ORDER: u32 = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentError {
    #[error("stationary quantities need the subcritical regime, got {0}")]
    NotSubcritical(Regime),
    #[error("total order {0} exceeds the limit {1}")]
    OrderTooHigh(u32, u32),
    #[error("initial moment {0:?} is missing")]
    MissingInitialMoment(Vec<u32>),
    #[error("moment {0:?} is missing from the table")]
    IncompleteTable(Vec<u32>),
    #[error("E(G∞) is singular (condition number {0:e})")]
    SingularEG(f64),
    #[error("Riccati tail |K| = {0:e} at the horizon exceeds the tolerance")]
    HorizonTooShort(f64),
    #[error("Riccati integral changed by {0:e} when halving the step")]
    StepMismatch(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters of the dynamics in modal coordinates.
#[derive(Debug, Clone)]
pub struct TildeFrame {
    /// `P`, with `X̃ = P X`.
    pub p: DMatrix<f64>,
    /// `P⁻¹`.
    pub p_inv: DMatrix<f64>,
    /// Diagonal of `D = P θ P⁻¹`, ascending.
    pub lambda: Vec<f64>,
    /// `P m`.
    pub m: DVector<f64>,
    /// `P κ`.
    pub kappa: DVector<f64>,
    /// `ρ̌ = P ρ̃`, n×d.
    pub rho: DMatrix<f64>,
    pub a: f64,
    pub b: f64,
    pub sigma1: f64,
}

impl TildeFrame {
    pub fn new(params: &ModelParams) -> Result<Self, MomentError> {
        let eig = theta_eigen(&params.drift)?;
        let p = eig.inverse.clone();
        let p_inv = eig.vectors.clone();
        Ok(TildeFrame {
            m: &p * &params.drift.m,
            kappa: &p * &params.drift.kappa,
            rho: &p * params.rho_tilde(),
            p,
            p_inv,
            lambda: eig.values,
            a: params.drift.a,
            b: params.drift.b,
            sigma1: params.sigma1(),
        })
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// `‖θ - P⁻¹ D P‖_F / ‖θ‖_F`.
    pub fn residual(&self, theta: &DMatrix<f64>) -> f64 {
        let d = DMatrix::from_diagonal(&DVector::from_vec(self.lambda.clone()));
        let r = (theta - &self.p_inv * d * &self.p).norm();
        let f = theta.norm();
        if f > 0.0 {
            r / f
        } else {
            r
        }
    }

    /// `σ̌_p² = ‖ρ̌_p‖²`.
    pub fn sigma_check_sq(&self, p: usize) -> f64 {
        self.rho.row(p).norm_squared()
    }

    /// Rate `b k + Σ λ_j ℓ_j` of an index.
    pub fn rate(&self, idx: &[u32]) -> f64 {
        self.b * idx[0] as f64 + self.lambda.iter().zip(&idx[1..]).map(|(l, e)| l * *e as f64).sum::<f64>()
    }

    /// Right-hand side of `d/dt E(k, ℓ)`: the diagonal coefficient and the
    /// couplings to lower indices.
    pub fn generator_row(&self, idx: &[u32]) -> (f64, Vec<(Vec<u32>, f64)>) {
        let n = self.n();
        let k = idx[0] as f64;
        let mut terms = Vec::new();
        let mut push = |shift: &dyn Fn(&mut Vec<i64>), coef: f64| {
            if coef == 0.0 {
                return;
            }
            let mut j: Vec<i64> = idx.iter().map(|&v| v as i64).collect();
            shift(&mut j);
            if j.iter().all(|&v| v >= 0) {
                terms.push((j.into_iter().map(|v| v as u32).collect(), coef));
            }
        };
        push(&|j| j[0] -= 1, self.a * k + 0.5 * self.sigma1 * self.sigma1 * k * (k - 1.0));
        for p in 0..n {
            let lp = idx[1 + p] as f64;
            if lp == 0.0 {
                continue;
            }
            push(&|j| j[1 + p] -= 1, lp * (self.m[p] + k * self.sigma1 * self.rho[(p, 0)]));
            push(
                &|j| {
                    j[0] += 1;
                    j[1 + p] -= 1;
                },
                -self.kappa[p] * lp,
            );
            push(
                &|j| {
                    j[0] += 1;
                    j[1 + p] -= 2;
                },
                0.5 * self.sigma_check_sq(p) * lp * (lp - 1.0),
            );
            for i in 0..n {
                let li = idx[1 + i] as f64;
                if i == p || li == 0.0 {
                    continue;
                }
                let dot = self.rho.row(i).dot(&self.rho.row(p));
                push(
                    &|j| {
                        j[0] += 1;
                        j[1 + i] -= 1;
                        j[1 + p] -= 1;
                    },
                    0.5 * dot * li * lp,
                );
            }
        }
        (-self.rate(idx), terms)
    }
}

/// Whether a table holds moments at a time or at stationarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MomentTag {
    Transient { t: f64 },
    Stationary,
}

/// Mixed moments indexed by `(k, ℓ_1, ..., ℓ_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub n: usize,
    pub max_order: u32,
    pub tag: MomentTag,
    pub values: BTreeMap<Vec<u32>, f64>,
}

impl MomentTable {
    pub fn get(&self, idx: &[u32]) -> Option<f64> {
        self.values.get(idx).copied()
    }

    fn require(&self, idx: &[u32]) -> Result<f64, MomentError> {
        self.get(idx).ok_or_else(|| MomentError::IncompleteTable(idx.to_vec()))
    }

    /// Moments of a point mass at `(y, z)` up to `order`.
    pub fn point_mass(y: f64, z: &DVector<f64>, order: u32) -> Self {
        let n = z.len();
        let values = indices_up_to(n, order)
            .into_iter()
            .map(|idx| {
                let v = y.powi(idx[0] as i32) * z.iter().zip(&idx[1..]).map(|(x, e)| x.powi(*e as i32)).product::<f64>();
                (idx, v)
            })
            .collect();
        MomentTable {
            n,
            max_order: order,
            tag: MomentTag::Transient { t: 0.0 },
            values,
        }
    }
}

/// Total order `k + Σ ℓ`.
pub fn total_order(idx: &[u32]) -> u32 {
    idx.iter().sum()
}

/// All indices of total order at most `order`, sorted by `Σℓ`, then `k`,
/// then lexicographically.
pub fn indices_up_to(n: usize, order: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; n + 1];
    fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[pos] = v;
            rec(pos + 1, left - v, cur, out);
        }
        cur[pos] = 0;
    }
    rec(0, order, &mut cur, &mut out);
    out.sort_by(|x, y| {
        let sx: u32 = x[1..].iter().sum();
        let sy: u32 = y[1..].iter().sum();
        (sx, x[0], &x[1..]).cmp(&(sy, y[0], &y[1..]))
    });
    out
}

fn require_subcritical(params: &ModelParams) -> Result<(), MomentError> {
    let c = classify(params)?;
    if c.regime != Regime::Subcritical {
        return Err(MomentError::NotSubcritical(c.regime));
    }
    Ok(())
}

/// Stationary moments in modal coordinates for every index of total order
/// at most `order`.
pub fn stationary_table(params: &ModelParams, order: u32) -> Result<MomentTable, MomentError> {
    if order > MAX_TABLE_ORDER {
        return Err(MomentError::OrderTooHigh(order, MAX_TABLE_ORDER));
    }
    require_subcritical(params)?;
    let frame = TildeFrame::new(params)?;
    let n = frame.n();
    let mut values: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
    for idx in indices_up_to(n, order) {
        if total_order(&idx) == 0 {
            values.insert(idx, 1.0);
            continue;
        }
        let (diag, terms) = frame.generator_row(&idx);
        let mut acc = 0.0;
        for (j, c) in terms {
            // every dependency precedes idx in the sweep order
            acc += c * values[&j];
        }
        values.insert(idx, acc / (-diag));
    }
    Ok(MomentTable {
        n,
        max_order: order,
        tag: MomentTag::Stationary,
        values,
    })
}

/// `E(Y∞^k ∏ X̃∞^ℓ)`.
pub fn stationary_moment(params: &ModelParams, k: u32, l: &[u32]) -> Result<f64, MomentError> {
    let mut idx = vec![k];
    idx.extend_from_slice(l);
    let r = total_order(&idx);
    if r > DEFAULT_MAX_ORDER {
        return Err(MomentError::OrderTooHigh(r, DEFAULT_MAX_ORDER));
    }
    let table = stationary_table(params, r)?;
    Ok(table.get(&idx).expect("index inside the table"))
}

/// Transient moments in modal coordinates at time `t` from initial modal
/// moments, for every index of total order at most `order`.
pub fn transient_table(params: &ModelParams, initial: &MomentTable, t: f64, order: u32) -> Result<MomentTable, MomentError> {
    if order > MAX_TABLE_ORDER {
        return Err(MomentError::OrderTooHigh(order, MAX_TABLE_ORDER));
    }
    let frame = TildeFrame::new(params)?;
    let n = frame.n();
    let idx = indices_up_to(n, order);
    let pos: BTreeMap<&Vec<u32>, usize> = idx.iter().enumerate().map(|(i, v)| (v, i)).collect();
    let size = idx.len();
    let mut gen = DMatrix::zeros(size, size);
    let mut init = DVector::zeros(size);
    for (r, i) in idx.iter().enumerate() {
        init[r] = initial.get(i).ok_or_else(|| MomentError::MissingInitialMoment(i.clone()))?;
        if total_order(i) == 0 {
            continue;
        }
        let (diag, terms) = frame.generator_row(i);
        gen[(r, r)] = diag;
        for (j, c) in terms {
            gen[(r, pos[&j])] += c;
        }
    }
    let sol = linalg::expm(&(gen * t)) * init;
    Ok(MomentTable {
        n,
        max_order: order,
        tag: MomentTag::Transient { t },
        values: idx.into_iter().zip(sol.iter().copied()).collect(),
    })
}

/// `E(Y_t^k ∏ X̃_t^ℓ)` from a table of initial modal moments.
pub fn transient_moment(params: &ModelParams, initial: &MomentTable, k: u32, l: &[u32], t: f64) -> Result<f64, MomentError> {
    let mut idx = vec![k];
    idx.extend_from_slice(l);
    let r = total_order(&idx);
    if r > DEFAULT_MAX_ORDER {
        return Err(MomentError::OrderTooHigh(r, DEFAULT_MAX_ORDER));
    }
    Ok(transient_table(params, initial, t, r)?.get(&idx).expect("index inside the table"))
}

/// Moments of `(Y, M W)` from moments of `(Y, W)`: each `∏ (M W)_i^{ℓ_i}` is
/// expanded into monomials of `W`.
pub fn linear_transform_table(table: &MomentTable, m: &DMatrix<f64>) -> Result<MomentTable, MomentError> {
    let n = table.n;
    let mut values = BTreeMap::new();
    for idx in indices_up_to(n, table.max_order) {
        // polynomial in W as exponent vector -> coefficient
        let mut poly: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        poly.insert(vec![0; n], 1.0);
        for i in 0..n {
            for _ in 0..idx[1 + i] {
                let mut next = BTreeMap::new();
                for (e, c) in &poly {
                    for j in 0..n {
                        let w = m[(i, j)];
                        if w == 0.0 {
                            continue;
                        }
                        let mut e2 = e.clone();
                        e2[j] += 1;
                        *next.entry(e2).or_insert(0.0) += c * w;
                    }
                }
                poly = next;
            }
        }
        let mut acc = 0.0;
        for (e, c) in poly {
            let mut src = vec![idx[0]];
            src.extend(e);
            acc += c * table.require(&src)?;
        }
        values.insert(idx, acc);
    }
    Ok(MomentTable {
        n,
        max_order: table.max_order,
        tag: table.tag,
        values,
    })
}

/// Converts modal-coordinate moments to moments of `X = P⁻¹ X̃`.
pub fn tilde_to_x_moments(frame: &TildeFrame, table: &MomentTable) -> Result<MomentTable, MomentError> {
    linear_transform_table(table, &frame.p_inv)
}

/// Stationary moments of `(Y, X)` up to `order`.
pub fn stationary_x_table(params: &ModelParams, order: u32) -> Result<MomentTable, MomentError> {
    let frame = TildeFrame::new(params)?;
    tilde_to_x_moments(&frame, &stationary_table(params, order)?)
}

/// Stationary mean `θ⁻¹ m - (a/b) θ⁻¹ κ` of X, straight from the drift.
pub fn stationary_mean_x(params: &ModelParams) -> Option<DVector<f64>> {
    let d = &params.drift;
    let inv = d.theta.clone().try_inverse()?;
    Some(inv * (&d.m - &d.kappa * (d.a / d.b)))
}

/// `E(G∞)`, `E(H∞)` and the sandwich `E(G∞)⁻¹ E(H∞) E(G∞)⁻¹`.
#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub eg: DMatrix<f64>,
    pub eh: DMatrix<f64>,
    pub sandwich: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
}

struct StationaryBlocks {
    ey: [f64; 4],
    ex: DVector<f64>,
    eyx: DVector<f64>,
    ey2x: DVector<f64>,
    exx: DMatrix<f64>,
    eyxx: DMatrix<f64>,
}

fn stationary_blocks(params: &ModelParams) -> Result<StationaryBlocks, MomentError> {
    let n = params.n();
    let t = stationary_x_table(params, 3)?;
    let idx = |k: u32, e: &[usize]| {
        let mut v = vec![0u32; n + 1];
        v[0] = k;
        for &i in e {
            v[1 + i] += 1;
        }
        v
    };
    let get = |k: u32, e: &[usize]| t.require(&idx(k, e));
    Ok(StationaryBlocks {
        ey: [1.0, get(1, &[])?, get(2, &[])?, get(3, &[])?],
        ex: DVector::from_iterator(n, (0..n).map(|i| get(0, &[i]).unwrap())),
        eyx: DVector::from_iterator(n, (0..n).map(|i| get(1, &[i]).unwrap())),
        ey2x: DVector::from_iterator(n, (0..n).map(|i| get(2, &[i]).unwrap())),
        exx: DMatrix::from_fn(n, n, |i, j| get(0, &[i, j]).unwrap()),
        eyxx: DMatrix::from_fn(n, n, |i, j| get(1, &[i, j]).unwrap()),
    })
}

/// Assembles `E(G∞)`, `E(H∞)` and the sandwich covariance of `√T(τ̂ - τ)`.
pub fn asymptotic_covariance(params: &ModelParams) -> Result<CovarianceReport, MomentError> {
    let n = params.n();
    let s = stationary_blocks(params)?;
    let p = n + 2;
    let ey = s.ey;

    let g1 = DMatrix::from_row_slice(2, 2, &[1.0, -ey[1], -ey[1], ey[2]]);
    // E[K Kᵀ] with K = (1, -Y, -X)
    let mut g2 = DMatrix::zeros(p, p);
    g2[(0, 0)] = 1.0;
    g2[(0, 1)] = -ey[1];
    g2[(1, 0)] = -ey[1];
    g2[(1, 1)] = ey[2];
    for i in 0..n {
        g2[(0, 2 + i)] = -s.ex[i];
        g2[(2 + i, 0)] = -s.ex[i];
        g2[(1, 2 + i)] = s.eyx[i];
        g2[(2 + i, 1)] = s.eyx[i];
        for j in 0..n {
            g2[(2 + i, 2 + j)] = s.exx[(i, j)];
        }
    }
    // E[Y L Kᵀ] blocks
    let h1 = DMatrix::from_row_slice(2, 2, &[ey[1], -ey[2], -ey[2], ey[3]]);
    let mut h3 = DMatrix::zeros(p, p);
    h3[(0, 0)] = ey[1];
    h3[(0, 1)] = -ey[2];
    h3[(1, 0)] = -ey[2];
    h3[(1, 1)] = ey[3];
    for i in 0..n {
        h3[(0, 2 + i)] = -s.eyx[i];
        h3[(2 + i, 0)] = -s.eyx[i];
        h3[(1, 2 + i)] = s.ey2x[i];
        h3[(2 + i, 1)] = s.ey2x[i];
        for j in 0..n {
            h3[(2 + i, 2 + j)] = s.eyxx[(i, j)];
        }
    }
    let h2 = h3.rows(0, 2).into_owned();

    let dim = tau_len(n);
    let mut eg = DMatrix::zeros(dim, dim);
    eg.view_mut((0, 0), (2, 2)).copy_from(&g1);
    for i in 0..n {
        let o = 2 + i * p;
        eg.view_mut((o, o), (p, p)).copy_from(&g2);
    }
    let sigma1 = params.sigma1();
    let rho_t = params.rho_tilde();
    let rho_j1 = params.rho_j1();
    let mut eh = DMatrix::zeros(dim, dim);
    eh.view_mut((0, 0), (2, 2)).copy_from(&(h1 * (sigma1 * sigma1)));
    let cross = linalg::kron(&DMatrix::from_row_slice(1, n, rho_j1.as_slice()), &h2) * sigma1;
    eh.view_mut((0, 2), (2, n * p)).copy_from(&cross);
    eh.view_mut((2, 0), (n * p, 2)).copy_from(&cross.transpose());
    let lower = linalg::kron(&(&rho_t * rho_t.transpose()), &h3);
    eh.view_mut((2, 2), (n * p, n * p)).copy_from(&lower);

    let cond = linalg::equilibrated_condition(&eg);
    let inv = linalg::spd_inverse(&eg, COND_LIMIT).map_err(|_| MomentError::SingularEG(cond))?;
    let inv = (&inv + inv.transpose()) * 0.5;
    let sandwich = &inv * &eh * &inv;
    Ok(CovarianceReport { eg, eh, sandwich, g1, g2 })
}

/// Integration settings for [`riccati_cf`].
#[derive(Debug, Clone, Copy)]
pub struct RiccatiOptions {
    pub step: f64,
    /// Defaults to `60 / min(b, λ_min(θ))`.
    pub horizon: Option<f64>,
    pub tail_tol: f64,
    pub step_tol: f64,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions {
            step: 1e-3,
            horizon: None,
            tail_tol: 1e-10,
            step_tol: 1e-9,
        }
    }
}

struct RiccatiSystem {
    a: f64,
    b: f64,
    sigma1: f64,
    /// `V⁻ᵀ`, so that `e^{-tθᵀ} μ = V⁻ᵀ e^{-tΛ} Vᵀ μ`.
    vinv_t: DMatrix<f64>,
    coeffs: DVector<f64>,
    lambda: Vec<f64>,
    rho_j1: DVector<f64>,
    kappa: DVector<f64>,
    s: DMatrix<f64>,
}

impl RiccatiSystem {
    fn rhs(&self, t: f64, k: Complex64) -> Complex64 {
        let decayed = DVector::from_iterator(self.coeffs.len(), self.coeffs.iter().zip(&self.lambda).map(|(c, l)| c * (-l * t).exp()));
        let w = &self.vinv_t * decayed;
        let alpha = self.rho_j1.dot(&w);
        let beta = self.kappa.dot(&w);
        let gamma = w.dot(&(&self.s * &w));
        let i = Complex64::i();
        0.5 * self.sigma1 * self.sigma1 * k * k - (self.b - i * self.sigma1 * alpha) * k - i * beta - 0.5 * gamma
    }

    /// RK4 over `[0, horizon]`, returning `(K_horizon, ∫ K)`.
    fn integrate(&self, k0: Complex64, horizon: f64, step: f64) -> (Complex64, Complex64) {
        let steps = (horizon / step).ceil() as usize;
        let h = horizon / steps as f64;
        let mut k = k0;
        let mut integral = Complex64::new(0.0, 0.0);
        for s in 0..steps {
            let t = s as f64 * h;
            let k1 = self.rhs(t, k);
            let k2 = self.rhs(t + 0.5 * h, k + 0.5 * h * k1);
            let k3 = self.rhs(t + 0.5 * h, k + 0.5 * h * k2);
            let k4 = self.rhs(t + h, k + h * k3);
            // the integral of K uses the same stage values (K' = f, I' = K)
            integral += h / 6.0 * (k + 2.0 * (k + 0.5 * h * k1) + 2.0 * (k + 0.5 * h * k2) + (k + h * k3));
            k += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let _ = self.a;
        (k, integral)
    }
}

/// Stationary Fourier–Laplace transform `E exp(-λ Y∞ + i μᵀ X∞)` from the
/// Riccati equation
///
/// ```text
/// K' = (ρ11²/2) K² - (b - i ρ11 ρ_J1ᵀ w_t) K - i κᵀ w_t - ½ w_tᵀ ρ̃ρ̃ᵀ w_t,
/// w_t = e^{-tθᵀ} μ,  K_0 = -λ,
/// ```
///
/// as `exp(a ∫_0^∞ K + i μᵀ θ⁻¹ m)`. Small negative `λ` are accepted as long
/// as the solution stays bounded, which allows centred differences at 0.
pub fn riccati_cf(params: &ModelParams, lambda: f64, mu: &DVector<f64>, opts: RiccatiOptions) -> Result<Complex64, MomentError> {
    require_subcritical(params)?;
    let d = &params.drift;
    let eig = theta_eigen(d)?;
    let rate = d.b.min(eig.values[0]);
    let horizon = opts.horizon.unwrap_or(60.0 / rate);
    let rho_t = params.rho_tilde();
    let sys = RiccatiSystem {
        a: d.a,
        b: d.b,
        sigma1: params.sigma1(),
        vinv_t: eig.inverse.transpose(),
        coeffs: eig.vectors.transpose() * mu,
        lambda: eig.values.clone(),
        rho_j1: params.rho_j1(),
        kappa: d.kappa.clone(),
        s: &rho_t * rho_t.transpose(),
    };
    let k0 = Complex64::new(-lambda, 0.0);
    let (k_end, integral) = sys.integrate(k0, horizon, opts.step);
    if k_end.norm() > opts.tail_tol {
        return Err(MomentError::HorizonTooShort(k_end.norm()));
    }
    let (_, coarse) = sys.integrate(k0, horizon, 2.0 * opts.step);
    let gap = (integral - coarse).norm();
    if gap > opts.step_tol * integral.norm().max(1.0) {
        return Err(MomentError::StepMismatch(gap));
    }
    let theta_inv_m = d.theta.clone().try_inverse().expect("subcritical theta is invertible") * &d.m;
    let phase = mu.dot(&theta_inv_m);
    Ok((d.a * integral + Complex64::new(0.0, phase)).exp())
}
