//! Parameters of the AD(1,n) model
//!
//! ```text
//! dY = (a - b Y) dt + ρ11 √Y dB¹
//! dX = (m - κ Y - θ X) dt + √Y ρ̃ dB
//! ```
//!
//! together with validation, regime classification and the canonical
//! stacking of the drift parameters into a single vector τ.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{self, LinalgError, RealEigen};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("theta is not diagonalizable (relative residual {0:e})")]
    NonDiagonalizable(f64),
    #[error("theta has a complex eigenvalue (imaginary part {0:e})")]
    ComplexSpectrum(f64),
    #[error("inadmissible parameters: {0}")]
    Inadmissible(String),
}

impl From<LinalgError> for ModelError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NonDiagonalizable(r) => ModelError::NonDiagonalizable(r),
            LinalgError::ComplexSpectrum(i) => ModelError::ComplexSpectrum(i),
            other => ModelError::Inadmissible(other.to_string()),
        }
    }
}

/// Drift parameters `(a, b, m, κ, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub a: f64,
    pub b: f64,
    pub m: DVector<f64>,
    pub kappa: DVector<f64>,
    pub theta: DMatrix<f64>,
}

impl Drift {
    pub fn new(a: f64, b: f64, m: DVector<f64>, kappa: DVector<f64>, theta: DMatrix<f64>) -> Result<Self, ModelError> {
        let n = m.len();
        if kappa.len() != n || theta.nrows() != n || theta.ncols() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "m has {} entries, kappa {}, theta is {}x{}",
                n,
                kappa.len(),
                theta.nrows(),
                theta.ncols()
            )));
        }
        Ok(Drift { a, b, m, kappa, theta })
    }

    /// Dimension of X.
    pub fn n(&self) -> usize {
        self.m.len()
    }

    /// All-zero drift of dimension `n`.
    pub fn zeros(n: usize) -> Self {
        Drift {
            a: 0.0,
            b: 0.0,
            m: DVector::zeros(n),
            kappa: DVector::zeros(n),
            theta: DMatrix::zeros(n, n),
        }
    }

    /// Drift `(a - b y, m - κ y - θ x)` evaluated at a state.
    pub fn eval(&self, y: f64, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut out = DVector::zeros(n + 1);
        out[0] = self.a - self.b * y;
        let dx = &self.m - &self.kappa * y - &self.theta * x;
        out.rows_mut(1, n).copy_from(&dx);
        out
    }

    /// Largest absolute entry difference with another drift of the same size.
    pub fn max_abs_diff(&self, other: &Drift) -> f64 {
        (stack_tau(self).0 - stack_tau(other).0).amax()
    }
}

/// Law of the starting point `(Y_0, X_0)`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Deterministic start.
    Point { y0: f64, x0: DVector<f64> },
    /// Start at a point and run the dynamics for `time` before recording, so
    /// the recorded start is a random draw driven by the path seed.
    BurnIn { y0: f64, x0: DVector<f64>, time: f64 },
}

impl InitialLaw {
    pub fn start(&self) -> (f64, &DVector<f64>) {
        match self {
            InitialLaw::Point { y0, x0 } | InitialLaw::BurnIn { y0, x0, .. } => (*y0, x0),
        }
    }

    pub fn burn_in(&self) -> f64 {
        match self {
            InitialLaw::Point { .. } => 0.0,
            InitialLaw::BurnIn { time, .. } => *time,
        }
    }
}

/// Full parameter set: drift, lower triangular diffusion factor `ρ` (d×d,
/// d = n+1) and the initial law.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub drift: Drift,
    pub rho: DMatrix<f64>,
    pub init: InitialLaw,
}

impl ModelParams {
    /// Builds parameters starting from `(1, 0)`; only shapes are checked here,
    /// use [`validate`] for the full admissibility report.
    pub fn new(drift: Drift, rho: DMatrix<f64>) -> Result<Self, ModelError> {
        let d = drift.n() + 1;
        if rho.nrows() != d || rho.ncols() != d {
            return Err(ModelError::DimensionMismatch(format!(
                "rho must be {}x{}, got {}x{}",
                d,
                d,
                rho.nrows(),
                rho.ncols()
            )));
        }
        let n = drift.n();
        Ok(ModelParams {
            drift,
            rho,
            init: InitialLaw::Point {
                y0: 1.0,
                x0: DVector::zeros(n),
            },
        })
    }

    pub fn with_init(mut self, init: InitialLaw) -> Self {
        self.init = init;
        self
    }

    pub fn n(&self) -> usize {
        self.drift.n()
    }

    pub fn d(&self) -> usize {
        self.drift.n() + 1
    }

    /// `σ_i = ‖ρ_i‖`, the row norms of ρ.
    pub fn sigma(&self) -> DVector<f64> {
        DVector::from_fn(self.d(), |i, _| self.rho.row(i).norm())
    }

    pub fn sigma1(&self) -> f64 {
        self.rho[(0, 0)].abs()
    }

    /// ρ̃ = [ρ_J1 ρ_JJ], the last n rows of ρ (n×d).
    pub fn rho_tilde(&self) -> DMatrix<f64> {
        self.rho.rows(1, self.n()).into_owned()
    }

    /// ρ_J1, the first column of ρ̃.
    pub fn rho_j1(&self) -> DVector<f64> {
        self.rho.view((1, 0), (self.n(), 1)).column(0).into_owned()
    }

    /// Hex SHA-256 digest of the parameter values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let (y0, x0) = self.init.start();
        let mut feed = |v: f64| h.update(v.to_le_bytes());
        for v in stack_tau(&self.drift).0.iter() {
            feed(*v);
        }
        for v in self.rho.iter() {
            feed(*v);
        }
        feed(y0);
        for v in x0.iter() {
            feed(*v);
        }
        feed(self.init.burn_in());
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }
}

/// List of violated invariants; empty means admissible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every admissibility condition and reports all of them.
pub fn validate(params: &ModelParams) -> ValidationReport {
    let mut v = Vec::new();
    let n = params.n();
    let d = n + 1;
    let p = &params.drift;
    if n == 0 {
        v.push("dimension n must be at least 1".to_string());
    }
    if p.kappa.len() != n || p.theta.nrows() != n || p.theta.ncols() != n {
        v.push("drift blocks have inconsistent dimensions".to_string());
    }
    if params.rho.nrows() != d || params.rho.ncols() != d {
        v.push(format!("rho must be {}x{}", d, d));
        return ValidationReport { violations: v };
    }
    let finite = p.a.is_finite()
        && p.b.is_finite()
        && p.m
            .iter()
            .chain(p.kappa.iter())
            .chain(p.theta.iter())
            .chain(params.rho.iter())
            .all(|x| x.is_finite());
    if !finite {
        v.push("parameters must be finite".to_string());
    }
    if p.a < 0.0 {
        v.push("a must be nonnegative".to_string());
    }
    for i in 0..d {
        for j in (i + 1)..d {
            if params.rho[(i, j)] != 0.0 {
                v.push("rho must be lower triangular".to_string());
                break;
            }
        }
    }
    if (0..d).any(|i| !(params.rho[(i, i)] > 0.0)) {
        v.push("rho diagonal must be positive".to_string());
    }
    if params.sigma().iter().any(|s| !(*s > 0.0)) {
        v.push("sigma must be positive".to_string());
    }
    if n > 0 && finite && p.theta.nrows() == n && p.theta.ncols() == n {
        match linalg::real_eigen(&p.theta) {
            Ok(_) => {}
            Err(LinalgError::ComplexSpectrum(_)) => v.push("theta has complex eigenvalues".to_string()),
            Err(_) => v.push("theta not diagonalizable".to_string()),
        }
    }
    let (y0, x0) = params.init.start();
    if !(y0 >= 0.0) {
        v.push("initial Y must be nonnegative".to_string());
    }
    if x0.len() != n {
        v.push("initial X has wrong dimension".to_string());
    }
    if params.init.burn_in() < 0.0 {
        v.push("burn-in time must be nonnegative".to_string());
    }
    ValidationReport { violations: v }
}

/// Asymptotic regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
    Unsupported,
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "subcritical" => Ok(Regime::Subcritical),
            "critical" => Ok(Regime::Critical),
            "supercritical" => Ok(Regime::Supercritical),
            "unsupported" => Ok(Regime::Unsupported),
            other => Err(format!("unknown regime '{}'", other)),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Subcritical => "subcritical",
            Regime::Critical => "critical",
            Regime::Supercritical => "supercritical",
            Regime::Unsupported => "unsupported",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub regime: Regime,
    pub b: f64,
    /// Eigenvalues of θ, ascending.
    pub eig_theta: Vec<f64>,
}

impl Classification {
    pub fn lambda_min(&self) -> f64 {
        self.eig_theta[0]
    }
    pub fn lambda_max(&self) -> f64 {
        *self.eig_theta.last().unwrap()
    }
}

/// Classifies by the sign of `b` and the spectrum of θ.
///
/// θ must be positive definite, negative definite or zero (in the spectral
/// sense), with eigenvalues either all different from `b` or all equal to it;
/// anything else is [`Regime::Unsupported`].
pub fn classify(params: &ModelParams) -> Result<Classification, ModelError> {
    classify_drift(&params.drift)
}

/// [`classify`] on drift parameters alone.
pub fn classify_drift(drift: &Drift) -> Result<Classification, ModelError> {
    let eig = linalg::real_eigen(&drift.theta)?;
    let b = drift.b;
    let values: Vec<f64> = eig.values.clone();
    let zero_tol = 1e-12 * linalg::norm2(&drift.theta).max(1.0);
    let values: Vec<f64> = values.into_iter().map(|l| if l.abs() <= zero_tol { 0.0 } else { l }).collect();
    let lmin = values[0];
    let lmax = *values.last().unwrap();
    let pos = lmin > 0.0;
    let neg = lmax < 0.0;
    let zero = lmin == 0.0 && lmax == 0.0;
    let all_eq_b = values.iter().all(|&l| l == b);
    let none_eq_b = values.iter().all(|&l| l != b);
    let hypothesis = (pos || neg || zero) && (all_eq_b || none_eq_b);
    let regime = if !hypothesis {
        Regime::Unsupported
    } else if b.min(lmin) > 0.0 {
        Regime::Subcritical
    } else if (b >= 0.0 && zero) || (b == 0.0 && lmin > 0.0) {
        Regime::Critical
    } else if b.min(lmax) < 0.0 {
        Regime::Supercritical
    } else {
        Regime::Unsupported
    };
    Ok(Classification {
        regime,
        b,
        eig_theta: values,
    })
}

/// Eigendecomposition of θ, shared by the moment and asymptotic code.
pub fn theta_eigen(drift: &Drift) -> Result<RealEigen, ModelError> {
    Ok(linalg::real_eigen(&drift.theta)?)
}

/// τ in the order `(a, b, m1, κ1, θ11..θ1n, ..., mn, κn, θn1..θnn)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TauVector(pub DVector<f64>);

impl TauVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Length `(n+1)^2 + 1` of τ.
pub fn tau_len(n: usize) -> usize {
    (n + 1) * (n + 1) + 1
}

/// Dimension `n` such that `tau_len(n) == len`.
pub fn n_from_tau_len(len: usize) -> Option<usize> {
    (1..64).find(|&n| tau_len(n) == len)
}

/// Position of `θ_ij` (1-based `i`, `j`) inside τ (0-based).
pub fn theta_index(n: usize, i: usize, j: usize) -> usize {
    2 + (i - 1) * (n + 2) + 2 + (j - 1)
}

/// Human-readable names of the τ entries.
pub fn tau_labels(n: usize) -> Vec<String> {
    let mut out = vec!["a".to_string(), "b".to_string()];
    for i in 1..=n {
        out.push(format!("m{}", i));
        out.push(format!("kappa{}", i));
        for j in 1..=n {
            out.push(format!("theta{}_{}", i, j));
        }
    }
    out
}

pub fn stack_tau(drift: &Drift) -> TauVector {
    let n = drift.n();
    let mut v = DVector::zeros(tau_len(n));
    v[0] = drift.a;
    v[1] = drift.b;
    for i in 0..n {
        let base = 2 + i * (n + 2);
        v[base] = drift.m[i];
        v[base + 1] = drift.kappa[i];
        for j in 0..n {
            v[base + 2 + j] = drift.theta[(i, j)];
        }
    }
    TauVector(v)
}

pub fn unstack_tau(v: &[f64], n: usize) -> Result<Drift, ModelError> {
    if v.len() != tau_len(n) {
        return Err(ModelError::DimensionMismatch(format!(
            "tau of length {} does not match n = {} (expected {})",
            v.len(),
            n,
            tau_len(n)
        )));
    }
    let mut m = DVector::zeros(n);
    let mut kappa = DVector::zeros(n);
    let mut theta = DMatrix::zeros(n, n);
    for i in 0..n {
        let base = 2 + i * (n + 2);
        m[i] = v[base];
        kappa[i] = v[base + 1];
        for j in 0..n {
            theta[(i, j)] = v[base + 2 + j];
        }
    }
    Ok(Drift {
        a: v[0],
        b: v[1],
        m,
        kappa,
        theta,
    })
}

/// Design matrix Λ(z), d × (d²+1), with `Λ(z) τ` equal to the drift at `z`.
pub fn drift_design(y: f64, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let d = n + 1;
    let mut out = DMatrix::zeros(d, tau_len(n));
    out[(0, 0)] = 1.0;
    out[(0, 1)] = -y;
    for i in 0..n {
        let base = 2 + i * (n + 2);
        out[(i + 1, base)] = 1.0;
        out[(i + 1, base + 1)] = -y;
        for j in 0..n {
            out[(i + 1, base + 2 + j)] = -x[j];
        }
    }
    out
}
