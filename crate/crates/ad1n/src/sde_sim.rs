//! Path simulation on a uniform grid.
//!
//! Y moves by exact CIR transitions (scaled noncentral chi-square draws).
//! The Brownian increment driving Y is recovered from the realised move,
//! centred at its exact conditional mean, and reused for X so that the
//! cross-correlation between the two components is preserved. X itself is
//! advanced with its exact one-step conditional mean plus a Gaussian
//! innovation `√Y ρ̃ ΔB`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clse::{g_map, TildeParams};
use crate::model_core::{validate, Drift, ModelParams};

/// Below this level the driving increment of Y is drawn afresh.
pub const Y_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("inadmissible parameters: {0}")]
    InadmissibleParams(String),
}

/// A sampled path `(t_k, Y_{t_k}, X_{t_k})`, `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub delta: f64,
    pub times: Vec<f64>,
    /// (N+1)×d, column 0 is Y.
    pub states: DMatrix<f64>,
    pub seed: u64,
    pub params_hash: String,
}

impl Path {
    /// Builds a path from raw states after checking the grid and positivity.
    pub fn from_states(times: Vec<f64>, states: DMatrix<f64>, seed: u64, params_hash: String) -> Result<Self, SimError> {
        if times.len() != states.nrows() || times.len() < 2 {
            return Err(SimError::InvalidGrid("need at least two time points matching the states".into()));
        }
        let delta = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        if !(delta > 0.0) {
            return Err(SimError::InvalidGrid("times must increase".into()));
        }
        for w in times.windows(2) {
            if ((w[1] - w[0]) - delta).abs() > 1e-9 * delta.max(1.0) {
                return Err(SimError::InvalidGrid("grid is not uniform".into()));
            }
        }
        if states.column(0).iter().any(|y| *y < 0.0) {
            return Err(SimError::InvalidGrid("Y must be nonnegative".into()));
        }
        Ok(Path {
            delta,
            times,
            states,
            seed,
            params_hash,
        })
    }

    /// Number of grid points N+1.
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    /// Number of steps N.
    pub fn steps(&self) -> usize {
        self.len() - 1
    }

    pub fn n(&self) -> usize {
        self.states.ncols() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.delta * self.steps() as f64
    }

    pub fn y(&self, k: usize) -> f64 {
        self.states[(k, 0)]
    }

    pub fn x(&self, k: usize) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.states.row(k).iter().skip(1).copied())
    }
}

/// Random stream of replication `index` under a master seed.
pub fn replication_rng(master: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Exact CIR transition sampler `dY = (a - bY)dt + σ√Y dW` over a step `h`.
#[derive(Debug, Clone)]
pub struct CirTransition {
    scale: f64,
    decay: f64,
    df: f64,
    chi_rest: Option<ChiSquared<f64>>,
    /// `E[Y_{t+h} | Y_t = y] = decay * y + shift`.
    shift: f64,
}

impl CirTransition {
    pub fn new(a: f64, b: f64, sigma: f64, h: f64) -> Self {
        let s2 = sigma * sigma;
        let decay = (-b * h).exp();
        let scale = s2 * crate::linalg::exp_integral(b, h) / 4.0;
        let df = 4.0 * a / s2;
        let chi_rest = if df > 1.0 {
            Some(ChiSquared::new(df - 1.0).expect("positive degrees of freedom"))
        } else {
            None
        };
        CirTransition {
            scale,
            decay,
            df,
            chi_rest,
            shift: a * crate::linalg::exp_integral(b, h),
        }
    }

    pub fn conditional_mean(&self, y: f64) -> f64 {
        self.decay * y + self.shift
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: f64, rng: &mut R) -> f64 {
        let nc = (y * self.decay / self.scale).max(0.0);
        let chi = match &self.chi_rest {
            Some(rest) => {
                let z: f64 = rng.sample(StandardNormal);
                let w = z + nc.sqrt();
                w * w + rest.sample(rng)
            }
            None => {
                let k = if nc > 0.0 {
                    Poisson::new(nc / 2.0).expect("positive rate").sample(rng)
                } else {
                    0.0
                };
                let dof = self.df + 2.0 * k;
                if dof > 0.0 {
                    ChiSquared::new(dof).expect("positive degrees of freedom").sample(rng)
                } else {
                    0.0
                }
            }
        };
        self.scale * chi
    }
}

/// One-step simulator for the full state.
#[derive(Debug, Clone)]
pub struct Stepper {
    cir: CirTransition,
    tilde: TildeParams,
    rho_tilde: DMatrix<f64>,
    sigma1: f64,
    sqrt_h: f64,
    n: usize,
}

impl Stepper {
    pub fn new(drift: &Drift, rho: &DMatrix<f64>, h: f64) -> Self {
        let n = drift.n();
        let sigma1 = rho[(0, 0)];
        Stepper {
            cir: CirTransition::new(drift.a, drift.b, sigma1, h),
            tilde: g_map(drift, h),
            rho_tilde: rho.rows(1, n).into_owned(),
            sigma1,
            sqrt_h: h.sqrt(),
            n,
        }
    }

    /// Advances `(y, x)` in place by one step.
    pub fn step<R: Rng + ?Sized>(&self, y: &mut f64, x: &mut DVector<f64>, db: &mut DVector<f64>, rng: &mut R) {
        let y0 = *y;
        let y1 = self.cir.sample(y0, rng);
        if y0 > Y_FLOOR {
            db[0] = (y1 - self.cir.conditional_mean(y0)) / (self.sigma1 * y0.sqrt());
        } else {
            let z: f64 = rng.sample(StandardNormal);
            db[0] = z * self.sqrt_h;
        }
        for j in 1..=self.n {
            let z: f64 = rng.sample(StandardNormal);
            db[j] = z * self.sqrt_h;
        }
        let root = y0.max(0.0).sqrt();
        let mean = &self.tilde.m - &self.tilde.kappa * y0 - &self.tilde.theta * &*x;
        let noise = &self.rho_tilde * &*db * root;
        *x += mean + noise;
        *y = y1;
    }
}

fn grid_steps(horizon: f64, delta: f64) -> Result<usize, SimError> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(SimError::InvalidGrid(format!("delta must be positive, got {}", delta)));
    }
    if !(horizon >= delta) || !horizon.is_finite() {
        return Err(SimError::InvalidGrid(format!("horizon {} must be at least delta {}", horizon, delta)));
    }
    Ok((horizon / delta + 1e-9).floor() as usize)
}

/// Simulates with an explicit generator; `seed` is only recorded.
pub fn simulate_path_with<R: Rng + ?Sized>(params: &ModelParams, horizon: f64, delta: f64, seed: u64, rng: &mut R) -> Result<Path, SimError> {
    let report = validate(params);
    if !report.is_ok() {
        return Err(SimError::InadmissibleParams(report.violations.join("; ")));
    }
    let steps = grid_steps(horizon, delta)?;
    let n = params.n();
    let stepper = Stepper::new(&params.drift, &params.rho, delta);
    let (y0, x0) = params.init.start();
    let mut y = y0;
    let mut x = x0.clone();
    let mut db = DVector::zeros(n + 1);
    let burn = (params.init.burn_in() / delta).round() as usize;
    for _ in 0..burn {
        stepper.step(&mut y, &mut x, &mut db, rng);
    }
    let mut states = DMatrix::zeros(steps + 1, n + 1);
    let mut record = |k: usize, y: f64, x: &DVector<f64>| {
        states[(k, 0)] = y;
        for i in 0..n {
            states[(k, 1 + i)] = x[i];
        }
    };
    record(0, y, &x);
    for k in 1..=steps {
        stepper.step(&mut y, &mut x, &mut db, rng);
        assert!(y >= 0.0, "CIR transition produced a negative value");
        record(k, y, &x);
    }
    let times = (0..=steps).map(|k| k as f64 * delta).collect();
    Ok(Path {
        delta,
        times,
        states,
        seed,
        params_hash: params.digest(),
    })
}

/// Simulates one path on `[0, horizon]` with step `delta`; the generator is
/// stream 0 of `seed`.
pub fn simulate_path(params: &ModelParams, horizon: f64, delta: f64, seed: u64) -> Result<Path, SimError> {
    let mut rng = replication_rng(seed, 0);
    simulate_path_with(params, horizon, delta, seed, &mut rng)
}

/// Functionals on `[0, 1]` of the zero-started process
/// `d𝒴 = a dt + ρ11 √𝒴 dB¹`, `d𝒳 = m dt + √𝒴 ρ̃ dB`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalLimitSample {
    pub y1: f64,
    pub x1: Vec<f64>,
    pub int_y: f64,
    pub int_x: Vec<f64>,
    pub int_y2: f64,
    /// `∫ 𝒳 𝒳ᵀ`, row-major n×n.
    pub int_xx: Vec<f64>,
    pub int_yx: Vec<f64>,
    pub int_y_dy: f64,
    pub int_y_dx: Vec<f64>,
    /// `∫ 𝒳 d𝒳ᵀ`, row-major n×n.
    pub int_x_dx: Vec<f64>,
}

/// Left-point functionals of a path on its whole horizon, scaled to the unit
/// interval: time integrals by `1/T` per unit time and the states by the
/// given factors (used for scaling checks).
pub fn path_functionals(path: &Path, time_scale: f64, state_scale: f64) -> CriticalLimitSample {
    let n = path.n();
    let s = &path.states;
    let dt = path.delta * time_scale;
    let mut out = CriticalLimitSample {
        y1: s[(path.steps(), 0)] * state_scale,
        x1: (0..n).map(|i| s[(path.steps(), 1 + i)] * state_scale).collect(),
        int_y: 0.0,
        int_x: vec![0.0; n],
        int_y2: 0.0,
        int_xx: vec![0.0; n * n],
        int_yx: vec![0.0; n],
        int_y_dy: 0.0,
        int_y_dx: vec![0.0; n],
        int_x_dx: vec![0.0; n * n],
    };
    let mut x = vec![0.0; n];
    let mut dx = vec![0.0; n];
    for k in 0..path.steps() {
        let y = s[(k, 0)] * state_scale;
        let dy = (s[(k + 1, 0)] - s[(k, 0)]) * state_scale;
        for i in 0..n {
            x[i] = s[(k, 1 + i)] * state_scale;
            dx[i] = (s[(k + 1, 1 + i)] - s[(k, 1 + i)]) * state_scale;
        }
        out.int_y += y * dt;
        out.int_y2 += y * y * dt;
        out.int_y_dy += y * dy;
        for i in 0..n {
            out.int_x[i] += x[i] * dt;
            out.int_yx[i] += y * x[i] * dt;
            out.int_y_dx[i] += y * dx[i];
            for j in 0..n {
                out.int_xx[i * n + j] += x[i] * x[j] * dt;
                out.int_x_dx[i * n + j] += x[i] * dx[j];
            }
        }
    }
    out
}

/// One draw of the critical limit functionals. Only `a`, `m` and `ρ` of
/// `params` are used; `b`, `κ`, `θ` are set to zero and the start to the origin.
pub fn simulate_critical_limit<R: Rng + ?Sized>(params: &ModelParams, fine_delta: f64, rng: &mut R) -> Result<CriticalLimitSample, SimError> {
    if !(fine_delta > 0.0 && fine_delta <= 1e-3) {
        return Err(SimError::InvalidGrid(format!("fine_delta must lie in (0, 1e-3], got {}", fine_delta)));
    }
    let n = params.n();
    let mut drift = Drift::zeros(n);
    drift.a = params.drift.a;
    drift.m = params.drift.m.clone();
    let zero_started = ModelParams {
        drift,
        rho: params.rho.clone(),
        init: crate::model_core::InitialLaw::Point {
            y0: 0.0,
            x0: DVector::zeros(n),
        },
    };
    let path = simulate_path_with(&zero_started, 1.0, fine_delta, 0, rng)?;
    Ok(path_functionals(&path, 1.0, 1.0))
}

/// Monte Carlo estimate of `E‖Z_t - Z_s‖₁^q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementEstimate {
    pub s: f64,
    pub t: f64,
    pub mean: f64,
    pub std_err: f64,
}

/// Estimates `E‖Z_t - Z_s‖₁^q` for each pair over `replications` paths
/// simulated with step `delta` (pair times are rounded to the grid).
pub fn increment_moment_probe(
    params: &ModelParams,
    q: f64,
    pairs: &[(f64, f64)],
    delta: f64,
    replications: usize,
    seed: u64,
) -> Result<Vec<IncrementEstimate>, SimError> {
    let horizon = pairs.iter().fold(delta, |acc, &(s, t)| acc.max(s).max(t));
    let rows: Vec<Result<Vec<f64>, SimError>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(seed, r as u64);
            let path = simulate_path_with(params, horizon, delta, seed, &mut rng)?;
            Ok(pairs
                .iter()
                .map(|&(s, t)| {
                    let ks = (s / delta).round() as usize;
                    let kt = (t / delta).round() as usize;
                    let diff: f64 = (0..path.states.ncols())
                        .map(|c| (path.states[(kt, c)] - path.states[(ks, c)]).abs())
                        .sum();
                    if ks == kt {
                        0.0
                    } else {
                        diff.powf(q)
                    }
                })
                .collect())
        })
        .collect();
    let mut values = Vec::with_capacity(replications);
    for r in rows {
        values.push(r?);
    }
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(j, &(s, t))| {
            let col: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let (mean, sd) = crate::stats::mean_sd(&col);
            IncrementEstimate {
                s,
                t,
                mean,
                std_err: sd / (col.len() as f64).sqrt(),
            }
        })
        .collect())
}

/// Averages `‖Z_{s+h} - Z_s‖₁^q` over all grid points `s` of `replications`
/// paths of length `horizon`, for every lag `h`.
pub fn lag_moment_probe(
    params: &ModelParams,
    q: f64,
    lags: &[f64],
    delta: f64,
    horizon: f64,
    replications: usize,
    seed: u64,
) -> Result<Vec<IncrementEstimate>, SimError> {
    let per_path: Vec<Result<Vec<f64>, SimError>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = replication_rng(seed, r as u64);
            let path = simulate_path_with(params, horizon, delta, seed, &mut rng)?;
            Ok(lags
                .iter()
                .map(|&h| {
                    let lag = (h / delta).round() as usize;
                    let count = path.len().saturating_sub(lag);
                    if lag == 0 || count == 0 {
                        return 0.0;
                    }
                    let mut acc = 0.0;
                    for k in 0..count {
                        let diff: f64 = (0..path.states.ncols())
                            .map(|c| (path.states[(k + lag, c)] - path.states[(k, c)]).abs())
                            .sum();
                        acc += diff.powf(q);
                    }
                    acc / count as f64
                })
                .collect())
        })
        .collect();
    let mut values = Vec::with_capacity(replications);
    for r in per_path {
        values.push(r?);
    }
    Ok(lags
        .iter()
        .enumerate()
        .map(|(j, &h)| {
            let col: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let (mean, sd) = crate::stats::mean_sd(&col);
            IncrementEstimate {
                s: 0.0,
                t: h,
                mean,
                std_err: sd / (col.len() as f64).sqrt(),
            }
        })
        .collect())
}
