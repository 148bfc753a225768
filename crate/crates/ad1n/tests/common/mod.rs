#![allow(dead_code)]

pub mod closed;

use ad1n::model_core::{Drift, InitialLaw, ModelParams};
use ad1n::sde_sim::Path;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// n = 1 reference point started at the stationary means.
pub fn reference_params() -> ModelParams {
    let drift = Drift::new(
        2.0,
        1.0,
        DVector::from_element(1, 1.0),
        DVector::from_element(1, 0.5),
        DMatrix::from_element(1, 1, 2.0),
    )
    .unwrap();
    ModelParams::new(drift, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.9]))
        .unwrap()
        .with_init(InitialLaw::Point {
            y0: 2.0,
            x0: DVector::zeros(1),
        })
}

pub const REFERENCE_CONFIG: &str = "\
a = 2
b = 1
m = 1
kappa = 0.5
theta = 2
rho = 1, 0; 0.2, 0.9
y0 = 2
x0 = 0
regime = subcritical
";

/// n = 2 point with a non-normal θ and a nonzero stationary mean.
pub fn n2_params() -> ModelParams {
    let drift = Drift::new(
        4.0,
        2.0,
        DVector::from_vec(vec![6.0, 4.0]),
        DVector::from_vec(vec![0.5, -0.3]),
        DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.3, 1.5]),
    )
    .unwrap();
    let rho = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.2, 0.6, 0.0, -0.1, 0.3, 0.5]);
    ModelParams::new(drift, rho).unwrap().with_init(InitialLaw::Point {
        y0: 2.0,
        x0: DVector::from_vec(vec![1.8, 2.7]),
    })
}

/// Random subcritical point: θ = V diag(λ) V⁻¹ with λ in [0.5, 3].
pub fn random_subcritical<R: Rng>(rng: &mut R, n: usize) -> ModelParams {
    let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
    let v = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rng.random_range(-0.3..0.3) });
    let theta = &v * DMatrix::from_diagonal(&DVector::from_vec(lambda)) * v.clone().try_inverse().unwrap();
    let drift = Drift::new(
        rng.random_range(0.5..3.0),
        rng.random_range(0.5..2.0),
        DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        theta,
    )
    .unwrap();
    let d = n + 1;
    let rho = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            rng.random_range(0.3..1.0)
        } else if j < i {
            rng.random_range(-0.4..0.4)
        } else {
            0.0
        }
    });
    ModelParams::new(drift, rho).unwrap()
}

/// A path with arbitrary positive Y and Gaussian-ish X values.
pub fn random_path<R: Rng>(rng: &mut R, n: usize, points: usize, delta: f64) -> Path {
    let states = DMatrix::from_fn(points, n + 1, |_, c| {
        if c == 0 {
            rng.random_range(0.1..3.0)
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    let times = (0..points).map(|k| k as f64 * delta).collect();
    Path::from_states(times, states, 0, String::new()).unwrap()
}

/// Discrete least squares `min Σ ‖ΔZ_k - Δ Λ(Z_{k-1}) τ‖²` solved by SVD on the
/// stacked (N d) × (d² + 1) system, with Λ written out by hand.
pub fn stacked_least_squares(path: &Path) -> DVector<f64> {
    let n = path.n();
    let d = n + 1;
    let p = d * d + 1;
    let steps = path.steps();
    let delta = path.delta;
    let mut a = DMatrix::zeros(steps * d, p);
    let mut rhs = DVector::zeros(steps * d);
    for k in 0..steps {
        let y = path.states[(k, 0)];
        let base = k * d;
        a[(base, 0)] = delta;
        a[(base, 1)] = -y * delta;
        rhs[base] = path.states[(k + 1, 0)] - y;
        for i in 0..n {
            let row = base + 1 + i;
            let col = 2 + i * (n + 2);
            a[(row, col)] = delta;
            a[(row, col + 1)] = -y * delta;
            for j in 0..n {
                a[(row, col + 2 + j)] = -path.states[(k, 1 + j)] * delta;
            }
            rhs[row] = path.states[(k + 1, 1 + i)] - path.states[(k, 1 + i)];
        }
    }
    a.svd(true, true).solve(&rhs, 1e-14).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
