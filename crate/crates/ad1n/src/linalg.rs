//! Dense matrix helpers shared by the estimators and the moment code:
//! real eigendecomposition, principal logarithm, integrals of matrix
//! exponentials, guarded symmetric solves and adaptive quadrature.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Failures of the matrix routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("complex eigenvalue with imaginary part {0:e}")]
    ComplexSpectrum(f64),
    #[error("matrix is not diagonalizable (relative residual {0:e})")]
    NonDiagonalizable(f64),
    #[error("principal logarithm undefined: eigenvalue {re}{im:+}i on the closed negative real axis")]
    LogDomain { re: f64, im: f64 },
    #[error("matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
    #[error("iteration failed to converge: {0}")]
    NoConvergence(&'static str),
}

/// Relative tolerance on the imaginary part of eigenvalues.
pub const IMAG_TOL: f64 = 1e-8;
/// Relative tolerance on the diagonalisation residual.
pub const DIAG_TOL: f64 = 1e-10;
/// Default condition number guard for linear solves.
pub const COND_LIMIT: f64 = 1e12;

/// Eigendecomposition `theta = vectors * diag(values) * vectors^{-1}` with
/// real eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct RealEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub residual: f64,
}

/// Spectral norm (largest singular value).
pub fn norm2(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

/// Real eigendecomposition of a diagonalizable matrix with real spectrum.
pub fn real_eigen(theta: &DMatrix<f64>) -> Result<RealEigen, LinalgError> {
    let n = theta.nrows();
    assert_eq!(n, theta.ncols(), "real_eigen needs a square matrix");
    if n == 0 {
        return Ok(RealEigen {
            values: vec![],
            vectors: DMatrix::zeros(0, 0),
            inverse: DMatrix::zeros(0, 0),
            residual: 0.0,
        });
    }
    let scale = norm2(theta).max(1.0);
    let eig = theta.complex_eigenvalues();
    let mut values = Vec::with_capacity(n);
    for z in eig.iter() {
        if z.im.abs() > IMAG_TOL * scale {
            return Err(LinalgError::ComplexSpectrum(z.im));
        }
        values.push(z.re);
    }
    values.sort_by(|x, y| x.partial_cmp(y).unwrap());

    // group numerically repeated eigenvalues and take a null-space basis of
    // (theta - mu I) of the cluster's size
    let cluster_tol = 1e-6 * scale;
    let mut vectors = DMatrix::zeros(n, n);
    let mut out_values = Vec::with_capacity(n);
    let mut col = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[j] - values[j - 1] <= cluster_tol {
            j += 1;
        }
        let k = j - i;
        let mu = values[i..j].iter().sum::<f64>() / k as f64;
        let shifted = theta - DMatrix::identity(n, n) * mu;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.expect("right singular vectors requested");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&p, &q| svd.singular_values[p].partial_cmp(&svd.singular_values[q]).unwrap());
        for &idx in order.iter().take(k) {
            let v = vt.row(idx).transpose();
            vectors.set_column(col, &v);
            out_values.push(mu);
            col += 1;
        }
        i = j;
    }

    let inverse = match vectors.clone().try_inverse() {
        Some(inv) => inv,
        None => return Err(LinalgError::NonDiagonalizable(f64::INFINITY)),
    };
    let recon = &vectors * DMatrix::from_diagonal(&DVector::from_vec(out_values.clone())) * &inverse;
    let fro = theta.norm();
    let residual = (theta - recon).norm();
    let rel = if fro > 0.0 { residual / fro } else { residual };
    if rel > DIAG_TOL {
        return Err(LinalgError::NonDiagonalizable(rel));
    }
    Ok(RealEigen {
        values: out_values,
        vectors,
        inverse,
        residual: rel,
    })
}

/// Matrix exponential.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.is_empty() {
        return a.clone();
    }
    a.exp()
}

fn denman_beavers(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().ok_or(LinalgError::NoConvergence("square root"))?;
        let zi = z.clone().try_inverse().ok_or(LinalgError::NoConvergence("square root"))?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * y.norm() {
            return Ok(y);
        }
    }
    Err(LinalgError::NoConvergence("square root"))
}

/// Principal matrix logarithm by inverse scaling and squaring.
///
/// Fails with [`LinalgError::LogDomain`] when an eigenvalue lies on the closed
/// negative real axis.
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let scale = norm2(a).max(f64::MIN_POSITIVE);
    for z in a.complex_eigenvalues().iter() {
        if z.re <= 0.0 && z.im.abs() <= 1e-12 * scale {
            return Err(LinalgError::LogDomain { re: z.re, im: z.im });
        }
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut x = a.clone();
    let mut squarings = 0;
    while (&x - &id).norm() > 0.25 {
        if squarings > 60 {
            return Err(LinalgError::NoConvergence("logarithm scaling"));
        }
        x = denman_beavers(&x)?;
        squarings += 1;
    }
    // log X = 2 artanh(Z), Z = (X - I)(X + I)^{-1}
    let plus = (&x + &id).try_inverse().ok_or(LinalgError::NoConvergence("logarithm"))?;
    let z = (&x - &id) * plus;
    let z2 = &z * &z;
    let mut term = z.clone();
    let mut sum = z.clone();
    for k in 1..200 {
        term = &term * &z2;
        let add = &term / (2 * k + 1) as f64;
        sum += &add;
        if add.norm() <= 1e-17 * sum.norm().max(1e-300) {
            break;
        }
    }
    Ok(sum * (2.0 * (1u64 << squarings) as f64))
}

/// `∫_0^h e^{-b u} du`, stable for small `b h`.
pub fn exp_integral(b: f64, h: f64) -> f64 {
    let x = b * h;
    if x.abs() < 1e-5 {
        h * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0)
    } else {
        -(-x).exp_m1() / b
    }
}

/// `∫_0^h e^{A v} dv` through the block-triangular exponential
/// `exp([[A, I], [0, 0]] h)`.
pub fn exp_integral_matrix(a: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(a * h));
    big.view_mut((0, n), (n, n)).fill_with_identity();
    big.view_mut((0, n), (n, n)).scale_mut(h);
    let e = expm(&big);
    e.view((0, n), (n, n)).into_owned()
}

/// `∫_0^h e^{-θ(h-s)} (∫_0^s e^{-b q} dq) ds` through a 3x3 block exponential.
pub fn nested_exp_integral(theta: &DMatrix<f64>, b: f64, h: f64) -> DMatrix<f64> {
    let n = theta.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut big = DMatrix::zeros(3 * n, 3 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(-theta * h));
    big.view_mut((0, n), (n, n)).copy_from(&(&id * h));
    big.view_mut((n, n), (n, n)).copy_from(&(&id * (-b * h)));
    big.view_mut((n, 2 * n), (n, n)).copy_from(&(&id * h));
    let e = expm(&big);
    e.view((0, 2 * n), (n, n)).into_owned()
}

/// Condition number of a symmetric positive semidefinite matrix after
/// Jacobi equilibration `D^{-1/2} G D^{-1/2}`; infinite when not positive definite.
pub fn equilibrated_condition(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let gii = g[(i, i)];
        if !(gii > 0.0) || !gii.is_finite() {
            return f64::INFINITY;
        }
        d[i] = 1.0 / gii.sqrt();
    }
    let s = DMatrix::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]) * d[i] * d[j]);
    let ev = s.symmetric_eigenvalues();
    let lo = ev.min();
    let hi = ev.max();
    if !(lo > 0.0) {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `G X = B` for symmetric positive definite `G` by an equilibrated
/// Cholesky factorisation, refusing when the condition number exceeds `limit`.
pub fn spd_solve(g: &DMatrix<f64>, rhs: &DMatrix<f64>, limit: f64) -> Result<DMatrix<f64>, LinalgError> {
    let cond = equilibrated_condition(g);
    if !(cond <= limit) {
        return Err(LinalgError::IllConditioned(cond));
    }
    let n = g.nrows();
    let d = DVector::from_fn(n, |i, _| 1.0 / g[(i, i)].sqrt());
    let s = DMatrix::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]) * d[i] * d[j]);
    let chol = s.cholesky().ok_or(LinalgError::IllConditioned(cond))?;
    let scaled_rhs = DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| rhs[(i, j)] * d[i]);
    let y = chol.solve(&scaled_rhs);
    Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] * d[i]))
}

/// Inverse of a symmetric positive definite matrix with the same guard as [`spd_solve`].
pub fn spd_inverse(g: &DMatrix<f64>, limit: f64) -> Result<DMatrix<f64>, LinalgError> {
    let n = g.nrows();
    spd_solve(g, &DMatrix::identity(n, n), limit)
}

/// Kronecker product.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

// 15-point Kronrod nodes and weights, 7-point Gauss weights
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F>(f: &F, a: f64, b: f64) -> (DMatrix<f64>, f64)
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron_sum = &fc * WGK[7];
    let mut gauss_sum = &fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let f1 = f(c - x);
        let f2 = f(c + x);
        let pair = &f1 + &f2;
        kron_sum += &pair * WGK[j];
        if j % 2 == 1 {
            gauss_sum += &pair * WG[j / 2];
        }
    }
    let kron_sum = kron_sum * h;
    let gauss_sum = gauss_sum * h;
    let err = (&kron_sum - &gauss_sum).amax();
    (kron_sum, err)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature of a matrix-valued integrand.
pub fn integrate_matrix<F>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> DMatrix<f64>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let (first, err) = gk15(&f, a, b);
    let mut intervals = vec![(a, b, first, err)];
    for _ in 0..2000 {
        let total: DMatrix<f64> = intervals
            .iter()
            .fold(DMatrix::zeros(intervals[0].2.nrows(), intervals[0].2.ncols()), |acc, iv| acc + &iv.2);
        let total_err: f64 = intervals.iter().map(|iv| iv.3).sum();
        if total_err <= abs_tol.max(rel_tol * total.amax()) {
            return total;
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, iv)| if iv.3 > best.1 { (i, iv.3) } else { best });
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (l, le) = gk15(&f, lo, mid);
        let (r, re) = gk15(&f, mid, hi);
        intervals.push((lo, mid, l, le));
        intervals.push((mid, hi, r, re));
    }
    intervals
        .iter()
        .fold(DMatrix::zeros(intervals[0].2.nrows(), intervals[0].2.ncols()), |acc, iv| acc + &iv.2)
}

/// Adaptive Gauss–Kronrod quadrature of a scalar integrand.
pub fn integrate<F>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    integrate_matrix(|x| DMatrix::from_element(1, 1, f(x)), a, b, abs_tol, rel_tol)[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_triangular() {
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let e = real_eigen(&t).unwrap();
        assert!((e.values[0] - 2.0).abs() < 1e-12 && (e.values[1] - 3.0).abs() < 1e-12);
        assert!(e.residual < 1e-12);
    }

    #[test]
    fn jordan_block_rejected() {
        let t = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(real_eigen(&t), Err(LinalgError::NonDiagonalizable(_))));
    }

    #[test]
    fn rotation_has_complex_spectrum() {
        let t = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(matches!(real_eigen(&t), Err(LinalgError::ComplexSpectrum(_))));
    }

    #[test]
    fn log_inverts_exp() {
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 0.1, 0.7, 0.2, -0.4, 0.05, 0.3, -0.6]);
        let back = logm(&expm(&a)).unwrap();
        assert!((back - a).amax() < 1e-12);
    }

    #[test]
    fn log_of_large_spread() {
        let a = DMatrix::from_row_slice(2, 2, &[50.0, 3.0, 0.0, 0.02]);
        let l = logm(&a).unwrap();
        assert!((expm(&l) - a).amax() < 1e-10);
    }

    #[test]
    fn log_domain_error() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0]);
        assert!(matches!(logm(&a), Err(LinalgError::LogDomain { .. })));
    }

    #[test]
    fn exp_integral_matches_quadrature() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.3, 0.2, 1.1]);
        let closed = exp_integral_matrix(&a, 0.7);
        let quad = integrate_matrix(|v| expm(&(&a * v)), 0.0, 0.7, 1e-15, 1e-14);
        assert!((closed - quad).amax() < 1e-13);
        let s = integrate(|u| (-2.0 * u).exp(), 0.0, 0.3, 1e-16, 1e-15);
        assert!((exp_integral(2.0, 0.3) - s).abs() < 1e-15);
    }

    #[test]
    fn nested_integral_matches_quadrature() {
        let th = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, -0.1, 0.8]);
        let b = 0.7;
        let h = 0.4;
        let closed = nested_exp_integral(&th, b, h);
        let quad = integrate_matrix(|s| expm(&(-&th * (h - s))) * exp_integral(b, s), 0.0, h, 1e-16, 1e-14);
        assert!((closed - quad).amax() < 1e-14);
    }

    #[test]
    fn spd_solve_and_guard() {
        let g = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let x = spd_solve(&g, &DMatrix::from_column_slice(2, 1, &[1.0, 2.0]), COND_LIMIT).unwrap();
        assert!(((&g * &x) - DMatrix::from_column_slice(2, 1, &[1.0, 2.0])).amax() < 1e-14);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_solve(&s, &DMatrix::identity(2, 2), COND_LIMIT).is_err());
    }
}
