//! Independent closed forms for low-order moments, used as oracles.

use ad1n::linalg::integrate;
use ad1n::model_core::ModelParams;
use ad1n::moments::TildeFrame;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn e1(n: usize, k: u32, l: &[(usize, u32)]) -> Vec<u32> {
    let mut v = vec![0; n + 1];
    v[0] = k;
    for &(i, p) in l {
        v[1 + i] += p;
    }
    v
}

/// Closed forms for the stationary moments of order ≤ 3, written out term by
/// term from Itô's formula in modal coordinates.
pub struct Closed {
    pub f: TildeFrame,
}

impl Closed {
    pub fn s2(&self, i: usize) -> f64 {
        self.f.rho.row(i).norm_squared()
    }
    pub fn rr(&self, i: usize, j: usize) -> f64 {
        self.f.rho.row(i).dot(&self.f.rho.row(j))
    }
    pub fn ey(&self) -> f64 {
        self.f.a / self.f.b
    }
    pub fn ey2(&self) -> f64 {
        let (a, b, s) = (self.f.a, self.f.b, self.f.sigma1 * self.f.sigma1);
        a * (2.0 * a + s) / (2.0 * b * b)
    }
    pub fn ey3(&self) -> f64 {
        let (a, b, s) = (self.f.a, self.f.b, self.f.sigma1 * self.f.sigma1);
        a * (a + s) * (2.0 * a + s) / (2.0 * b * b * b)
    }
    pub fn ex(&self, i: usize) -> f64 {
        (self.f.b * self.f.m[i] - self.f.a * self.f.kappa[i]) / (self.f.b * self.f.lambda[i])
    }
    pub fn eyx(&self, i: usize) -> f64 {
        let f = &self.f;
        (f.a * self.ex(i) + (f.m[i] + f.sigma1 * f.rho[(i, 0)]) * self.ey() - f.kappa[i] * self.ey2()) / (f.b + f.lambda[i])
    }
    pub fn ey2x(&self, i: usize) -> f64 {
        let f = &self.f;
        let s = f.sigma1 * f.sigma1;
        ((2.0 * f.a + s) * self.eyx(i) + (f.m[i] + 2.0 * f.sigma1 * f.rho[(i, 0)]) * self.ey2() - f.kappa[i] * self.ey3()) / (2.0 * f.b + f.lambda[i])
    }
    pub fn exx(&self, i: usize, j: usize) -> f64 {
        let f = &self.f;
        if i == j {
            return (2.0 * f.m[i] * self.ex(i) - 2.0 * f.kappa[i] * self.eyx(i) + self.s2(i) * self.ey()) / (2.0 * f.lambda[i]);
        }
        (f.m[i] * self.ex(j) + f.m[j] * self.ex(i) - f.kappa[i] * self.eyx(j) - f.kappa[j] * self.eyx(i) + self.rr(i, j) * self.ey())
            / (f.lambda[i] + f.lambda[j])
    }
    pub fn eyxx(&self, i: usize, j: usize) -> f64 {
        let f = &self.f;
        let c = |p: usize| f.m[p] + f.sigma1 * f.rho[(p, 0)];
        if i == j {
            return (f.a * self.exx(i, i) + 2.0 * c(i) * self.eyx(i) - 2.0 * f.kappa[i] * self.ey2x(i) + self.s2(i) * self.ey2())
                / (f.b + 2.0 * f.lambda[i]);
        }
        (f.a * self.exx(i, j) + c(i) * self.eyx(j) + c(j) * self.eyx(i) - f.kappa[i] * self.ey2x(j) - f.kappa[j] * self.ey2x(i)
            + self.rr(i, j) * self.ey2())
            / (f.b + f.lambda[i] + f.lambda[j])
    }
}

pub fn random_points() -> Vec<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..5).map(|_| super::random_subcritical(&mut rng, 2)).collect()
}

const TOL_ABS: f64 = 1e-14;
const TOL_REL: f64 = 1e-13;

/// Transient moments from their integral representations, by nested
/// adaptive quadrature, for a point-mass start.
pub struct Transient<'a> {
    pub f: &'a TildeFrame,
    pub y0: f64,
    pub z0: DVector<f64>,
}

impl Transient<'_> {
    fn conv(&self, rate: f64, t: f64, g: impl Fn(f64) -> f64) -> f64 {
        integrate(|u| (-rate * (t - u)).exp() * g(u), 0.0, t, TOL_ABS, TOL_REL)
    }
    pub fn ey(&self, t: f64) -> f64 {
        let b = self.f.b;
        (-b * t).exp() * self.y0 + self.f.a * (1.0 - (-b * t).exp()) / b
    }
    pub fn ey2(&self, t: f64) -> f64 {
        let (a, b, s) = (self.f.a, self.f.b, self.f.sigma1.powi(2));
        (-2.0 * b * t).exp() * self.y0.powi(2) + (2.0 * a + s) * self.conv(2.0 * b, t, |u| self.ey(u))
    }
    pub fn ey3(&self, t: f64) -> f64 {
        let (a, b, s) = (self.f.a, self.f.b, self.f.sigma1.powi(2));
        (-3.0 * b * t).exp() * self.y0.powi(3) + 3.0 * (a + s) * self.conv(3.0 * b, t, |u| self.ey2(u))
    }
    pub fn ex(&self, i: usize, t: f64) -> f64 {
        let l = self.f.lambda[i];
        (-l * t).exp() * self.z0[i] + self.conv(l, t, |u| self.f.m[i] - self.f.kappa[i] * self.ey(u))
    }
    pub fn eyx(&self, i: usize, t: f64) -> f64 {
        let f = self.f;
        let r = f.b + f.lambda[i];
        (-r * t).exp() * self.y0 * self.z0[i]
            + self.conv(r, t, |u| {
                f.a * self.ex(i, u) + (f.m[i] + f.sigma1 * f.rho[(i, 0)]) * self.ey(u) - f.kappa[i] * self.ey2(u)
            })
    }
    pub fn ey2x(&self, i: usize, t: f64) -> f64 {
        let f = self.f;
        let s = f.sigma1.powi(2);
        let r = 2.0 * f.b + f.lambda[i];
        (-r * t).exp() * self.y0.powi(2) * self.z0[i]
            + self.conv(r, t, |u| {
                (2.0 * f.a + s) * self.eyx(i, u) + (f.m[i] + 2.0 * f.sigma1 * f.rho[(i, 0)]) * self.ey2(u) - f.kappa[i] * self.ey3(u)
            })
    }
    pub fn exx(&self, i: usize, j: usize, t: f64) -> f64 {
        let f = self.f;
        let r = f.lambda[i] + f.lambda[j];
        let cov = f.rho.row(i).dot(&f.rho.row(j));
        (-r * t).exp() * self.z0[i] * self.z0[j]
            + self.conv(r, t, |u| {
                f.m[i] * self.ex(j, u) - f.kappa[i] * self.eyx(j, u) + f.m[j] * self.ex(i, u) - f.kappa[j] * self.eyx(i, u) + cov * self.ey(u)
            })
    }
}

fn scaled_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Worst scaled error of the stationary table against the closed forms of
/// order ≤ 3 at an n = 2 point.
pub fn stationary_closed_form_error(p: &ModelParams) -> f64 {
    let c = Closed {
        f: TildeFrame::new(p).unwrap(),
    };
    let t = ad1n::moments::stationary_table(p, 3).unwrap();
    let mut pairs = vec![
        (e1(2, 0, &[]), 1.0),
        (e1(2, 1, &[]), c.ey()),
        (e1(2, 2, &[]), c.ey2()),
        (e1(2, 3, &[]), c.ey3()),
    ];
    for i in 0..2 {
        pairs.push((e1(2, 0, &[(i, 1)]), c.ex(i)));
        pairs.push((e1(2, 1, &[(i, 1)]), c.eyx(i)));
        pairs.push((e1(2, 2, &[(i, 1)]), c.ey2x(i)));
        pairs.push((e1(2, 0, &[(i, 2)]), c.exx(i, i)));
        pairs.push((e1(2, 1, &[(i, 2)]), c.eyxx(i, i)));
    }
    pairs.push((e1(2, 0, &[(0, 1), (1, 1)]), c.exx(0, 1)));
    pairs.push((e1(2, 1, &[(0, 1), (1, 1)]), c.eyxx(0, 1)));
    pairs.iter().map(|(idx, v)| scaled_err(t.get(idx).unwrap(), *v)).fold(0.0, f64::max)
}

/// Worst scaled error of the transient table at time `t` from a point mass
/// at `(y0, z0)` (modal coordinates) against nested quadrature.
pub fn transient_closed_form_error(p: &ModelParams, y0: f64, z0: DVector<f64>, t: f64) -> f64 {
    let frame = TildeFrame::new(p).unwrap();
    let init = ad1n::moments::MomentTable::point_mass(y0, &z0, 3);
    let table = ad1n::moments::transient_table(p, &init, t, 3).unwrap();
    let q = Transient { f: &frame, y0, z0 };
    let mut pairs = vec![(e1(2, 1, &[]), q.ey(t)), (e1(2, 2, &[]), q.ey2(t)), (e1(2, 3, &[]), q.ey3(t))];
    for i in 0..2 {
        pairs.push((e1(2, 0, &[(i, 1)]), q.ex(i, t)));
        pairs.push((e1(2, 1, &[(i, 1)]), q.eyx(i, t)));
        pairs.push((e1(2, 2, &[(i, 1)]), q.ey2x(i, t)));
        pairs.push((e1(2, 0, &[(i, 2)]), q.exx(i, i, t)));
    }
    pairs.push((e1(2, 0, &[(0, 1), (1, 1)]), q.exx(0, 1, t)));
    pairs.iter().map(|(idx, v)| scaled_err(table.get(idx).unwrap(), *v)).fold(0.0, f64::max)
}
