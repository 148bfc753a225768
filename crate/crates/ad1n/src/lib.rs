//! Simulation, conditional least squares estimation and limit theory for the
//! affine diffusion `AD(1, n)`:
//!
//! ```text
//! dY_t = (a - b Y_t) dt + ρ11 √Y_t dB¹_t
//! dX_t = (m - κ Y_t - θ X_t) dt + √Y_t ρ̃ dB_t
//! ```
//!
//! with `Y` a CIR process, `X` an n-dimensional component, `ρ` a lower
//! triangular `(n+1)×(n+1)` matrix and `ρ̃` its last `n` rows.
//!
//! Modules, roughly in dependency order:
//!
//! * [`model_core`] parameters, validation, regime classification and the
//!   stacked parameter vector `τ`;
//! * [`sde_sim`] exact CIR transitions with a coupled X scheme;
//! * [`clse`] the continuous, discrete and exact-discretization estimators;
//! * [`moments`] mixed moments, the sandwich covariance and the stationary
//!   characteristic function;
//! * [`asymptotics`] normalizers and limit objects for the critical and
//!   supercritical regimes;
//! * [`mc_harness`] reproducible Monte Carlo experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod clse;
pub mod linalg;
pub mod mc_harness;
pub mod model_core;
pub mod moments;
pub mod sde_sim;
pub mod stats;

#[cfg(doctest)]
pub mod guide;
