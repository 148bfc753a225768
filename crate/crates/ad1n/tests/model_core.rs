mod common;

use ad1n::model_core::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn drift(n: usize, b: f64, theta: DMatrix<f64>) -> Drift {
    Drift::new(1.0, b, DVector::from_element(n, 0.5), DVector::from_element(n, 0.2), theta).unwrap()
}

#[test]
fn validation_messages() {
    let p = common::reference_params();
    assert!(validate(&p).is_ok());

    let d = Drift::new(
        2.0,
        1.0,
        DVector::from_element(1, 0.5),
        DVector::from_element(1, 0.2),
        DMatrix::from_element(1, 1, 2.0),
    )
    .unwrap();
    let ok = ModelParams::new(d.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.95])).unwrap();
    assert!(validate(&ok).violations.is_empty());

    let zero_diag = ModelParams::new(d, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.0])).unwrap();
    assert!(validate(&zero_diag).violations.contains(&"rho diagonal must be positive".to_string()));

    let jordan = drift(2, 1.0, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
    let p = ModelParams::new(jordan, DMatrix::identity(3, 3)).unwrap();
    assert!(validate(&p).violations.contains(&"theta not diagonalizable".to_string()));
}

#[test]
fn regimes() {
    let c = classify_drift(&drift(2, 1.0, DMatrix::identity(2, 2))).unwrap();
    assert_eq!(c.regime, Regime::Subcritical);
    let c = classify_drift(&drift(2, 0.0, DMatrix::zeros(2, 2))).unwrap();
    assert_eq!(c.regime, Regime::Critical);
    let c = classify_drift(&drift(2, -0.5, DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])))).unwrap();
    assert_eq!(c.regime, Regime::Supercritical);
}

#[test]
fn mixed_sign_theta_is_unsupported() {
    let c = classify_drift(&drift(2, 1.0, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])))).unwrap();
    assert_eq!(c.regime, Regime::Unsupported);
}

#[test]
fn flat_stack_for_n1() {
    let d = Drift::new(
        2.0,
        1.0,
        DVector::from_element(1, 0.5),
        DVector::from_element(1, 0.2),
        DMatrix::from_element(1, 1, 3.0),
    )
    .unwrap();
    assert_eq!(stack_tau(&d).as_slice(), &[2.0, 1.0, 0.5, 0.2, 3.0]);
}

#[test]
fn hand_enumerated_order_n2() {
    // (a, b, m1, κ1, θ11, θ12, m2, κ2, θ21, θ22)
    let theta = DMatrix::from_row_slice(2, 2, &[11.0, 12.0, 21.0, 22.0]);
    let d = Drift::new(1.0, 2.0, DVector::from_vec(vec![3.0, 4.0]), DVector::from_vec(vec![5.0, 6.0]), theta).unwrap();
    let tau = stack_tau(&d);
    assert_eq!(tau.as_slice(), &[1.0, 2.0, 3.0, 5.0, 11.0, 12.0, 4.0, 6.0, 21.0, 22.0]);
    assert_eq!(theta_index(2, 2, 1), 8);
    assert_eq!(tau.as_slice()[theta_index(2, 2, 1)], 21.0);
    assert_eq!(tau_labels(2)[8], "theta2_1");
}

#[test]
fn design_matrix_n1() {
    let d = Drift::new(
        2.0,
        1.0,
        DVector::from_element(1, 0.5),
        DVector::from_element(1, 0.2),
        DMatrix::from_element(1, 1, 3.0),
    )
    .unwrap();
    let (y, x) = (0.7, -1.3);
    let v = drift_design(y, &DVector::from_element(1, x)) * &stack_tau(&d).0;
    assert!((v[0] - (2.0 - 1.0 * y)).abs() < 1e-15);
    assert!((v[1] - (0.5 - 0.2 * y - 3.0 * x)).abs() < 1e-15);
    let zero = drift_design(0.0, &DVector::zeros(1)) * &stack_tau(&d).0;
    assert_eq!(zero.as_slice(), &[2.0, 0.5]);
}

fn arb_drift(n: usize) -> impl Strategy<Value = Drift> {
    (
        0.0..5.0f64,
        -2.0..2.0f64,
        prop::collection::vec(-3.0..3.0f64, n),
        prop::collection::vec(-3.0..3.0f64, n),
        prop::collection::vec(-3.0..3.0f64, n * n),
    )
        .prop_map(move |(a, b, m, k, t)| Drift::new(a, b, DVector::from_vec(m), DVector::from_vec(k), DMatrix::from_row_slice(n, n, &t)).unwrap())
}

proptest! {
    #[test]
    fn stack_round_trip(d in arb_drift(3)) {
        let back = unstack_tau(stack_tau(&d).as_slice(), 3).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn design_matches_direct_drift(d in arb_drift(2), y in 0.0..5.0f64, x in prop::collection::vec(-3.0..3.0f64, 2)) {
        let x = DVector::from_vec(x);
        let via_design = drift_design(y, &x) * &stack_tau(&d).0;
        let direct = d.eval(y, &x);
        prop_assert!((&via_design - &direct).amax() <= 1e-14 * (1.0 + direct.amax()));
    }

    #[test]
    fn tau_length_inverts(n in 1usize..8) {
        prop_assert_eq!(n_from_tau_len(tau_len(n)), Some(n));
    }
}
