//! Finite-state response formula against an independent fundamental-matrix
//! oracle, finite differences and its own structural properties.

use fdtlab::markov_testbed::{
    exact_derivative, finite_difference, gap_and_lipschitz_report, linear_response_formula, stationary,
    ChainFamily, ChainWeights,
};
use fdtlab::rng::{RngStream, StreamCursor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `dπᵀ = πᵀ dP Z` with the fundamental matrix `Z = (I − P + 1πᵀ)⁻¹`, and
/// `π` from the power method.
fn fundamental_oracle(fam: &ChainFamily, phi: &[f64]) -> f64 {
    let p = fam.p0();
    let s = p.nrows();
    let mut pi = DVector::from_element(s, 1.0 / s as f64);
    for _ in 0..10_000 {
        pi = p.transpose() * &pi;
    }
    let ones_pi = DMatrix::from_fn(s, s, |_, j| pi[j]);
    let z = (DMatrix::identity(s, s) - p + ones_pi).try_inverse().unwrap();
    let dpi = (pi.transpose() * fam.dp() * z).transpose();
    dpi.dot(&DVector::from_column_slice(phi))
}

fn random_phi(states: usize, seed: u64) -> Vec<f64> {
    let mut cur = StreamCursor::new(RngStream::new(seed ^ 0x9e37, 7));
    (0..states).map(|_| cur.next_normal()).collect()
}

#[test]
fn hundred_random_families_match_the_oracle() {
    for k in 0..100u64 {
        let states = 2 + (k as usize % 7);
        let fam = ChainFamily::random(states, 1000 + k).unwrap();
        let phi = random_phi(states, k);
        let exact = exact_derivative(&fam, &phi).unwrap();
        let oracle = fundamental_oracle(&fam, &phi);
        assert!((exact - oracle).abs() < 1e-9, "family {k}: {exact} vs {oracle}");
        let values: Vec<f64> = (1..=3).map(|m| linear_response_formula(&fam, &phi, m).unwrap()).collect();
        for v in &values {
            assert!((v - oracle).abs() < 1e-9, "family {k}: formula {v} vs {oracle}");
        }
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-9);
    }
}

#[test]
fn finite_differences_converge_at_second_order() {
    let fam = ChainFamily::random(5, 42).unwrap();
    let phi = random_phi(5, 42);
    let target = linear_response_formula(&fam, &phi, 1).unwrap();
    let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&h| (finite_difference(&fam, &phi, h).unwrap() - target).abs())
        .collect();
    let order = (errs[0] / errs[1]).log10();
    assert!((order - 2.0).abs() < 0.1, "observed order {order}, errors {errs:?}");
    // the smallest step sits at the round-off floor
    assert!(errs[2] < 1e-11);
}

#[test]
fn lipschitz_ratios_share_one_constant() {
    let fam = ChainFamily::random(5, 42).unwrap();
    let weights = ChainWeights::new(vec![1.0, 2.0, 1.5, 3.0, 1.2]).unwrap();
    let a_list = [1e-1, -1e-1, 1e-2, -1e-2, 1e-3, -1e-3];
    let rep = gap_and_lipschitz_report(&fam, &weights, &a_list).unwrap();
    assert_eq!(rep.lipschitz.len(), a_list.len());
    let smallest = rep.lipschitz.iter().map(|l| l.ratio).fold(f64::INFINITY, f64::min);
    assert!(rep.lipschitz_constant.is_finite() && rep.lipschitz_constant < 2.0 * smallest);
    assert!(rep.contraction_factor < 1.0);
    assert!(rep.slem < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn formula_is_independent_of_the_time_multiple(states in 2usize..=8, seed in any::<u64>(), m in 1usize..=4) {
        let fam = ChainFamily::random(states, seed).unwrap();
        let phi = random_phi(states, seed);
        let one = linear_response_formula(&fam, &phi, 1).unwrap();
        let many = linear_response_formula(&fam, &phi, m).unwrap();
        prop_assert!((one - many).abs() < 1e-9);
        prop_assert!((one - fundamental_oracle(&fam, &phi)).abs() < 1e-9);
    }

    #[test]
    fn shifting_the_observable_changes_nothing(states in 2usize..=8, seed in any::<u64>(), c in -100.0f64..100.0) {
        let fam = ChainFamily::random(states, seed).unwrap();
        let phi = random_phi(states, seed);
        let shifted: Vec<f64> = phi.iter().map(|v| v + c).collect();
        let f0 = linear_response_formula(&fam, &phi, 2).unwrap();
        let f1 = linear_response_formula(&fam, &shifted, 2).unwrap();
        let e0 = exact_derivative(&fam, &phi).unwrap();
        let e1 = exact_derivative(&fam, &shifted).unwrap();
        let scale = 1.0 + c.abs();
        prop_assert!((f0 - f1).abs() <= 1e-12 * scale);
        prop_assert!((e0 - e1).abs() <= 1e-12 * scale);
    }

    #[test]
    fn stationary_vector_is_a_distribution(states in 2usize..=8, seed in any::<u64>()) {
        let fam = ChainFamily::random(states, seed).unwrap();
        let pi = stationary(fam.p0()).unwrap();
        prop_assert!(pi.iter().all(|v| *v >= 0.0));
        prop_assert!((pi.sum() - 1.0).abs() < 1e-12);
        let residual = (fam.p0().transpose() * &pi - &pi).amax();
        prop_assert!(residual < 1e-12);
    }
}
