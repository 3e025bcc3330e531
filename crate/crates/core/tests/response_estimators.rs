//! Response estimators against closed forms and against each other.

use fdtlab::integrator::{SchemeConfig, StationaryConfig};
use fdtlab::observable::Observable;
use fdtlab::poly_system::{Monomial, ParamDirection, PolySystem};
use fdtlab::presets;
use fdtlab::response::{
    compare_estimates, finite_difference_oracle, green_kubo_response, ou_mean_response, tangent_response,
    CurrentMode, CurrentSpec, FdConfig, Potential, ResponseConfig, ResponseEstimate,
};
use fdtlab::Error;
use nalgebra::DMatrix;

fn scheme() -> SchemeConfig {
    SchemeConfig::with_dt(2e-3)
}

fn cfg(n_paths: usize, horizon: f64, seed: u64) -> ResponseConfig {
    ResponseConfig {
        n_paths,
        horizon,
        record_every: 0.05,
        n_batches: 20,
        stationary: StationaryConfig {
            burn_in: 4.0,
            thinning: 0.5,
            n_streams: 1000,
            x0: None,
        },
        master_seed: seed,
        ..Default::default()
    }
}

fn fd_cfg(delta_a: f64, crn: bool) -> FdConfig {
    FdConfig {
        delta_a: Some(delta_a),
        crn,
        relax: 3.0,
        average_window: 2.0,
        richardson: false,
        ..Default::default()
    }
}

fn within(e: &ResponseEstimate, reference: f64, k: f64) -> bool {
    (e.value - reference).abs() <= k * e.stderr
}

fn agree(a: &ResponseEstimate, b: &ResponseEstimate) -> bool {
    (a.value - b.value).abs() <= 3.0 * a.stderr.hypot(b.stderr)
}

fn x1() -> Observable {
    Observable::Coordinate { index: 0 }
}

fn linear_coefficient(sys: &PolySystem) -> ParamDirection {
    ParamDirection::drift(sys, &[Monomial { out: 0, vars: vec![0], coef: 1.0 }]).unwrap()
}

#[test]
fn ou_forcing_tangent_is_inverse_rate() {
    let sys = presets::scalar_ou(2.0, 1.0);
    let dir = ParamDirection::forcing(&sys, &[1.0]).unwrap();
    let curve = tangent_response(&sys, &dir, &x1(), &cfg(10_000, 5.0, 1), &scheme()).unwrap();
    assert!(curve.plateau.detected);
    let e = curve.estimate();
    assert!(within(&e, 0.5, 3.0), "{} ± {}", e.value, e.stderr);
    assert!(e.stderr > 0.0 && e.stderr < 0.02);
    assert!(curve.times.windows(2).all(|w| w[1] > w[0]));
    assert!(curve.stderr.iter().all(|s| *s >= 0.0));
}

#[test]
fn ou_noise_amplitude_response_of_second_moment() {
    // d(σ²/2γ)/dσ = σ/γ = 1
    let sys = presets::scalar_ou(1.0, 1.0);
    let dir = ParamDirection::noise(&sys, DMatrix::from_element(1, 1, 1.0)).unwrap();
    let curve = tangent_response(&sys, &dir, &Observable::NormSquared, &cfg(20_000, 5.0, 2), &scheme()).unwrap();
    let e = curve.estimate();
    assert!(within(&e, 1.0, 3.0), "{} ± {}", e.value, e.stderr);
}

#[test]
fn forcing_an_unseen_coordinate_has_no_response() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
    let sys = presets::ou(&a, DMatrix::identity(2, 2)).unwrap();
    let dir = ParamDirection::forcing(&sys, &[0.0, 1.0]).unwrap();
    let e = tangent_response(&sys, &dir, &x1(), &cfg(2_000, 2.0, 3), &scheme()).unwrap().estimate();
    assert!(e.value.abs() <= 3.0 * e.stderr, "{} ± {}", e.value, e.stderr);
}

#[test]
fn doubling_the_direction_doubles_the_response() {
    let sys = presets::scalar_cubic(1.0);
    let dir = linear_coefficient(&sys);
    let c = cfg(5_000, 3.0, 4);
    let one = tangent_response(&sys, &dir, &Observable::NormSquared, &c, &scheme()).unwrap().estimate();
    let two = tangent_response(&sys, &dir.scaled(2.0).unwrap(), &Observable::NormSquared, &c, &scheme())
        .unwrap()
        .estimate();
    let half = ResponseEstimate {
        value: 0.5 * two.value,
        stderr: 0.5 * two.stderr,
        ..two.clone()
    };
    assert!(agree(&one, &half), "{} vs {}", one.value, two.value);
}

#[test]
fn ou_plateau_does_not_depend_on_the_window() {
    let gamma = 2.0;
    let sys = presets::scalar_ou(gamma, 1.0);
    let dir = ParamDirection::forcing(&sys, &[1.0]).unwrap();
    let curve = tangent_response(&sys, &dir, &x1(), &cfg(10_000, 8.0 / gamma, 5), &scheme()).unwrap();
    let early = curve.plateau_over(2.0 / gamma, 4.0 / gamma, 0.01);
    let late = curve.plateau_over(4.0 / gamma, 8.0 / gamma, 0.01);
    assert!(
        (early.value - late.value).abs() <= 3.0 * early.stderr.hypot(late.stderr),
        "{} vs {}",
        early.value,
        late.value
    );
}

#[test]
fn green_kubo_on_ou() {
    let gamma = 2.0;
    let sys = presets::scalar_ou(gamma, 1.0);
    let dir = ParamDirection::forcing(&sys, &[1.0]).unwrap();
    let exact = CurrentSpec {
        mode: CurrentMode::ExactH {
            potential: Potential::Quadratic {
                mean: vec![0.0],
                precision: vec![2.0 * gamma],
            },
        },
    };
    let qg = CurrentSpec { mode: CurrentMode::QuasiGaussian };
    let c = cfg(20_000, 3.0, 6);
    let e_exact = green_kubo_response(&sys, &dir, &x1(), &exact, &c, &scheme()).unwrap().estimate();
    let e_qg = green_kubo_response(&sys, &dir, &x1(), &qg, &c, &scheme()).unwrap().estimate();
    assert!(within(&e_exact, 0.5, 3.0), "{} ± {}", e_exact.value, e_exact.stderr);
    assert!(agree(&e_exact, &e_qg), "{} vs {}", e_exact.value, e_qg.value);

    let flat = green_kubo_response(&sys, &dir, &Observable::Constant { value: 3.0 }, &exact, &c, &scheme())
        .unwrap();
    assert!(flat.values.iter().all(|v| *v == 0.0));
    assert_eq!(flat.plateau.stderr, 0.0);
}

#[test]
fn green_kubo_gradient_potential_matches_quadratic() {
    let sys = presets::scalar_ou(2.0, 1.0);
    let dir = ParamDirection::forcing(&sys, &[1.0]).unwrap();
    let c = cfg(5_000, 3.0, 7);
    let grad = CurrentSpec {
        mode: CurrentMode::ExactH { potential: Potential::Gradient },
    };
    let quad = CurrentSpec {
        mode: CurrentMode::ExactH {
            potential: Potential::Quadratic { mean: vec![0.0], precision: vec![4.0] },
        },
    };
    let a = green_kubo_response(&sys, &dir, &x1(), &grad, &c, &scheme()).unwrap();
    let b = green_kubo_response(&sys, &dir, &x1(), &quad, &c, &scheme()).unwrap();
    for (u, v) in a.values.iter().zip(&b.values) {
        assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
    }
}

#[test]
fn green_kubo_refuses_noise_perturbations_and_non_gradient_drift() {
    let sys = presets::scalar_ou(1.0, 1.0);
    let dir = ParamDirection::noise(&sys, DMatrix::from_element(1, 1, 1.0)).unwrap();
    let qg = CurrentSpec { mode: CurrentMode::QuasiGaussian };
    let r = green_kubo_response(&sys, &dir, &x1(), &qg, &cfg(100, 1.0, 0), &scheme());
    assert!(matches!(r, Err(Error::Unsupported(_))));

    let triad = presets::triad(&Default::default()).unwrap();
    let dir = ParamDirection::forcing(&triad, &[1.0, 0.0, 0.0]).unwrap();
    let grad = CurrentSpec {
        mode: CurrentMode::ExactH { potential: Potential::Gradient },
    };
    let r = green_kubo_response(&triad, &dir, &x1(), &grad, &cfg(100, 1.0, 0), &scheme());
    assert!(matches!(r, Err(Error::Config { .. })));
}

#[test]
fn quasi_gaussian_matches_linear_solve_for_multivariate_ou() {
    let a = presets::random_stable_matrix(3, 11);
    let sys = presets::ou(&a, DMatrix::identity(3, 3)).unwrap();
    let reference = ou_mean_response(&a).unwrap();
    let dir = ParamDirection::forcing(&sys, &[0.0, 1.0, 0.0]).unwrap();
    let qg = CurrentSpec { mode: CurrentMode::QuasiGaussian };
    let c = cfg(20_000, 6.0, 8);
    for i in 0..3 {
        let phi = Observable::Coordinate { index: i };
        let e = green_kubo_response(&sys, &dir, &phi, &qg, &c, &scheme()).unwrap().estimate();
        assert!(within(&e, reference[(i, 1)], 3.0), "x{i}: {} ± {} vs {}", e.value, e.stderr, reference[(i, 1)]);
    }
}

#[test]
fn finite_difference_guards_and_ou_linearity() {
    let sys = presets::scalar_ou(2.0, 1.0);
    let dir = ParamDirection::forcing(&sys, &[1.0]).unwrap();
    let c = cfg(10_000, 1.0, 9);
    let r = finite_difference_oracle(&sys, &dir, &x1(), &fd_cfg(0.0, true), &c, &scheme());
    assert!(matches!(r, Err(Error::Config { .. })));

    let e = finite_difference_oracle(&sys, &dir, &x1(), &fd_cfg(0.1, true), &c, &scheme()).unwrap().estimate;
    assert!(within(&e, 0.5, 3.0), "{} ± {}", e.value, e.stderr);
    assert_eq!(e.provenance.delta_a, Some(0.1));
    assert_eq!(e.provenance.crn, Some(true));
}

#[test]
fn common_random_numbers_reduce_the_error() {
    let c = cfg(4_000, 1.0, 10);
    let ou = presets::scalar_ou(2.0, 1.0);
    let cubic = presets::scalar_cubic(1.0);
    let triad = presets::triad(&Default::default()).unwrap();
    let cases = [
        (&ou, ParamDirection::forcing(&ou, &[1.0]).unwrap(), x1()),
        (&cubic, linear_coefficient(&cubic), Observable::NormSquared),
        (&triad, ParamDirection::forcing(&triad, &[1.0, 0.0, 0.0]).unwrap(), x1()),
    ];
    for (sys, dir, phi) in cases {
        let with = finite_difference_oracle(sys, &dir, &phi, &fd_cfg(0.1, true), &c, &scheme()).unwrap();
        let without = finite_difference_oracle(sys, &dir, &phi, &fd_cfg(0.1, false), &c, &scheme()).unwrap();
        assert!(
            with.estimate.stderr < without.estimate.stderr,
            "{} vs {}",
            with.estimate.stderr,
            without.estimate.stderr
        );
    }
}

#[test]
fn cubic_finite_difference_agrees_with_tangent() {
    let sys = presets::scalar_cubic(1.0);
    let dir = linear_coefficient(&sys);
    let phi = Observable::NormSquared;
    let c = cfg(20_000, 4.0, 12);
    let tangent = tangent_response(&sys, &dir, &phi, &c, &scheme()).unwrap().estimate();
    let fd = finite_difference_oracle(&sys, &dir, &phi, &fd_cfg(0.1, true), &c, &scheme()).unwrap().estimate;
    assert!(agree(&tangent, &fd), "{} ± {} vs {} ± {}", tangent.value, tangent.stderr, fd.value, fd.stderr);
    assert!(compare_estimates(&[tangent, fd]).unwrap().consensus);
}

#[test]
fn oversized_step_is_named_as_the_outlier() {
    let sys = presets::scalar_cubic(1.0);
    let dir = linear_coefficient(&sys);
    let phi = Observable::NormSquared;
    let c = cfg(5_000, 4.0, 13);
    let tangent = tangent_response(&sys, &dir, &phi, &c, &scheme()).unwrap().estimate();
    let grad = CurrentSpec {
        mode: CurrentMode::ExactH { potential: Potential::Gradient },
    };
    let gk = green_kubo_response(&sys, &dir, &phi, &grad, &c, &scheme()).unwrap().estimate();
    let bad = ResponseConfig { master_seed: 999, ..c.clone() };
    let fd = finite_difference_oracle(&sys, &dir, &phi, &fd_cfg(10.0, true), &bad, &scheme()).unwrap().estimate;
    let report = compare_estimates(&[tangent, gk, fd]).unwrap();
    assert!(!report.consensus);
    assert_eq!(report.outlier, Some(2));
    assert_eq!(report.outlier_method.as_deref(), Some("finite-difference"));
}
