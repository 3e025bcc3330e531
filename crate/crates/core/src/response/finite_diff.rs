use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{
    lane_streams, par_indexed, sample_stationary, LaneState, LaneStepper, SchemeConfig, LANES,
};
use crate::observable::Observable;
use crate::poly_system::{
    apply_direction, coercivity_probe, CoercivityReport, ParamDirection, PolySystem,
    DEFAULT_PROBE_RADII,
};
use crate::rng::{derive_seed, purpose, RngStream};
use crate::stats::batch_means;

use super::{
    group_starts, response_seed, stationary_starts, Method, Provenance, ResponseConfig, ResponseEstimate,
    Target,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdConfig {
    /// Half-width of the central difference; `0.1 / scale(direction)` when
    /// absent.
    pub delta_a: Option<f64>,
    /// Common random numbers between the two endpoints.
    pub crn: bool,
    /// Time each endpoint path runs before averaging starts.
    pub relax: f64,
    /// Length of the time average of `φ` per path.
    pub average_window: f64,
    pub sample_every: f64,
    /// Repeat at `Δa/2` and flag curvature.
    pub richardson: bool,
    pub coercivity_tol: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            delta_a: None,
            crn: true,
            relax: 5.0,
            average_window: 5.0,
            sample_every: 0.05,
            richardson: true,
            coercivity_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEstimate {
    pub estimate: ResponseEstimate,
    pub half_step: Option<ResponseEstimate>,
    /// `(4 R(Δa/2) − R(Δa)) / 3`
    pub richardson_extrapolated: Option<f64>,
    /// The two step sizes disagree by more than 3 combined standard errors.
    pub nonlinearity_flag: bool,
    pub endpoint_checks: Vec<CoercivityReport>,
}

/// Per-path time averages of `φ` over the two halves of
/// `[relax, relax + window]` for a group of paths.
#[allow(clippy::too_many_arguments)]
fn time_average(
    sys: &PolySystem,
    starts: &[&[f64]],
    phi: &Observable,
    scheme: &SchemeConfig,
    streams: &[RngStream; LANES],
    relax_steps: u64,
    n_samples: u64,
    stride: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut stepper = LaneStepper::new(sys, None, scheme)?;
    let mut st = LaneState::new(starts, false);
    for _ in 0..relax_steps {
        stepper.step(&mut st, streams)?;
    }
    let half = n_samples / 2;
    let count = starts.len();
    let mut first = [0.0; LANES];
    let mut second = [0.0; LANES];
    let mut x = vec![0.0; sys.dim()];
    for k in 0..n_samples {
        for _ in 0..stride {
            stepper.step(&mut st, streams)?;
        }
        let acc = if k < half { &mut first } else { &mut second };
        for (l, a) in acc.iter_mut().enumerate().take(count) {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = st.x[i][l];
            }
            *a += phi.eval(&x);
        }
    }
    Ok((0..count)
        .map(|l| (first[l] / half as f64, second[l] / (n_samples - half) as f64))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn central_difference(
    sys: &PolySystem,
    dir: &ParamDirection,
    phi: &Observable,
    delta_a: f64,
    fd: &FdConfig,
    cfg: &ResponseConfig,
    scheme: &SchemeConfig,
    starts: &[Vec<f64>],
    starts_minus: &[Vec<f64>],
) -> Result<ResponseEstimate> {
    let plus = apply_direction(sys, dir, delta_a)?;
    let minus = apply_direction(sys, dir, -delta_a)?;
    let relax = scheme.steps_for(fd.relax);
    let stride = scheme.steps_for(fd.sample_every).max(1);
    let n_samples = (scheme.steps_for(fd.average_window) / stride).max(2);
    let seed_plus = response_seed(cfg.master_seed);
    let seed_minus = if fd.crn {
        seed_plus
    } else {
        derive_seed(cfg.master_seed, purpose::FD_MINUS_INDEPENDENT)
    };
    let n_groups = cfg.n_paths.div_ceil(LANES);
    let grouped = par_indexed(n_groups, |g| {
        let first = g * LANES;
        let count = (cfg.n_paths - first).min(LANES);
        let ap = time_average(
            &plus,
            &group_starts(starts, first, count),
            phi,
            scheme,
            &lane_streams(seed_plus, first, count),
            relax,
            n_samples,
            stride,
        )?;
        let am = time_average(
            &minus,
            &group_starts(starts_minus, first, count),
            phi,
            scheme,
            &lane_streams(seed_minus, first, count),
            relax,
            n_samples,
            stride,
        )?;
        let scale = 2.0 * delta_a;
        Ok(ap
            .iter()
            .zip(&am)
            .map(|(p, m)| {
                [
                    0.5 * (p.0 + p.1 - m.0 - m.1) / scale,
                    (p.1 - m.1 - p.0 + m.0) / scale,
                ]
            })
            .collect::<Vec<_>>())
    })?;
    let diffs: Vec<[f64; 2]> = grouped.into_iter().flatten().collect();
    let full: Vec<f64> = diffs.iter().map(|d| d[0]).collect();
    let (value, stat) = batch_means(&full, cfg.n_batches);
    // Residual relaxation shows up as a change between the two halves of
    // the window; it is carried as a systematic error.
    let change = diffs.iter().map(|d| d[1]).sum::<f64>() / diffs.len() as f64;
    let stderr = stat.hypot(change);
    Ok(ResponseEstimate {
        value,
        stderr,
        method: Method::FiniteDifference,
        target: Target::new(sys, dir, phi),
        provenance: Provenance {
            master_seed: cfg.master_seed,
            dt: scheme.dt,
            n_paths: cfg.n_paths,
            n_batches: cfg.n_batches,
            burn_in: cfg.stationary.burn_in,
            horizon: fd.relax + fd.average_window,
            delta_a: Some(delta_a),
            crn: Some(fd.crn),
        },
    })
}

/// Central difference `(⟨φ⟩_{+Δa} − ⟨φ⟩_{−Δa}) / 2Δa` of stationary averages.
///
/// Both endpoint systems are re-probed for coercivity first. Each path
/// starts from a stationary sample of the base system, relaxes under the
/// endpoint dynamics and then time-averages `φ`. With common random numbers
/// the two endpoints share starts and noise, and the standard error comes
/// from the paired differences.
pub fn finite_difference_oracle(
    sys: &PolySystem,
    dir: &ParamDirection,
    phi: &Observable,
    fd: &FdConfig,
    cfg: &ResponseConfig,
    scheme: &SchemeConfig,
) -> Result<FdEstimate> {
    cfg.validate()?;
    phi.check_dim(sys.dim())?;
    dir.check_compatible(sys)?;
    let delta_a = match fd.delta_a {
        Some(h) => h,
        None => 0.1 / dir.scale(),
    };
    if !(delta_a.is_finite() && delta_a > 0.0) {
        return Err(Error::config(
            "fd.delta_a",
            "finite-difference step must be positive and finite",
        ));
    }
    if !(fd.relax >= 0.0 && fd.average_window > 0.0 && fd.sample_every > 0.0) {
        return Err(Error::config("fd", "relax >= 0, average_window > 0, sample_every > 0"));
    }
    let mut endpoint_checks = Vec::new();
    for a in [-delta_a, delta_a] {
        let s = apply_direction(sys, dir, a)?;
        let rep = coercivity_probe(&s, 64, &DEFAULT_PROBE_RADII, fd.coercivity_tol)?;
        if !rep.pass {
            return Err(Error::AssumptionFailed(format!(
                "coercivity fails at a = {a}: top-degree radial part {}, c_hat {}",
                rep.top_degree_radial, rep.c_hat
            )));
        }
        endpoint_checks.push(rep);
    }
    let scheme = scheme.clone().state_only();
    let starts = stationary_starts(sys, cfg, &scheme)?;
    let starts_minus = if fd.crn {
        starts.clone()
    } else {
        sample_stationary(
            sys,
            &scheme,
            &cfg.stationary,
            cfg.n_paths,
            derive_seed(cfg.master_seed, purpose::STATIONARY_INDEPENDENT),
        )?
    };
    let run = |h: f64| {
        central_difference(
            sys,
            dir,
            phi,
            h,
            fd,
            cfg,
            &scheme,
            &starts.samples,
            &starts_minus.samples,
        )
    };
    let estimate = run(delta_a)?;
    let (half_step, extrapolated, flag) = if fd.richardson {
        let half = run(0.5 * delta_a)?;
        let combined = estimate.stderr.hypot(half.stderr);
        let flag = (estimate.value - half.value).abs() > 3.0 * combined;
        let extra = (4.0 * half.value - estimate.value) / 3.0;
        (Some(half), Some(extra), flag)
    } else {
        (None, None, false)
    };
    Ok(FdEstimate {
        estimate,
        half_step,
        richardson_extrapolated: extrapolated,
        nonlinearity_flag: flag,
        endpoint_checks,
    })
}
