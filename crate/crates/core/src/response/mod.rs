//! Stationary linear response `d⟨φ, μ_a⟩/da` at `a = 0`.
//!
//! Three estimators that share nothing beyond the integrator:
//!
//! * [`tangent_response`]: transient derivative `E[∇φ(x_t)·S_t]` from a
//!   stationary start, whose plateau in `t` is the stationary response;
//! * [`green_kubo_response`]: correlation integral of the conjugate current
//!   with the observable, for drift perturbations;
//! * [`finite_difference_oracle`]: central difference of stationary averages.
//!
//! Closed-form references for linear systems live in [`lyapunov`].

mod compare;
mod finite_diff;
mod green_kubo;
pub mod lyapunov;
mod tangent;

pub use compare::{compare_estimates, ComparisonReport};
pub use finite_diff::{finite_difference_oracle, FdConfig, FdEstimate};
pub use green_kubo::{green_kubo_response, CurrentMode, CurrentSpec, Potential};
pub use lyapunov::{ou_mean_response, stationary_covariance_reference};
pub use tangent::tangent_response;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::integrator::{sample_stationary, Ensemble, SchemeConfig, StationaryConfig, LANES};
use crate::observable::Observable;
use crate::poly_system::{ParamDirection, PolySystem};
use crate::rng::{derive_seed, purpose};
use crate::stats::{batch_ranges, batch_summary, linear_fit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tangent,
    GreenKubo,
    FiniteDifference,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Tangent => "tangent",
            Method::GreenKubo => "green-kubo",
            Method::FiniteDifference => "finite-difference",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    /// Start of the averaging window; half the horizon when absent.
    pub window_start: Option<f64>,
    /// End of the averaging window; the horizon when absent.
    pub window_end: Option<f64>,
    /// A window whose total drift is below this fraction of the plateau
    /// value counts as flat even when the drift is statistically resolved.
    pub relative_resolution: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            window_start: None,
            window_end: None,
            relative_resolution: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub value: f64,
    /// `sqrt(statistical² + drift²)`.
    pub stderr: f64,
    pub statistical_stderr: f64,
    /// Half the change of the fitted line across the window.
    pub drift_stderr: f64,
    pub window: (f64, f64),
    pub slope: f64,
    pub slope_stderr: f64,
    pub detected: bool,
}

/// Settings shared by the Monte Carlo estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponseConfig {
    pub n_paths: usize,
    pub horizon: f64,
    /// Spacing of the recorded time grid.
    pub record_every: f64,
    pub n_batches: usize,
    pub plateau: PlateauConfig,
    pub stationary: StationaryConfig,
    pub master_seed: u64,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            horizon: 10.0,
            record_every: 0.05,
            n_batches: 20,
            plateau: PlateauConfig::default(),
            stationary: StationaryConfig::default(),
            master_seed: 0,
        }
    }
}

impl ResponseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::config("response.n_paths", "need at least 2 paths"));
        }
        if !(self.horizon > 0.0) || !(self.record_every > 0.0) {
            return Err(Error::config(
                "response.horizon",
                "horizon and record_every must be positive",
            ));
        }
        if self.n_batches < 2 {
            return Err(Error::config("response.n_batches", "need at least 2 batches"));
        }
        Ok(())
    }
}

/// What an estimate refers to; estimates are only comparable when these
/// agree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub system: String,
    pub direction: String,
    pub observable: String,
}

impl Target {
    pub fn new(sys: &PolySystem, dir: &ParamDirection, phi: &Observable) -> Self {
        Self {
            system: fingerprint_system(sys),
            direction: fingerprint_direction(dir),
            observable: phi.name(),
        }
    }
}

fn hash_floats<'a>(label: &str, values: impl Iterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Short content hash of all coefficients.
pub fn fingerprint_system(sys: &PolySystem) -> String {
    let dims = [sys.dim() as f64, sys.degree() as f64, sys.noise_channels() as f64];
    hash_floats(
        "system",
        dims.iter()
            .chain(sys.maps().iter().flat_map(|m| m.coeffs().iter()))
            .chain(sys.sigma().iter()),
    )
}

pub fn fingerprint_direction(dir: &ParamDirection) -> String {
    hash_floats(
        "direction",
        dir.delta_maps()
            .iter()
            .flat_map(|m| m.coeffs().iter())
            .chain(dir.delta_sigma().iter()),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub dt: f64,
    pub n_paths: usize,
    pub n_batches: usize,
    pub burn_in: f64,
    pub horizon: f64,
    pub delta_a: Option<f64>,
    pub crn: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: Method,
    pub target: Target,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub plateau: Plateau,
    pub method: Method,
    pub target: Target,
    pub provenance: Provenance,
    /// Per-batch curves; kept so plateaus can be re-evaluated on other
    /// windows.
    pub batch_values: Vec<Vec<f64>>,
    pub batch_sizes: Vec<usize>,
}

impl ResponseCurve {
    pub fn estimate(&self) -> ResponseEstimate {
        ResponseEstimate {
            value: self.plateau.value,
            stderr: self.plateau.stderr,
            method: self.method,
            target: self.target.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Plateau over `[t0, t1]`.
    pub fn plateau_over(&self, t0: f64, t1: f64, relative_resolution: f64) -> Plateau {
        plateau_estimate(
            &self.times,
            &self.batch_values,
            &self.batch_sizes,
            t0,
            t1,
            relative_resolution,
        )
    }
}

/// Constant-plus-drift fit over a window, computed per batch.
pub(crate) fn plateau_estimate(
    times: &[f64],
    batches: &[Vec<f64>],
    sizes: &[usize],
    t0: f64,
    t1: f64,
    relative_resolution: f64,
) -> Plateau {
    let idx: Vec<usize> = (0..times.len())
        .filter(|&i| times[i] >= t0 - 1e-12 && times[i] <= t1 + 1e-12)
        .collect();
    let tw: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
    let mut means = Vec::with_capacity(batches.len());
    let mut slopes = Vec::with_capacity(batches.len());
    for b in batches {
        let yw: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
        let m = if yw.is_empty() {
            0.0
        } else {
            yw.iter().sum::<f64>() / yw.len() as f64
        };
        means.push(m);
        slopes.push(if tw.len() >= 2 { linear_fit(&tw, &yw).1 } else { 0.0 });
    }
    let total: usize = sizes.iter().sum();
    let value = means
        .iter()
        .zip(sizes)
        .map(|(m, &n)| m * n as f64)
        .sum::<f64>()
        / total.max(1) as f64;
    let (_, stat) = batch_summary(&means);
    let (slope, slope_se) = batch_summary(&slopes);
    let len = tw.last().copied().unwrap_or(t0) - tw.first().copied().unwrap_or(t0);
    let drift = 0.5 * slope.abs() * len;
    let detected = slope.abs() <= 2.0 * slope_se
        || slope.abs() * len <= relative_resolution * value.abs();
    Plateau {
        value,
        stderr: stat.hypot(drift),
        statistical_stderr: stat,
        drift_stderr: drift,
        window: (t0, t1),
        slope,
        slope_stderr: slope_se,
        detected,
    }
}

/// Run `per_group` for consecutive groups of at most [`LANES`] paths,
/// writing each path's curve on the grid into its buffer, and average within
/// contiguous batches. Batches run in parallel; within a batch paths are
/// accumulated in index order.
pub(crate) fn batched_curves(
    n_paths: usize,
    n_batches: usize,
    n_grid: usize,
    per_group: impl Fn(usize, usize, &mut [Vec<f64>]) -> Result<()> + Sync + Send,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let ranges = batch_ranges(n_paths, n_batches);
    let results: Vec<Result<Vec<f64>>> = ranges
        .par_iter()
        .map(|r| {
            let mut sum = vec![0.0; n_grid];
            let mut bufs = vec![vec![0.0; n_grid]; LANES];
            let mut first = r.start;
            while first < r.end {
                let count = (r.end - first).min(LANES);
                per_group(first, count, &mut bufs[..count])?;
                for buf in &bufs[..count] {
                    for (s, v) in sum.iter_mut().zip(buf) {
                        *s += v;
                    }
                }
                first += count;
            }
            let n = r.len().max(1) as f64;
            Ok(sum.into_iter().map(|s| s / n).collect())
        })
        .collect();
    let batches = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((batches, ranges.iter().map(|r| r.len()).collect()))
}

/// Starting points `first..first + count` of an ensemble as slices.
pub(crate) fn group_starts(samples: &[Vec<f64>], first: usize, count: usize) -> Vec<&[f64]> {
    samples[first..first + count].iter().map(|s| s.as_slice()).collect()
}

pub(crate) struct CurveParts<'a> {
    pub times: Vec<f64>,
    pub batches: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub method: Method,
    pub target: Target,
    pub cfg: &'a ResponseConfig,
    pub scheme: &'a SchemeConfig,
}

pub(crate) fn assemble_curve(parts: CurveParts<'_>) -> ResponseCurve {
    let CurveParts {
        times,
        batches,
        sizes,
        method,
        target,
        cfg,
        scheme,
    } = parts;
    let total: usize = sizes.iter().sum();
    let n_grid = times.len();
    let mut values = vec![0.0; n_grid];
    let mut stderr = vec![0.0; n_grid];
    for i in 0..n_grid {
        let col: Vec<f64> = batches.iter().map(|b| b[i]).collect();
        values[i] = col
            .iter()
            .zip(&sizes)
            .map(|(v, &n)| v * n as f64)
            .sum::<f64>()
            / total.max(1) as f64;
        stderr[i] = batch_summary(&col).1;
    }
    let horizon = times.last().copied().unwrap_or(0.0);
    let t0 = cfg.plateau.window_start.unwrap_or(0.5 * horizon);
    let t1 = cfg.plateau.window_end.unwrap_or(horizon);
    let plateau = plateau_estimate(
        &times,
        &batches,
        &sizes,
        t0,
        t1,
        cfg.plateau.relative_resolution,
    );
    ResponseCurve {
        times,
        values,
        stderr,
        plateau,
        method,
        target,
        provenance: Provenance {
            master_seed: cfg.master_seed,
            dt: scheme.dt,
            n_paths: cfg.n_paths,
            n_batches: cfg.n_batches,
            burn_in: cfg.stationary.burn_in,
            horizon: cfg.horizon,
            delta_a: None,
            crn: None,
        },
        batch_values: batches,
        batch_sizes: sizes,
    }
}

/// Time grid `0, Δ, 2Δ, …` covering the horizon, and the number of
/// integrator steps between grid points.
pub(crate) fn time_grid(cfg: &ResponseConfig, scheme: &SchemeConfig) -> (Vec<f64>, u64) {
    let stride = scheme.steps_for(cfg.record_every).max(1);
    let total = scheme.steps_for(cfg.horizon);
    let n = total.div_ceil(stride);
    let times = (0..=n).map(|i| (i * stride) as f64 * scheme.dt).collect();
    (times, stride)
}

/// Stationary initial conditions at the base parameter.
pub fn stationary_starts(
    sys: &PolySystem,
    cfg: &ResponseConfig,
    scheme: &SchemeConfig,
) -> Result<Ensemble> {
    sample_stationary(
        sys,
        scheme,
        &cfg.stationary,
        cfg.n_paths,
        derive_seed(cfg.master_seed, purpose::STATIONARY),
    )
}

pub(crate) fn response_seed(master: u64) -> u64 {
    derive_seed(master, purpose::RESPONSE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_plateau_has_no_drift() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let batches: Vec<Vec<f64>> = (0..4).map(|b| vec![1.0 + 0.01 * b as f64; 11]).collect();
        let p = plateau_estimate(&times, &batches, &[5, 5, 5, 5], 5.0, 10.0, 0.01);
        assert!(p.detected);
        assert_eq!(p.slope, 0.0);
        assert!((p.value - 1.015).abs() < 1e-14);
        assert!(p.drift_stderr == 0.0 && p.stderr > 0.0);
    }

    #[test]
    fn trending_curve_is_not_a_plateau() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let batches: Vec<Vec<f64>> = (0..4)
            .map(|b| times.iter().map(|t| t * (1.0 + 0.001 * b as f64)).collect())
            .collect();
        let p = plateau_estimate(&times, &batches, &[1; 4], 5.0, 10.0, 0.01);
        assert!(!p.detected);
        assert!(p.drift_stderr > 2.0);
    }

    #[test]
    fn time_grid_covers_horizon() {
        let cfg = ResponseConfig {
            horizon: 1.0,
            record_every: 0.1,
            ..Default::default()
        };
        let (t, stride) = time_grid(&cfg, &SchemeConfig::with_dt(0.01));
        assert_eq!(stride, 10);
        assert_eq!(t.len(), 11);
        assert!((t[10] - 1.0).abs() < 1e-12);
    }
}
