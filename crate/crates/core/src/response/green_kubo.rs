use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{lane_streams, LaneState, LaneStepper, SchemeConfig, LANES};
use crate::observable::Observable;
use crate::poly_system::{ParamDirection, PolySystem};
use crate::stats::Running;

use super::{
    assemble_curve, batched_curves, group_starts, response_seed, stationary_starts, time_grid, CurveParts,
    Method, ResponseConfig, ResponseCurve, Target,
};

/// A potential `H` with invariant density `∝ exp(−H)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Potential {
    /// `H(x) = ½ (x − m)ᵀ P (x − m)`, `P` given row-major.
    Quadratic { mean: Vec<f64>, precision: Vec<f64> },
    /// Drift `N = ∇U` with isotropic noise `ΣΣᵀ = s² I`, so that
    /// `H = −2U/s²` and `∇H = −2N/s²`.
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum CurrentMode {
    ExactH { potential: Potential },
    /// Gaussian fit `H = ½ (x − m)ᵀ C⁻¹ (x − m)` to the stationary ensemble.
    QuasiGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrentSpec {
    pub mode: CurrentMode,
}

/// `∇H` as a closure over a resolved potential.
enum GradH {
    Quadratic { mean: Vec<f64>, precision: DMatrix<f64> },
    Gradient { scale: f64 },
}

impl GradH {
    fn eval(&self, sys: &PolySystem, x: &[f64], out: &mut [f64]) {
        match self {
            GradH::Quadratic { mean, precision } => {
                let d = x.len();
                for i in 0..d {
                    out[i] = (0..d).map(|j| precision[(i, j)] * (x[j] - mean[j])).sum();
                }
            }
            GradH::Gradient { scale } => {
                sys.polynomial().eval_into(x, out);
                for o in out.iter_mut() {
                    *o *= -scale;
                }
            }
        }
    }
}

fn resolve_potential(sys: &PolySystem, p: &Potential) -> Result<GradH> {
    let d = sys.dim();
    match p {
        Potential::Quadratic { mean, precision } => {
            if mean.len() != d || precision.len() != d * d {
                return Err(Error::config(
                    "current.potential",
                    format!("quadratic potential needs a {d}-vector and a {d}x{d} matrix"),
                ));
            }
            Ok(GradH::Quadratic {
                mean: mean.clone(),
                precision: DMatrix::from_row_slice(d, d, precision),
            })
        }
        Potential::Gradient => {
            let cov = sys.sigma() * sys.sigma().transpose();
            let s2 = cov[(0, 0)];
            let isotropic = s2 > 0.0
                && (&cov - DMatrix::identity(d, d) * s2).amax() <= 1e-12 * s2;
            if !isotropic {
                return Err(Error::config(
                    "current.potential",
                    "gradient potential needs isotropic nondegenerate noise",
                ));
            }
            // the drift Jacobian of a gradient field is symmetric
            let mut n = vec![0.0; d];
            let mut jac = vec![0.0; d * d];
            for k in 0..4 {
                let x: Vec<f64> = (0..d).map(|i| ((i + 3 * k) as f64 * 0.7).sin()).collect();
                sys.polynomial().eval_jacobian_into(&x, &mut n, &mut jac);
                let scale = jac.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                for i in 0..d {
                    for j in 0..i {
                        if (jac[i * d + j] - jac[j * d + i]).abs() > 1e-10 * scale {
                            return Err(Error::config(
                                "current.potential",
                                "drift is not a gradient field",
                            ));
                        }
                    }
                }
            }
            Ok(GradH::Gradient { scale: 2.0 / s2 })
        }
    }
}

fn quasi_gaussian(samples: &[Vec<f64>], d: usize) -> Result<GradH> {
    let mean: Vec<f64> = (0..d)
        .map(|i| samples.iter().map(|x| x[i]).collect::<Running>().mean())
        .collect();
    let n = samples.len() as f64 - 1.0;
    let cov = DMatrix::from_fn(d, d, |i, j| {
        samples
            .iter()
            .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
            .sum::<f64>()
            / n
    });
    let chol = Cholesky::new(cov).ok_or_else(|| {
        Error::Numerical("stationary covariance is not positive definite".into())
    })?;
    Ok(GradH::Quadratic {
        mean,
        precision: chol.inverse(),
    })
}

/// `R(t) = E[(J(x_0) − J̄) ∫_0^t (φ(x_s) − φ̄) ds]` with the conjugate current
/// `J = F·∇H − div F` of the drift perturbation `F`.
///
/// `J̄` and `φ̄` are the means over the stationary initial ensemble; the time
/// integral uses the trapezoidal rule on the integrator grid.
pub fn green_kubo_response(
    sys: &PolySystem,
    dir: &ParamDirection,
    phi: &Observable,
    current: &CurrentSpec,
    cfg: &ResponseConfig,
    scheme: &SchemeConfig,
) -> Result<ResponseCurve> {
    cfg.validate()?;
    phi.check_dim(sys.dim())?;
    dir.check_compatible(sys)?;
    if dir.has_noise_part() {
        return Err(Error::Unsupported(
            "Green-Kubo estimation needs a drift-only perturbation; use the tangent or finite-difference estimator for noise perturbations".into(),
        ));
    }
    let d = sys.dim();
    let grad_h = match &current.mode {
        CurrentMode::ExactH { potential } => resolve_potential(sys, potential)?,
        CurrentMode::QuasiGaussian => GradH::Quadratic {
            mean: vec![0.0; d],
            precision: DMatrix::zeros(d, d),
        },
    };
    let starts = stationary_starts(sys, cfg, scheme)?;
    let grad_h = match &current.mode {
        CurrentMode::QuasiGaussian => quasi_gaussian(&starts.samples, d)?,
        _ => grad_h,
    };

    let mut gh = vec![0.0; d];
    let currents: Vec<f64> = starts
        .samples
        .iter()
        .map(|x| {
            grad_h.eval(sys, x, &mut gh);
            let f = dir.eval_drift(x);
            DVector::from_vec(f).dot(&DVector::from_column_slice(&gh)) - dir.divergence(x)
        })
        .collect();
    let j_bar = currents.iter().copied().collect::<Running>().mean();
    let phi_bar = starts
        .samples
        .iter()
        .map(|x| phi.eval(x))
        .collect::<Running>()
        .mean();

    let scheme = scheme.clone().state_only();
    let (times, stride) = time_grid(cfg, &scheme);
    let seed = response_seed(cfg.master_seed);
    let half_dt = 0.5 * scheme.dt;
    let (batches, sizes) = batched_curves(cfg.n_paths, cfg.n_batches, times.len(), |first, count, out| {
        let streams = lane_streams(seed, first, count);
        let mut stepper = LaneStepper::new(sys, None, &scheme)?;
        let mut st = LaneState::new(&group_starts(&starts.samples, first, count), false);
        let mut x = vec![0.0; d];
        let mut centred = |st: &LaneState, out: &mut [f64; LANES]| {
            for (l, o) in out.iter_mut().enumerate().take(count) {
                for i in 0..d {
                    x[i] = st.x[i][l];
                }
                *o = phi.eval(&x) - phi_bar;
            }
        };
        let mut integral = [0.0; LANES];
        let mut prev = [0.0; LANES];
        let mut cur = [0.0; LANES];
        centred(&st, &mut prev);
        for buf in out.iter_mut() {
            buf[0] = 0.0;
        }
        for k in 1..times.len() {
            for _ in 0..stride {
                stepper.step(&mut st, &streams)?;
                centred(&st, &mut cur);
                for l in 0..count {
                    integral[l] += half_dt * (prev[l] + cur[l]);
                }
                prev = cur;
            }
            for (l, buf) in out.iter_mut().enumerate() {
                buf[k] = (currents[first + l] - j_bar) * integral[l];
            }
        }
        Ok(())
    })?;
    Ok(assemble_curve(CurveParts {
        times,
        batches,
        sizes,
        method: Method::GreenKubo,
        target: Target::new(sys, dir, phi),
        cfg,
        scheme: &scheme,
    }))
}
