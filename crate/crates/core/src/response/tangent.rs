use crate::error::Result;
use crate::integrator::{lane_streams, LaneState, LaneStepper, SchemeConfig};
use crate::observable::Observable;
use crate::poly_system::{ParamDirection, PolySystem};

use super::{
    assemble_curve, batched_curves, group_starts, response_seed, stationary_starts, time_grid, CurveParts,
    Method, ResponseConfig, ResponseCurve, Target,
};

/// `R(t) = E[∇φ(x_t) · S_t]` from stationary starts with `S_0 = 0`.
///
/// The tangent `S` is the exact parameter derivative of the discrete flow,
/// so `R(t)` is the derivative of `E φ(x_t)` for the numerical process; its
/// plateau is the stationary response.
pub fn tangent_response(
    sys: &PolySystem,
    dir: &ParamDirection,
    phi: &Observable,
    cfg: &ResponseConfig,
    scheme: &SchemeConfig,
) -> Result<ResponseCurve> {
    cfg.validate()?;
    phi.check_dim(sys.dim())?;
    dir.check_compatible(sys)?;
    let starts = stationary_starts(sys, cfg, scheme)?;
    let mut scheme = scheme.clone().state_only();
    scheme.track_tangent = true;
    let (times, stride) = time_grid(cfg, &scheme);
    let seed = response_seed(cfg.master_seed);
    let (batches, sizes) = batched_curves(cfg.n_paths, cfg.n_batches, times.len(), |first, count, out| {
        let streams = lane_streams(seed, first, count);
        let mut stepper = LaneStepper::new(sys, Some(dir), &scheme)?;
        let mut st = LaneState::new(&group_starts(&starts.samples, first, count), true);
        let (mut x, mut s) = (vec![0.0; sys.dim()], vec![0.0; sys.dim()]);
        for buf in out.iter_mut() {
            buf[0] = 0.0;
        }
        for k in 1..times.len() {
            for _ in 0..stride {
                stepper.step(&mut st, &streams)?;
            }
            let tan = st.tangent.as_ref().expect("tracked");
            for (l, buf) in out.iter_mut().enumerate() {
                for i in 0..x.len() {
                    x[i] = st.x[i][l];
                    s[i] = tan[i][l];
                }
                buf[k] = phi.directional(&x, &s);
            }
        }
        Ok(())
    })?;
    Ok(assemble_curve(CurveParts {
        times,
        batches,
        sizes,
        method: Method::Tangent,
        target: Target::new(sys, dir, phi),
        cfg,
        scheme: &scheme,
    }))
}
