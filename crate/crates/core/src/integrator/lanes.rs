//! Lockstep stepping of [`LANES`] independent paths.
//!
//! Only the position and the parameter tangent are propagated. Every lane
//! performs exactly the floating-point operations of [`Stepper`] on its own
//! stream, so a path gives bit-identical results either way.

use crate::error::{Error, Result};
use crate::poly_system::{ParamDirection, PolySystem};
use crate::rng::RngStream;

use super::{SchemeConfig, DIVERGENCE_CEILING};
#[cfg(doc)]
use super::Stepper;

pub const LANES: usize = 8;

pub type Lanes = [f64; LANES];

/// Positions (and tangents) of a group of paths, coordinate-major:
/// `x[i][l]` is coordinate `i` of lane `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneState {
    pub step: u64,
    pub t: f64,
    pub x: Vec<Lanes>,
    pub tangent: Option<Vec<Lanes>>,
    /// Lanes past this count repeat the last active lane.
    pub active: usize,
}

impl LaneState {
    /// Up to [`LANES`] starting points; the tangent starts at zero.
    pub fn new(starts: &[&[f64]], track_tangent: bool) -> Self {
        assert!(!starts.is_empty() && starts.len() <= LANES);
        let d = starts[0].len();
        let mut x = vec![[0.0; LANES]; d];
        for l in 0..LANES {
            let s = starts[l.min(starts.len() - 1)];
            for i in 0..d {
                x[i][l] = s[i];
            }
        }
        Self {
            step: 0,
            t: 0.0,
            tangent: track_tangent.then(|| vec![[0.0; LANES]; d]),
            x,
            active: starts.len(),
        }
    }

    pub fn lane_x(&self, l: usize) -> Vec<f64> {
        self.x.iter().map(|c| c[l]).collect()
    }

    pub fn lane_tangent(&self, l: usize) -> Option<Vec<f64>> {
        self.tangent.as_ref().map(|t| t.iter().map(|c| c[l]).collect())
    }
}

/// Streams for a group of paths, padded by repeating the last one.
pub fn lane_streams(seed: u64, first: usize, count: usize) -> [RngStream; LANES] {
    assert!(count >= 1 && count <= LANES);
    std::array::from_fn(|l| RngStream::new(seed, (first + l.min(count - 1)) as u32))
}

pub struct LaneStepper<'a> {
    sys: &'a PolySystem,
    dir: Option<&'a ParamDirection>,
    dt: f64,
    sqrt_dt: f64,
    d: usize,
    m: usize,
    sigma: Vec<f64>,
    delta_sigma: Vec<f64>,
    track_tangent: bool,
    n: Vec<Lanes>,
    jac: Vec<Lanes>,
    dn: Vec<Lanes>,
    w: Vec<Lanes>,
    xn: Vec<Lanes>,
    dw: Vec<Lanes>,
    pending: Vec<Lanes>,
    pending_step: Option<u64>,
}

impl<'a> LaneStepper<'a> {
    /// Accepts only position and tangent tracking.
    pub fn new(
        sys: &'a PolySystem,
        dir: Option<&'a ParamDirection>,
        cfg: &SchemeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.track_jacobian || cfg.track_malliavin || cfg.track_second_variation {
            return Err(Error::Unsupported(
                "lockstep stepping propagates only the position and the tangent".into(),
            ));
        }
        if cfg.track_tangent && dir.is_none() {
            return Err(Error::config("direction", "tangent tracking needs a parameter direction"));
        }
        if let Some(dir) = dir {
            dir.check_compatible(sys)?;
        }
        let d = sys.dim();
        let m = sys.noise_channels();
        let row_major = |mat: &nalgebra::DMatrix<f64>| -> Vec<f64> {
            (0..mat.nrows())
                .flat_map(|i| (0..mat.ncols()).map(move |j| mat[(i, j)]))
                .collect()
        };
        Ok(Self {
            sys,
            dir,
            dt: cfg.dt,
            sqrt_dt: cfg.dt.sqrt(),
            d,
            m,
            sigma: row_major(sys.sigma()),
            delta_sigma: dir
                .map(|dd| row_major(dd.delta_sigma()))
                .unwrap_or_else(|| vec![0.0; d * m]),
            track_tangent: cfg.track_tangent,
            n: vec![[0.0; LANES]; d],
            jac: vec![[0.0; LANES]; d * d],
            dn: vec![[0.0; LANES]; d],
            w: vec![[0.0; LANES]; d],
            xn: vec![[0.0; LANES]; d],
            dw: vec![[0.0; LANES]; m],
            pending: vec![[0.0; LANES]; m],
            pending_step: None,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Draw the scaled increments of every lane at `step`. Streams must not
    /// change between an even step and the following odd one.
    fn draw(&mut self, step: u64, streams: &[RngStream; LANES]) {
        if step & 1 == 0 {
            let mut even = [0.0; LANES];
            let mut odd = [0.0; LANES];
            for k in 0..self.m {
                for (l, rng) in streams.iter().enumerate() {
                    (even[l], odd[l]) = rng.normal_pair(step >> 1, k as u32);
                }
                self.dw[k] = even;
                self.pending[k] = odd;
            }
            self.pending_step = Some(step + 1);
        } else if self.pending_step == Some(step) {
            self.dw.copy_from_slice(&self.pending);
        } else {
            for k in 0..self.m {
                for (l, rng) in streams.iter().enumerate() {
                    self.dw[k][l] = rng.normal(step, k as u32);
                }
            }
        }
        for w in self.dw.iter_mut() {
            for v in w.iter_mut() {
                *v *= self.sqrt_dt;
            }
        }
    }

    /// Advance every lane by one step. On divergence the error names the
    /// lowest diverging lane's stream and the state is left untouched.
    pub fn step(&mut self, st: &mut LaneState, streams: &[RngStream; LANES]) -> Result<()> {
        let (d, m, dt) = (self.d, self.m, self.dt);
        self.draw(st.step, streams);
        let poly = self.sys.polynomial();
        if self.track_tangent {
            poly.eval_jacobian_lanes(&st.x, &mut self.n, &mut self.jac);
        } else {
            poly.eval_lanes(&st.x, &mut self.n);
        }
        let mut s = [0.0; LANES];
        for ni in &self.n {
            for l in 0..LANES {
                s[l] += ni[l] * ni[l];
            }
        }
        let mut q = [0.0; LANES];
        for l in 0..LANES {
            s[l] = s[l].sqrt();
            q[l] = 1.0 + dt * s[l];
        }
        let mut norm2 = [0.0; LANES];
        for i in 0..d {
            let mut noise = [0.0; LANES];
            for k in 0..m {
                let sk = self.sigma[i * m + k];
                for l in 0..LANES {
                    noise[l] += sk * self.dw[k][l];
                }
            }
            let (xi, ni) = (&st.x[i], &self.n[i]);
            let out = &mut self.xn[i];
            for l in 0..LANES {
                let v = xi[l] + dt * ni[l] / q[l] + noise[l];
                out[l] = v;
                norm2[l] += v * v;
            }
        }
        let ceiling = DIVERGENCE_CEILING * DIVERGENCE_CEILING;
        if let Some(l) = (0..LANES).find(|&l| !(norm2[l] <= ceiling)) {
            return Err(self.diverged(st, streams, l, "state left the finite region"));
        }

        if let Some(tan) = st.tangent.as_mut() {
            match self.dir {
                Some(dir) => dir.polynomial().eval_lanes(&st.x, &mut self.dn),
                None => {
                    for v in self.dn.iter_mut() {
                        *v = [0.0; LANES];
                    }
                }
            }
            let mut c = [0.0; LANES];
            for l in 0..LANES {
                c[l] = if s[l] > 0.0 { dt / (q[l] * s[l]) } else { 0.0 };
            }
            let mut nw = [0.0; LANES];
            for i in 0..d {
                let mut acc = self.dn[i];
                for k in 0..d {
                    let jk = &self.jac[i * d + k];
                    for l in 0..LANES {
                        acc[l] += jk[l] * tan[k][l];
                    }
                }
                self.w[i] = acc;
                for l in 0..LANES {
                    nw[l] += self.n[i][l] * acc[l];
                }
            }
            for l in 0..LANES {
                nw[l] *= c[l];
            }
            for i in 0..d {
                let mut noise = [0.0; LANES];
                for k in 0..m {
                    let sk = self.delta_sigma[i * m + k];
                    for l in 0..LANES {
                        noise[l] += sk * self.dw[k][l];
                    }
                }
                for l in 0..LANES {
                    tan[i][l] += dt / q[l] * (self.w[i][l] - nw[l] * self.n[i][l]) + noise[l];
                }
            }
            if let Some(l) = (0..LANES).find(|&l| tan.iter().any(|v| !v[l].is_finite())) {
                return Err(self.diverged(st, streams, l, "derivative processes became non-finite"));
            }
        }

        st.x.copy_from_slice(&self.xn);
        st.step += 1;
        st.t = st.step as f64 * dt;
        Ok(())
    }

    fn diverged(&self, st: &LaneState, streams: &[RngStream; LANES], l: usize, reason: &str) -> Error {
        Error::Divergence {
            step: st.step,
            stream: u64::from(streams[l].stream_id),
            reason: reason.into(),
            last_state: st.lane_x(l),
        }
    }
}
