//! Tamed Euler–Maruyama with co-propagated derivatives.
//!
//! One step maps
//!
//! ```text
//! x ↦ x + dt·N(x)/(1 + dt‖N(x)‖) + Σ ΔW
//! ```
//!
//! The Jacobian, second variation and parameter tangent are propagated with
//! the exact derivatives of this discrete map, so they coincide with finite
//! differences of the numerical flow under common noise. The Malliavin
//! matrix follows the forward recursion `M ← G (M + dt ΣΣᵀ) Gᵀ`.
//!
//! Matrices are stored row-major in flat vectors: `J[i*d + j]`,
//! `M[i*d + j]`, and the second variation on basis pairs as
//! `J2[(i*d + j)*d + l]`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observable::Observable;
use crate::poly_system::{ParamDirection, PolySystem};
use crate::rng::{derive_seed, purpose, RngStream};
use crate::stats::Running;

mod lanes;
pub use lanes::{lane_streams, LaneState, LaneStepper, Lanes, LANES};

/// States with `‖x‖` above this are treated as diverged.
pub const DIVERGENCE_CEILING: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    TamedEuler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub track_jacobian: bool,
    pub track_second_variation: bool,
    pub track_malliavin: bool,
    pub track_tangent: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            scheme: Scheme::TamedEuler,
            track_jacobian: false,
            track_second_variation: false,
            track_malliavin: false,
            track_tangent: false,
        }
    }
}

impl SchemeConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self {
            dt,
            ..Self::default()
        }
    }

    pub fn tracking_all(mut self) -> Self {
        self.track_jacobian = true;
        self.track_second_variation = true;
        self.track_malliavin = true;
        self.track_tangent = true;
        self
    }

    pub fn state_only(mut self) -> Self {
        self.track_jacobian = false;
        self.track_second_variation = false;
        self.track_malliavin = false;
        self.track_tangent = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.5) {
            return Err(Error::config("scheme.dt", "dt must lie in (0, 0.5]"));
        }
        Ok(())
    }

    /// Number of steps covering `[0, horizon]`.
    pub fn steps_for(&self, horizon: f64) -> u64 {
        steps_for(horizon, self.dt)
    }
}

/// `⌈horizon/dt⌉`, forgiving rounding noise in the ratio.
pub fn steps_for(horizon: f64, dt: f64) -> u64 {
    if horizon <= 0.0 {
        return 0;
    }
    let r = horizon / dt;
    if (r - r.round()).abs() < 1e-9 * r.max(1.0) {
        r.round() as u64
    } else {
        r.ceil() as u64
    }
}

/// State of one path together with its tracked derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub t: f64,
    pub step: u64,
    pub x: Vec<f64>,
    pub jacobian: Option<Vec<f64>>,
    pub second_variation: Option<Vec<f64>>,
    pub tangent: Option<Vec<f64>>,
    pub malliavin: Option<Vec<f64>>,
}

impl AugmentedState {
    /// Time-zero state: `J = I`, everything else zero.
    pub fn new(x0: &[f64], cfg: &SchemeConfig) -> Self {
        let d = x0.len();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        // J2 needs J
        let track_j = cfg.track_jacobian || cfg.track_second_variation;
        Self {
            t: 0.0,
            step: 0,
            x: x0.to_vec(),
            jacobian: track_j.then_some(eye),
            second_variation: cfg.track_second_variation.then(|| vec![0.0; d * d * d]),
            tangent: cfg.track_tangent.then(|| vec![0.0; d]),
            malliavin: cfg.track_malliavin.then(|| vec![0.0; d * d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn jacobian_matrix(&self) -> Option<DMatrix<f64>> {
        let d = self.dim();
        self.jacobian
            .as_ref()
            .map(|j| DMatrix::from_row_slice(d, d, j))
    }

    pub fn malliavin_matrix(&self) -> Option<DMatrix<f64>> {
        let d = self.dim();
        self.malliavin
            .as_ref()
            .map(|m| DMatrix::from_row_slice(d, d, m))
    }

    /// Component `i` of the second variation on basis pair `(e_j, e_l)`.
    pub fn second_variation_at(&self, i: usize, j: usize, l: usize) -> Option<f64> {
        let d = self.dim();
        self.second_variation.as_ref().map(|h| h[(i * d + j) * d + l])
    }
}

/// Advances [`AugmentedState`]s of one system; owns the scratch buffers so
/// the inner loop does not allocate.
pub struct Stepper<'a> {
    sys: &'a PolySystem,
    dir: Option<&'a ParamDirection>,
    dt: f64,
    sqrt_dt: f64,
    d: usize,
    m: usize,
    sigma: Vec<f64>,
    delta_sigma: Vec<f64>,
    noise_cov: Vec<f64>,
    n: Vec<f64>,
    jac: Vec<f64>,
    hess: Vec<f64>,
    p: Vec<f64>,
    g: Vec<f64>,
    xn: Vec<f64>,
    dn: Vec<f64>,
    dw: Vec<f64>,
    // normals of the odd step following the last even step drawn
    pending: Vec<f64>,
    pending_key: Option<(u64, u32, u64)>,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
    vec_a: Vec<f64>,
    vec_b: Vec<f64>,
    vec_c: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(
        sys: &'a PolySystem,
        dir: Option<&'a ParamDirection>,
        cfg: &SchemeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(dir) = dir {
            dir.check_compatible(sys)?;
        }
        let d = sys.dim();
        let m = sys.noise_channels();
        let row_major = |mat: &DMatrix<f64>| -> Vec<f64> {
            (0..mat.nrows())
                .flat_map(|i| (0..mat.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| mat[(i, j)])
                .collect()
        };
        let sigma = row_major(sys.sigma());
        let delta_sigma = dir
            .map(|dd| row_major(dd.delta_sigma()))
            .unwrap_or_else(|| vec![0.0; d * m]);
        let cov = sys.sigma() * sys.sigma().transpose();
        Ok(Self {
            sys,
            dir,
            dt: cfg.dt,
            sqrt_dt: cfg.dt.sqrt(),
            d,
            m,
            sigma,
            delta_sigma,
            noise_cov: row_major(&cov),
            n: vec![0.0; d],
            jac: vec![0.0; d * d],
            hess: vec![0.0; d * d * d],
            p: vec![0.0; d * d],
            g: vec![0.0; d * d],
            xn: vec![0.0; d],
            dn: vec![0.0; d],
            dw: vec![0.0; m],
            pending: vec![0.0; m],
            pending_key: None,
            buf_a: vec![0.0; d * d * d.max(1)],
            buf_b: vec![0.0; d * d],
            vec_a: vec![0.0; d],
            vec_b: vec![0.0; d],
            vec_c: vec![0.0; d],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise_channels(&self) -> usize {
        self.m
    }

    /// One step with the increments of `rng` at the state's step counter.
    #[inline]
    pub fn step(&mut self, st: &mut AugmentedState, rng: &RngStream) -> Result<()> {
        let mut dw = std::mem::take(&mut self.dw);
        let key = (rng.master_seed, rng.stream_id, st.step);
        if st.step & 1 == 0 {
            rng.fill_normal_pairs(st.step >> 1, &mut dw, &mut self.pending);
            self.pending_key = Some((key.0, key.1, st.step + 1));
        } else if self.pending_key == Some(key) {
            dw.copy_from_slice(&self.pending);
        } else {
            rng.fill_normals(st.step, &mut dw);
        }
        for w in dw.iter_mut() {
            *w *= self.sqrt_dt;
        }
        let r = self.advance(st, &dw, u64::from(rng.stream_id));
        self.dw = dw;
        r
    }

    /// One step with caller-supplied Brownian increments `dw` (already
    /// scaled, length M). On error the position and step counter are left
    /// untouched.
    pub fn advance(&mut self, st: &mut AugmentedState, dw: &[f64], stream: u64) -> Result<()> {
        let (d, m, dt) = (self.d, self.m, self.dt);
        debug_assert_eq!(dw.len(), m);
        let track_derivs = st.jacobian.is_some()
            || st.tangent.is_some()
            || st.malliavin.is_some()
            || st.second_variation.is_some();

        let poly = self.sys.polynomial();
        if track_derivs {
            poly.eval_jacobian_into(&st.x, &mut self.n, &mut self.jac);
        } else {
            poly.eval_into(&st.x, &mut self.n);
        }
        let s = self.n.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = 1.0 + dt * s;
        let mut norm2 = 0.0;
        for i in 0..d {
            let mut noise = 0.0;
            for k in 0..m {
                noise += self.sigma[i * m + k] * dw[k];
            }
            let v = st.x[i] + dt * self.n[i] / q + noise;
            self.xn[i] = v;
            norm2 += v * v;
        }
        if !(norm2 <= DIVERGENCE_CEILING * DIVERGENCE_CEILING) {
            return Err(self.diverged(st, stream, "state left the finite region"));
        }

        if track_derivs {
            // P = I − (dt/(q s)) n nᵀ ; G = I + dt·P·Dn/q
            let c = if s > 0.0 { dt / (q * s) } else { 0.0 };
            let need_g =
                st.jacobian.is_some() || st.malliavin.is_some() || st.second_variation.is_some();
            if need_g {
                for i in 0..d {
                    for j in 0..d {
                        self.p[i * d + j] =
                            f64::from(u8::from(i == j)) - c * self.n[i] * self.n[j];
                    }
                }
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += self.p[i * d + k] * self.jac[k * d + j];
                        }
                        self.g[i * d + j] = f64::from(u8::from(i == j)) + dt * acc / q;
                    }
                }
            }

            if st.second_variation.is_some() {
                self.advance_second_variation(st, s, q);
            }
            if let Some(j) = st.jacobian.as_mut() {
                mat_mul_into(&self.g, j, &mut self.buf_b, d);
                j.copy_from_slice(&self.buf_b);
            }
            if let Some(tan) = st.tangent.as_mut() {
                // S ← G S + dt·P δN/q + δΣ ΔW, as S + (dt/q)·P(Dn S + δN) + δΣ ΔW
                match self.dir {
                    Some(dir) => dir.polynomial().eval_into(&st.x, &mut self.dn),
                    None => self.dn.fill(0.0),
                }
                let w = &mut self.vec_a;
                for i in 0..d {
                    let mut acc = self.dn[i];
                    for k in 0..d {
                        acc += self.jac[i * d + k] * tan[k];
                    }
                    w[i] = acc;
                }
                let nw = c * dot(&self.n, w);
                for i in 0..d {
                    let mut noise = 0.0;
                    for k in 0..m {
                        noise += self.delta_sigma[i * m + k] * dw[k];
                    }
                    tan[i] += dt / q * (w[i] - nw * self.n[i]) + noise;
                }
            }
            if let Some(mal) = st.malliavin.as_mut() {
                // M ← G (M + dt ΣΣᵀ) Gᵀ, symmetrized
                for (a, b) in mal.iter_mut().zip(&self.noise_cov) {
                    *a += dt * b;
                }
                mat_mul_into(&self.g, mal, &mut self.buf_b, d);
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += self.buf_b[i * d + k] * self.g[j * d + k];
                        }
                        mal[i * d + j] = acc;
                    }
                }
                for i in 0..d {
                    for j in 0..i {
                        let v = 0.5 * (mal[i * d + j] + mal[j * d + i]);
                        mal[i * d + j] = v;
                        mal[j * d + i] = v;
                    }
                }
            }
            let finite = [&st.jacobian, &st.tangent, &st.malliavin, &st.second_variation]
                .iter()
                .all(|o| o.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite())));
            if !finite {
                return Err(self.diverged(st, stream, "derivative processes became non-finite"));
            }
        }

        for (a, b) in st.x.iter_mut().zip(&self.xn) {
            *a = *b;
        }
        st.step += 1;
        st.t = st.step as f64 * dt;
        Ok(())
    }

    fn diverged(&self, st: &AugmentedState, stream: u64, reason: &str) -> Error {
        Error::Divergence {
            step: st.step,
            stream,
            reason: reason.into(),
            last_state: st.x.clone(),
        }
    }

    /// `J2[:, j, l] ← G·J2[:, j, l] + dt·D²f(J e_j, J e_l)` using the old `J`.
    fn advance_second_variation(&mut self, st: &mut AugmentedState, s: f64, q: f64) {
        let (d, dt) = (self.d, self.dt);
        self.sys.polynomial().hessian_into(&st.x, &mut self.hess);
        let j = st.jacobian.as_ref().expect("second variation requires the Jacobian");
        let j2 = st.second_variation.as_mut().expect("checked by caller");
        let n = &self.n;
        let jac = &self.jac;
        // columns u_j = J e_j and Dn u_j
        let col = |jj: usize, out: &mut [f64]| {
            for i in 0..d {
                out[i] = j[i * d + jj];
            }
        };
        let new = &mut self.buf_a;
        let mut u = vec![0.0; d];
        let mut v = vec![0.0; d];
        for a in 0..d {
            col(a, &mut u);
            mat_vec_into(jac, &u, &mut self.vec_a, d);
            let dnu = &self.vec_a;
            let ds_u = if s > 0.0 { dot(n, dnu) / s } else { 0.0 };
            for b in a..d {
                col(b, &mut v);
                mat_vec_into(jac, &v, &mut self.vec_b, d);
                let dnv = &self.vec_b;
                let ds_v = if s > 0.0 { dot(n, dnv) / s } else { 0.0 };
                // D²n(u, v)
                for i in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        for l in 0..d {
                            acc += self.hess[(i * d + k) * d + l] * u[k] * v[l];
                        }
                    }
                    self.vec_c[i] = acc;
                }
                let d2n = &self.vec_c;
                let d2s = if s > 0.0 {
                    (dot(dnv, dnu) + dot(n, d2n)) / s - dot(n, dnu) * dot(n, dnv) / (s * s * s)
                } else {
                    0.0
                };
                for i in 0..d {
                    let d2f = d2n[i] / q
                        - dnu[i] * dt * ds_v / (q * q)
                        - dnv[i] * dt * ds_u / (q * q)
                        - n[i] * dt * d2s / (q * q)
                        + 2.0 * n[i] * dt * dt * ds_u * ds_v / (q * q * q);
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += self.g[i * d + k] * j2[(k * d + a) * d + b];
                    }
                    let val = acc + dt * d2f;
                    new[(i * d + a) * d + b] = val;
                    new[(i * d + b) * d + a] = val;
                }
            }
        }
        j2.copy_from_slice(&new[..d * d * d]);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn mat_vec_into(a: &[f64], x: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        out[i] = dot(&a[i * d..(i + 1) * d], x);
    }
}

#[inline]
fn mat_mul_into(a: &[f64], b: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
}

/// Single step as a pure function of its inputs.
pub fn step(
    sys: &PolySystem,
    st: &AugmentedState,
    dir: Option<&ParamDirection>,
    cfg: &SchemeConfig,
    rng: &RngStream,
) -> Result<AugmentedState> {
    let mut stepper = Stepper::new(sys, dir, cfg)?;
    let mut next = st.clone();
    stepper.step(&mut next, rng)?;
    Ok(next)
}

/// Called with the initial state and after every step.
pub trait PathObserver {
    fn observe(&mut self, st: &AugmentedState);
}

/// Tracks moment-type quantities along a path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub eta: f64,
    /// `max_t η‖x_t‖²`, i.e. the log of the supremum of `exp(η‖x‖²)`.
    pub log_sup_weight: f64,
    pub sup_weight: f64,
    /// Largest `∫_0^T ‖x_t‖^N dt` over the monitored paths.
    pub time_integral_norm_pow: f64,
    pub max_norm: f64,
    pub ceiling: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct MomentMonitor {
    eta: f64,
    degree: usize,
    dt: f64,
    max_norm2: f64,
    integral: f64,
    non_finite: bool,
}

impl MomentMonitor {
    pub fn new(eta: f64, degree: usize, dt: f64) -> Self {
        Self {
            eta,
            degree,
            dt,
            max_norm2: 0.0,
            integral: 0.0,
            non_finite: false,
        }
    }

    pub fn report(&self) -> MomentReport {
        let max_norm = self.max_norm2.sqrt();
        let log_sup = self.eta * self.max_norm2;
        MomentReport {
            eta: self.eta,
            log_sup_weight: log_sup,
            sup_weight: log_sup.exp(),
            time_integral_norm_pow: self.integral,
            max_norm,
            ceiling: DIVERGENCE_CEILING,
            diverged: self.non_finite || !(max_norm <= DIVERGENCE_CEILING),
        }
    }
}

impl PathObserver for MomentMonitor {
    fn observe(&mut self, st: &AugmentedState) {
        let n2: f64 = st.x.iter().map(|v| v * v).sum();
        if !n2.is_finite() {
            self.non_finite = true;
            return;
        }
        self.max_norm2 = self.max_norm2.max(n2);
        if st.step > 0 {
            self.integral += self.dt * n2.sqrt().powi(self.degree as i32);
        }
    }
}

/// Records the first state at or after each requested time.
#[derive(Clone, Debug, Default)]
pub struct SnapshotRecorder {
    times: Vec<f64>,
    next: usize,
    pub snapshots: Vec<AugmentedState>,
}

impl SnapshotRecorder {
    pub fn new(mut times: Vec<f64>) -> Self {
        times.sort_by(f64::total_cmp);
        Self {
            times,
            next: 0,
            snapshots: Vec::new(),
        }
    }
}

impl PathObserver for SnapshotRecorder {
    fn observe(&mut self, st: &AugmentedState) {
        while self.next < self.times.len() && st.t >= self.times[self.next] - 1e-12 {
            self.snapshots.push(st.clone());
            self.next += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub final_state: AugmentedState,
    pub n_steps: u64,
    pub stream: RngStream,
}

/// Run one path over `⌈T/dt⌉` steps.
pub fn simulate_path(
    sys: &PolySystem,
    x0: &[f64],
    horizon: f64,
    dir: Option<&ParamDirection>,
    cfg: &SchemeConfig,
    rng: RngStream,
    observers: &mut [&mut dyn PathObserver],
) -> Result<PathRecord> {
    if horizon < 0.0 || !horizon.is_finite() {
        return Err(Error::config("horizon", "time horizon must be finite and >= 0"));
    }
    if x0.len() != sys.dim() {
        return Err(Error::Dimension(format!(
            "initial point has length {}, system dimension is {}",
            x0.len(),
            sys.dim()
        )));
    }
    if cfg.track_tangent && dir.is_none() {
        return Err(Error::config(
            "direction",
            "tangent tracking needs a parameter direction",
        ));
    }
    let mut stepper = Stepper::new(sys, dir, cfg)?;
    let mut st = AugmentedState::new(x0, cfg);
    for o in observers.iter_mut() {
        o.observe(&st);
    }
    let n_steps = cfg.steps_for(horizon);
    for _ in 0..n_steps {
        stepper.step(&mut st, &rng)?;
        for o in observers.iter_mut() {
            o.observe(&st);
        }
    }
    Ok(PathRecord {
        final_state: st,
        n_steps,
        stream: rng,
    })
}

/// Map `f` over `0..n` in parallel, keeping index order; the first error in
/// index order wins, independently of scheduling.
pub fn par_indexed<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let raw: Vec<Result<T>> = (0..n).into_par_iter().map(f).collect();
    raw.into_iter().collect()
}

/// Final states of independent paths from the given starts; path `p` uses
/// stream `p` of the `seed` family.
pub fn simulate_many(
    sys: &PolySystem,
    starts: &[Vec<f64>],
    horizon: f64,
    dir: Option<&ParamDirection>,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<Vec<AugmentedState>> {
    par_indexed(starts.len(), |p| {
        simulate_path(
            sys,
            &starts[p],
            horizon,
            dir,
            cfg,
            RngStream::new(seed, p as u32),
            &mut [],
        )
        .map(|r| r.final_state)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationaryConfig {
    pub burn_in: f64,
    pub thinning: f64,
    pub n_streams: usize,
    /// Common starting point of every stream (origin when absent).
    pub x0: Option<Vec<f64>>,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        Self {
            burn_in: 10.0,
            thinning: 1.0,
            n_streams: 1000,
            x0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProvenance {
    pub master_seed: u64,
    pub dt: f64,
    pub burn_in: f64,
    pub thinning: f64,
    pub n_streams: usize,
    pub n_samples: usize,
}

/// Stationary samples, stream-major: all samples of stream 0 first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub dim: usize,
    pub samples: Vec<Vec<f64>>,
    pub stream_of: Vec<u32>,
    pub provenance: EnsembleProvenance,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.samples.iter().map(|x| x[i]).collect::<Running>().mean())
            .collect()
    }

    /// Sample covariance matrix.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let n = self.samples.len().max(2) as f64 - 1.0;
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.samples
                .iter()
                .map(|x| (x[i] - m[i]) * (x[j] - m[j]))
                .sum::<f64>()
                / n
        })
    }
}

/// Draw `n_samples` approximately stationary states. Each of `n_streams`
/// independent paths (streams of the `seed` family) is run past `burn_in`
/// and then sampled every `thinning` time units.
pub fn sample_stationary(
    sys: &PolySystem,
    cfg: &SchemeConfig,
    ens: &StationaryConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Ensemble> {
    cfg.validate()?;
    if !(ens.burn_in > 0.0) || !(ens.thinning > 0.0) {
        return Err(Error::config(
            "ensemble",
            "burn_in and thinning must be positive",
        ));
    }
    if ens.n_streams == 0 {
        return Err(Error::config("ensemble.n_streams", "must be at least 1"));
    }
    let x0 = ens.x0.clone().unwrap_or_else(|| vec![0.0; sys.dim()]);
    if x0.len() != sys.dim() {
        return Err(Error::config("ensemble.x0", "length differs from system dimension"));
    }
    let cfg = cfg.clone().state_only();
    let n_streams = ens.n_streams.min(n_samples.max(1));
    let burn = cfg.steps_for(ens.burn_in);
    let thin = cfg.steps_for(ens.thinning).max(1);
    let ranges = crate::stats::batch_ranges(n_samples, n_streams);
    let n_used = if n_samples == 0 { 0 } else { ranges.len() };
    let grouped = par_indexed(n_used.div_ceil(LANES), |g| {
        let first = g * LANES;
        let count = (n_used - first).min(LANES);
        let streams = lane_streams(seed, first, count);
        let mut stepper = LaneStepper::new(sys, None, &cfg)?;
        let mut st = LaneState::new(&vec![x0.as_slice(); count], false);
        for _ in 0..burn {
            stepper.step(&mut st, &streams)?;
        }
        let longest = ranges[first..first + count].iter().map(|r| r.len()).max().unwrap_or(0);
        let mut out: Vec<Vec<Vec<f64>>> = (0..count)
            .map(|l| Vec::with_capacity(ranges[first + l].len()))
            .collect();
        for j in 0..longest {
            for _ in 0..thin {
                stepper.step(&mut st, &streams)?;
            }
            for (l, o) in out.iter_mut().enumerate() {
                if j < ranges[first + l].len() {
                    o.push(st.lane_x(l));
                }
            }
        }
        Ok(out)
    })?;
    let per_stream: Vec<Vec<Vec<f64>>> = grouped.into_iter().flatten().collect();
    let mut samples = Vec::with_capacity(n_samples);
    let mut stream_of = Vec::with_capacity(n_samples);
    for (k, s) in per_stream.into_iter().enumerate() {
        stream_of.extend(std::iter::repeat(k as u32).take(s.len()));
        samples.extend(s);
    }
    Ok(Ensemble {
        dim: sys.dim(),
        samples,
        stream_of,
        provenance: EnsembleProvenance {
            master_seed: seed,
            dt: cfg.dt,
            burn_in: ens.burn_in,
            thinning: ens.thinning,
            n_streams,
            n_samples,
        },
    })
}

/// Moment monitoring over a set of starting points; divergence is reported
/// through the flag rather than as an error.
pub fn moment_check(
    sys: &PolySystem,
    starts: &[Vec<f64>],
    horizon: f64,
    cfg: &SchemeConfig,
    eta: f64,
    seed: u64,
) -> Result<MomentReport> {
    let cfg = cfg.clone().state_only();
    let reports = par_indexed(starts.len(), |p| {
        let mut mon = MomentMonitor::new(eta, sys.degree(), cfg.dt);
        let r = simulate_path(
            sys,
            &starts[p],
            horizon,
            None,
            &cfg,
            RngStream::new(seed, p as u32),
            &mut [&mut mon],
        );
        match r {
            Ok(_) => Ok(mon.report()),
            Err(Error::Divergence { .. }) => {
                let mut rep = mon.report();
                rep.diverged = true;
                Ok(rep)
            }
            Err(e) => Err(e),
        }
    })?;
    let mut out = MomentReport {
        eta,
        log_sup_weight: 0.0,
        sup_weight: 1.0,
        time_integral_norm_pow: 0.0,
        max_norm: 0.0,
        ceiling: DIVERGENCE_CEILING,
        diverged: false,
    };
    for r in reports {
        out.log_sup_weight = out.log_sup_weight.max(r.log_sup_weight);
        out.time_integral_norm_pow = out.time_integral_norm_pow.max(r.time_integral_norm_pow);
        out.max_norm = out.max_norm.max(r.max_norm);
        out.diverged |= r.diverged;
    }
    out.sup_weight = out.log_sup_weight.exp();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
}

/// Monte Carlo estimate of `D(P_t φ)(x0) = E[J_{0,t}ᵀ ∇φ(x_t)]`.
pub fn pathwise_gradient(
    sys: &PolySystem,
    x0: &[f64],
    t: f64,
    phi: &Observable,
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<GradientEstimate> {
    phi.check_dim(sys.dim())?;
    if !(t > 0.0) {
        return Err(Error::config("t", "time must be positive"));
    }
    let mut cfg = cfg.clone().state_only();
    cfg.track_jacobian = true;
    let d = sys.dim();
    let per_path = par_indexed(n_paths, |p| {
        let rec = simulate_path(sys, x0, t, None, &cfg, RngStream::new(seed, p as u32), &mut [])?;
        let st = rec.final_state;
        let g = phi.grad(&st.x);
        let j = st.jacobian.expect("tracked");
        Ok((0..d)
            .map(|k| (0..d).map(|i| j[i * d + k] * g[i]).sum::<f64>())
            .collect::<Vec<f64>>())
    })?;
    let mut acc = vec![Running::new(); d];
    for v in &per_path {
        for (a, x) in acc.iter_mut().zip(v) {
            a.push(*x);
        }
    }
    Ok(GradientEstimate {
        mean: acc.iter().map(Running::mean).collect(),
        stderr: acc.iter().map(Running::std_error).collect(),
        n_paths,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBoundRow {
    pub x: Vec<f64>,
    pub observable: String,
    /// `‖D P_t φ(x)‖²`
    pub grad_norm_sq: f64,
    /// `P_t φ²(x)`
    pub second_moment: f64,
    /// One ratio per requested η; `None` when the denominator vanishes.
    pub ratios: Vec<Option<f64>>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBoundReport {
    pub t: f64,
    pub etas: Vec<f64>,
    pub rows: Vec<GradientBoundRow>,
    /// Largest ratio over the grid, per η.
    pub max_ratio: Vec<f64>,
}

/// Empirical check of `‖D P_t φ(x)‖² ≤ C e^{η‖x‖²} P_t φ²(x)` on a grid.
#[allow(clippy::too_many_arguments)]
pub fn gradient_bound_check(
    sys: &PolySystem,
    t: f64,
    etas: &[f64],
    observables: &[Observable],
    x_grid: &[Vec<f64>],
    n_paths: usize,
    cfg: &SchemeConfig,
    seed: u64,
) -> Result<GradientBoundReport> {
    if etas.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::config("eta", "weights need eta > 0"));
    }
    if !(t > 0.0) {
        return Err(Error::config("t", "time must be positive"));
    }
    for phi in observables {
        phi.check_dim(sys.dim())?;
    }
    let mut cfg = cfg.clone().state_only();
    cfg.track_jacobian = true;
    let d = sys.dim();
    let mut rows = Vec::new();
    for (gi, x) in x_grid.iter().enumerate() {
        let grid_seed = derive_seed(seed, gi as u64);
        let finals = simulate_many(sys, &vec![x.clone(); n_paths], t, None, &cfg, grid_seed)?;
        for phi in observables {
            let mut grad = vec![0.0; d];
            let mut sq = Running::new();
            for st in &finals {
                let g = phi.grad(&st.x);
                let j = st.jacobian.as_ref().expect("tracked");
                for k in 0..d {
                    grad[k] += (0..d).map(|i| j[i * d + k] * g[i]).sum::<f64>();
                }
                sq.push(phi.eval(&st.x).powi(2));
            }
            let n = finals.len().max(1) as f64;
            let grad_norm_sq = grad.iter().map(|g| (g / n).powi(2)).sum::<f64>();
            let second = sq.mean();
            let x2: f64 = x.iter().map(|v| v * v).sum();
            let flagged = !(second > 0.0);
            let ratios = etas
                .iter()
                .map(|eta| (!flagged).then(|| grad_norm_sq / ((eta * x2).exp() * second)))
                .collect();
            rows.push(GradientBoundRow {
                x: x.clone(),
                observable: phi.name(),
                grad_norm_sq,
                second_moment: second,
                ratios,
                flagged,
            });
        }
    }
    let max_ratio = (0..etas.len())
        .map(|k| {
            rows.iter()
                .filter_map(|r| r.ratios[k])
                .fold(0.0f64, f64::max)
        })
        .collect();
    Ok(GradientBoundReport {
        t,
        etas: etas.to_vec(),
        rows,
        max_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalliavinReport {
    pub lambda_min: Vec<f64>,
    pub min: f64,
    pub max: f64,
    /// Histogram of `log10 λ_min` over the strictly positive values.
    pub log10_histogram: Vec<HistogramBin>,
    /// `(p, E[λ_min^{-p/2}])`; infinite if some `λ_min ≤ 0`.
    pub inverse_moments: Vec<(f64, f64)>,
    pub all_positive: bool,
}

/// Smallest eigenvalue of each Malliavin matrix and inverse moments.
pub fn malliavin_spectrum(states: &[AugmentedState], p_list: &[f64]) -> Result<MalliavinReport> {
    let mut lambda_min = Vec::with_capacity(states.len());
    for st in states {
        let m = st
            .malliavin_matrix()
            .ok_or_else(|| Error::config("scheme.track_malliavin", "Malliavin matrix not tracked"))?;
        let sym = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        lambda_min.push(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    let min = lambda_min.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = lambda_min.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let all_positive = lambda_min.iter().all(|&l| l > 0.0);
    let inverse_moments = p_list
        .iter()
        .map(|&p| {
            let v = if all_positive {
                lambda_min.iter().map(|l| l.powf(-p / 2.0)).collect::<Running>().mean()
            } else {
                f64::INFINITY
            };
            (p, v)
        })
        .collect();
    let logs: Vec<f64> = lambda_min
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|l| l.log10())
        .collect();
    let log10_histogram = if logs.is_empty() {
        Vec::new()
    } else {
        let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n_bins = 20usize;
        let width = ((hi - lo) / n_bins as f64).max(1e-12);
        let mut counts = vec![0usize; n_bins];
        for l in &logs {
            let b = (((l - lo) / width) as usize).min(n_bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(b, count)| HistogramBin {
                lo: lo + b as f64 * width,
                hi: lo + (b + 1) as f64 * width,
                count,
            })
            .collect()
    };
    Ok(MalliavinReport {
        lambda_min,
        min,
        max,
        log10_histogram,
        inverse_moments,
        all_positive,
    })
}

/// Seed family for stationary sampling under `master_seed`.
pub fn stationary_seed(master_seed: u64) -> u64 {
    derive_seed(master_seed, purpose::STATIONARY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly_system::Monomial;

    fn mono(out: usize, vars: &[usize], coef: f64) -> Monomial {
        Monomial {
            out,
            vars: vars.to_vec(),
            coef,
        }
    }

    fn ou(gamma: f64, sigma: f64) -> PolySystem {
        PolySystem::from_monomials(
            1,
            1,
            &[mono(0, &[0], -gamma)],
            DMatrix::from_element(1, 1, sigma),
        )
        .unwrap()
    }

    fn cubic() -> PolySystem {
        PolySystem::from_monomials(
            1,
            3,
            &[mono(0, &[0], 1.0), mono(0, &[0, 0, 0], -1.0)],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn config_guards() {
        assert!(SchemeConfig::with_dt(0.0).validate().is_err());
        assert!(SchemeConfig::with_dt(0.6).validate().is_err());
        assert!(SchemeConfig::with_dt(0.5).validate().is_ok());
        assert_eq!(steps_for(1.0, 1e-3), 1000);
        assert_eq!(steps_for(0.0, 1e-3), 0);
        assert_eq!(steps_for(1.0, 0.3), 4);
    }

    #[test]
    fn initial_state_invariants() {
        let st = AugmentedState::new(&[1.0, 2.0], &SchemeConfig::default().tracking_all());
        assert_eq!(st.jacobian.as_deref(), Some(&[1.0, 0.0, 0.0, 1.0][..]));
        assert!(st.second_variation.unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(st.tangent.as_deref(), Some(&[0.0, 0.0][..]));
        assert!(st.malliavin.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let sys = cubic();
        let cfg = SchemeConfig::default();
        let rec = simulate_path(&sys, &[0.7], 0.0, None, &cfg, RngStream::new(1, 0), &mut []).unwrap();
        assert_eq!(rec.final_state, AugmentedState::new(&[0.7], &cfg));
        assert_eq!(rec.n_steps, 0);
    }

    #[test]
    fn paths_are_bit_reproducible() {
        let sys = cubic();
        let dir = ParamDirection::forcing(&sys, &[1.0]).unwrap();
        let cfg = SchemeConfig::default().tracking_all();
        let run = || {
            simulate_path(&sys, &[0.3], 2.0, Some(&dir), &cfg, RngStream::new(11, 4), &mut [])
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cubic_from_far_returns() {
        let sys = cubic();
        let cfg = SchemeConfig::default();
        let mut rec = SnapshotRecorder::new(vec![1.0, 2.0, 5.0]);
        let mut mon = MomentMonitor::new(0.05, 3, cfg.dt);
        simulate_path(&sys, &[10.0], 5.0, None, &cfg, RngStream::new(5, 0), &mut [&mut rec, &mut mon])
            .unwrap();
        assert_eq!(rec.snapshots.len(), 3);
        assert!(rec.snapshots[1..].iter().all(|s| s.x[0].abs() <= 2.0 + 1.0));
        assert!(rec.snapshots.iter().any(|s| s.x[0].abs() <= 2.0));
        assert!(!mon.report().diverged);
        assert!((mon.report().max_norm - 10.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_carries_last_state() {
        // anti-dissipative cubic without noise escapes in finite time
        let sys = PolySystem::from_monomials(
            1,
            3,
            &[mono(0, &[0, 0, 0], 1.0)],
            DMatrix::from_element(1, 1, 0.0),
        )
        .unwrap();
        let cfg = SchemeConfig::with_dt(0.5);
        let err = simulate_path(&sys, &[10.0], 1e9, None, &cfg, RngStream::new(0, 3), &mut [])
            .unwrap_err();
        match err {
            Error::Divergence {
                stream, last_state, ..
            } => {
                assert_eq!(stream, 3);
                assert!(last_state[0].is_finite() && last_state[0] > 10.0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ou_malliavin_closed_form() {
        let sys = ou(1.0, 1.0);
        let mut cfg = SchemeConfig::default();
        cfg.track_malliavin = true;
        let rec =
            simulate_path(&sys, &[0.0], 1.0, None, &cfg, RngStream::new(3, 0), &mut []).unwrap();
        let m = rec.final_state.malliavin.unwrap()[0];
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!(((m - exact) / exact).abs() < 5e-3, "{m}");
    }

    #[test]
    fn linear_jacobian_matches_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, -0.3, -0.8]);
        let terms: Vec<Monomial> = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| mono(i, &[j], a[(i, j)]))
            .collect();
        let sys = PolySystem::from_monomials(2, 1, &terms, DMatrix::identity(2, 2) * 0.3).unwrap();
        let mut cfg = SchemeConfig::default();
        cfg.track_jacobian = true;
        let rec = simulate_path(&sys, &[0.1, 0.1], 1.0, None, &cfg, RngStream::new(1, 0), &mut [])
            .unwrap();
        let j = rec.final_state.jacobian_matrix().unwrap();
        let exp = a.exp();
        assert!((&j - &exp).norm() / exp.norm() < 1e-2);
    }

    #[test]
    fn malliavin_stays_symmetric_psd() {
        let sys = PolySystem::from_monomials(
            2,
            2,
            &[mono(0, &[0], -1.0), mono(1, &[1], -1.0), mono(1, &[0, 0], 1.0)],
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let mut cfg = SchemeConfig::default();
        cfg.track_malliavin = true;
        let mut stepper = Stepper::new(&sys, None, &cfg).unwrap();
        let mut st = AugmentedState::new(&[0.5, -0.5], &cfg);
        let rng = RngStream::new(8, 0);
        for _ in 0..1000 {
            stepper.step(&mut st, &rng).unwrap();
            let m = st.malliavin_matrix().unwrap();
            assert!((m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12);
            let eig = SymmetricEigen::new(m).eigenvalues;
            assert!(eig.iter().all(|&e| e >= -1e-12));
        }
    }

    #[test]
    fn ou_stationary_variance() {
        let sys = ou(1.0, 1.0);
        let cfg = SchemeConfig::with_dt(1e-2);
        let ens = StationaryConfig {
            burn_in: 5.0,
            thinning: 1.0,
            n_streams: 200,
            x0: None,
        };
        let e = sample_stationary(&sys, &cfg, &ens, 20_000, 9).unwrap();
        assert_eq!(e.len(), 20_000);
        let sq: Running = e.samples.iter().map(|x| x[0] * x[0]).collect();
        // variance of the numerical scheme differs from 0.5 by O(dt)
        assert!((sq.mean() - 0.5).abs() < 3.0 * sq.std_error() + 0.01, "{}", sq.mean());
        let empty = sample_stationary(&sys, &cfg, &ens, 0, 9).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn constant_observable_gradient_is_zero() {
        let sys = cubic();
        let g = pathwise_gradient(
            &sys,
            &[0.2],
            0.5,
            &Observable::Constant { value: 3.0 },
            100,
            &SchemeConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(g.mean, vec![0.0]);
        assert_eq!(g.stderr, vec![0.0]);
    }

    #[test]
    fn malliavin_requires_tracking() {
        let st = AugmentedState::new(&[0.0], &SchemeConfig::default());
        assert!(malliavin_spectrum(&[st], &[1.0]).is_err());
    }
}
