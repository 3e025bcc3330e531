//! Empirical probes of weighted contraction and minorization for SDEs.
//!
//! Distances use the weights `V(x) = 1 + β e^{η‖x‖²}`, `W(x) = δ⁻¹ e^{η‖x‖²}`
//! and the capped distance `d̂(x, y) = δ⁻¹ ρ_W(x, y) ∧ (2 + βV(x) + βV(y))`.
//! `ρ_W` is replaced by the weighted length of the straight chord, which
//! bounds the infimum over curves from above.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{lane_streams, par_indexed, LaneState, LaneStepper, SchemeConfig, LANES};
use crate::poly_system::PolySystem;
use crate::rng::{derive_seed, purpose, RngStream, StreamCursor};
use crate::stats::{clopper_pearson_lower, Running};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    /// `η = 0` gives constant weights.
    pub eta: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            beta: 0.1,
            delta: 0.1,
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

impl WeightConfig {
    /// Default weights with `η = 0.05 / max(1, energy)`, where `energy` is
    /// the mean of `‖x‖²` under the invariant measure.
    pub fn scaled(energy: f64) -> Self {
        Self {
            eta: 0.05 / energy.max(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("weights.eta", "eta must be finite and >= 0"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("weights.beta", "beta must lie in (0, 1]"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("weights.delta", "delta must be positive"));
        }
        Ok(())
    }

    fn exponent(&self, x: &[f64]) -> f64 {
        self.eta * norm2(x)
    }

    pub fn log_v(&self, x: &[f64]) -> f64 {
        log_add_exp(0.0, self.beta.ln() + self.exponent(x))
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        1.0 + self.beta * self.exponent(x).exp()
    }

    pub fn w(&self, x: &[f64]) -> f64 {
        self.exponent(x).exp() / self.delta
    }

    pub fn u(&self, x: &[f64]) -> f64 {
        self.v(x) + (2.0 * self.exponent(x)).exp()
    }

    /// `ln(2 + βV(x) + βV(y))`.
    pub fn log_cap(&self, x: &[f64], y: &[f64]) -> f64 {
        let b = self.beta.ln();
        let base = (2.0 + 2.0 * self.beta).ln();
        let lx = 2.0 * b + self.exponent(x);
        let ly = 2.0 * b + self.exponent(y);
        log_add_exp(base, log_add_exp(lx, ly))
    }

    /// Radius of the sublevel set `{V ≤ level}`; infinite when `η = 0` and
    /// the level exceeds `1 + β`.
    pub fn sublevel_radius(&self, level: f64) -> f64 {
        let r = ((level - 1.0) / self.beta).ln();
        if r < 0.0 {
            0.0
        } else if self.eta == 0.0 {
            f64::INFINITY
        } else {
            (r / self.eta).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub value: f64,
    /// Chord quadrature of `ρ_W`, an upper bound on the metric.
    pub rho_w_upper_bound: f64,
    pub cap: f64,
    /// The chord branch attains the minimum.
    pub chord_branch: bool,
}

/// Trapezoid quadrature of `∫_0^1 W(x + s(y − x)) ds · ‖y − x‖` in log space.
fn log_chord(x: &[f64], y: &[f64], cfg: &WeightConfig, quad_points: usize) -> f64 {
    let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).collect();
    let len = norm2(&diff).sqrt();
    if len == 0.0 {
        return f64::NEG_INFINITY;
    }
    let n = quad_points - 1;
    let h = 1.0 / n as f64;
    let mut z = vec![0.0; x.len()];
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=n {
        let s = k as f64 * h;
        for ((zi, xi), di) in z.iter_mut().zip(x).zip(&diff) {
            *zi = xi + s * di;
        }
        let wgt = if k == 0 || k == n { 0.5 * h } else { h };
        acc = log_add_exp(acc, wgt.ln() + cfg.exponent(&z));
    }
    acc + len.ln() - cfg.delta.ln()
}

pub fn weighted_distance(
    x: &[f64],
    y: &[f64],
    cfg: &WeightConfig,
    quad_points: usize,
) -> Result<DistanceReport> {
    cfg.validate()?;
    if quad_points < 2 {
        return Err(Error::config("quad_points", "need at least 2 quadrature points"));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension("points of different dimension".into()));
    }
    let log_rho = log_chord(x, y, cfg, quad_points);
    let log_chord_branch = log_rho - cfg.delta.ln();
    let log_cap = cfg.log_cap(x, y);
    let chord_branch = log_chord_branch <= log_cap;
    let value = log_chord_branch.min(log_cap).exp();
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "weighted distance overflows (log value {})",
            log_chord_branch.min(log_cap)
        )));
    }
    Ok(DistanceReport {
        value,
        rho_w_upper_bound: log_rho.exp(),
        cap: log_cap.exp(),
        chord_branch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Nearby pairs, where the chord branch is active.
    Close,
    /// Distant pairs outside the sublevel set, `V(x) + V(y)` large.
    FarHighEnergy,
    /// Distant pairs inside the sublevel set.
    FarSublevel,
    /// Caller-supplied pairs.
    Supplied,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub x_star: Vec<f64>,
    /// Radius `ε` of the target ball around `x_star`.
    pub eps: f64,
    /// Sublevel bound `C` of `V`.
    pub level: f64,
    /// Pairs per regime.
    pub n_pairs: usize,
    pub horizon: f64,
    /// Radius of the start region; the radius of `{V ≤ C}` when absent.
    pub radius: Option<f64>,
    /// Regime-(i) pairs start at this fraction of the largest separation
    /// for which the chord branch of `d̂` is active.
    pub close_fraction: f64,
    /// High-energy pairs start where `V = far_level_factor · C`.
    pub far_level_factor: f64,
    /// Independent noise replicas averaged per pair.
    pub replicas: usize,
    pub quad_points: usize,
    /// Samples per start in the minorization probe.
    pub samples_per_start: usize,
    /// One-sided confidence level of the Clopper–Pearson bound.
    pub confidence: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            x_star: vec![0.0],
            eps: 1.0,
            level: 2.0,
            n_pairs: 64,
            horizon: 1.0,
            radius: None,
            close_fraction: 0.5,
            far_level_factor: 4.0,
            replicas: 256,
            quad_points: 33,
            samples_per_start: 1000,
            confidence: 0.95,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config("probe.eps", "eps must be positive"));
        }
        if !(self.level > 1.0) {
            return Err(Error::config("probe.level", "level C must exceed 1"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("probe.horizon", "horizon must be positive"));
        }
        if self.replicas == 0 {
            return Err(Error::config("probe.replicas", "need at least one replica"));
        }
        if self.quad_points < 2 {
            return Err(Error::config("probe.quad_points", "need at least 2 points"));
        }
        if !(self.close_fraction > 0.0 && self.close_fraction < 1.0) {
            return Err(Error::config("probe.close_fraction", "must lie in (0, 1)"));
        }
        if !(self.far_level_factor > 1.0) {
            return Err(Error::config("probe.far_level_factor", "must exceed 1"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config("probe.confidence", "confidence must lie in (0, 1)"));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::config("probe.radius", "radius must be positive"));
            }
        }
        Ok(())
    }

    fn start_radius(&self, w: &WeightConfig) -> Result<f64> {
        let r = self.radius.unwrap_or_else(|| w.sublevel_radius(self.level));
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::config(
                "probe.radius",
                format!("the sublevel set {{V <= {}}} has radius {r}; set probe.radius", self.level),
            ));
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub n_supplied: usize,
    /// Pairs with `d̂(x_0, y_0) = 0`.
    pub n_skipped: usize,
    /// Per pair, `E d̂(x_t, y_t) / d̂(x_0, y_0)` over the replicas.
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub ratio_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub weights: WeightConfig,
    pub horizon: f64,
    pub regimes: Vec<RegimeReport>,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    /// Every probed ratio is below 1.
    pub contracts: bool,
    /// The chord term is an upper bound on `ρ_W`.
    pub distance_is_upper_bound: bool,
}

fn summarize(regime: Regime, n_supplied: usize, ratios: Vec<f64>) -> RegimeReport {
    let stats: Running = ratios.iter().copied().collect();
    RegimeReport {
        regime,
        n_supplied,
        n_skipped: n_supplied - ratios.len(),
        mean_ratio: if ratios.is_empty() { f64::NAN } else { stats.mean() },
        max_ratio: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ratio_variance: if ratios.len() > 1 { stats.variance() } else { 0.0 },
        ratios,
    }
}

/// Evolve each pair under synchronous coupling and average the distance
/// ratio over `replicas` independent noise realisations. Replica `r` of pair
/// `p` drives both trajectories with stream `p·replicas + r` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn coupled_ratios(
    sys: &PolySystem,
    weights: &WeightConfig,
    pairs: &[(Vec<f64>, Vec<f64>)],
    horizon: f64,
    replicas: usize,
    quad_points: usize,
    scheme: &SchemeConfig,
    seed: u64,
    regime: Regime,
) -> Result<RegimeReport> {
    weights.validate()?;
    if replicas == 0 {
        return Err(Error::config("probe.replicas", "need at least one replica"));
    }
    let d = sys.dim();
    if let Some(k) = pairs.iter().position(|(x, y)| x.len() != d || y.len() != d) {
        return Err(Error::Dimension(format!("pair {k} does not match the system dimension")));
    }
    let initial = pairs
        .iter()
        .map(|(x, y)| weighted_distance(x, y, weights, quad_points).map(|r| r.value))
        .collect::<Result<Vec<f64>>>()?;
    let live: Vec<usize> = (0..pairs.len()).filter(|&p| initial[p] > 0.0).collect();
    let scheme = scheme.clone().state_only();
    let n_steps = scheme.steps_for(horizon);
    let n_jobs = live.len() * replicas;
    let finals = par_indexed(n_jobs.div_ceil(LANES), |g| {
        let first = g * LANES;
        let count = (n_jobs - first).min(LANES);
        let pair_of = |j: usize| live[j / replicas];
        let xs: Vec<&[f64]> = (first..first + count).map(|j| pairs[pair_of(j)].0.as_slice()).collect();
        let ys: Vec<&[f64]> = (first..first + count).map(|j| pairs[pair_of(j)].1.as_slice()).collect();
        let streams: [RngStream; LANES] = std::array::from_fn(|l| {
            let j = first + l.min(count - 1);
            RngStream::new(seed, (pair_of(j) * replicas + j % replicas) as u32)
        });
        let mut stepper = LaneStepper::new(sys, None, &scheme)?;
        let mut sx = LaneState::new(&xs, false);
        let mut sy = LaneState::new(&ys, false);
        for _ in 0..n_steps {
            stepper.step(&mut sx, &streams)?;
            stepper.step(&mut sy, &streams)?;
        }
        (0..count)
            .map(|l| weighted_distance(&sx.lane_x(l), &sy.lane_x(l), weights, quad_points).map(|r| r.value))
            .collect::<Result<Vec<f64>>>()
    })?;
    let finals: Vec<f64> = finals.into_iter().flatten().collect();
    let ratios = live
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let sum: f64 = finals[k * replicas..(k + 1) * replicas].iter().sum();
            sum / replicas as f64 / initial[p]
        })
        .collect();
    Ok(summarize(regime, pairs.len(), ratios))
}

fn uniform_in_ball(cur: &mut StreamCursor, dim: usize, radius: f64) -> Vec<f64> {
    let dir = cur.next_unit_vector(dim);
    let r = radius * cur.next_uniform().powf(1.0 / dim as f64);
    dir.into_iter().map(|v| v * r).collect()
}

/// Draw the three pair families.
fn draw_pairs(
    dim: usize,
    weights: &WeightConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<[Vec<(Vec<f64>, Vec<f64>)>; 3]> {
    let radius = probe.start_radius(weights)?;
    let mut cur = StreamCursor::new(RngStream::new(derive_seed(seed, purpose::PROBE_POINTS), 0));
    let close = (0..probe.n_pairs)
        .map(|_| {
            let x = uniform_in_ball(&mut cur, dim, radius);
            let u = cur.next_unit_vector(dim);
            // δ⁻¹ρ_W ≈ δ⁻¹ W(x) s near x; solve for the branch boundary
            let sep = probe.close_fraction * weights.log_cap(&x, &x).exp() * weights.delta
                / weights.w(&x);
            let y = x.iter().zip(&u).map(|(a, b)| a + sep * b).collect();
            (x, y)
        })
        .collect();
    let far_radius = match weights.sublevel_radius(probe.far_level_factor * probe.level) {
        r if r.is_finite() && r > radius => r,
        _ => 2.0 * radius,
    };
    let high = (0..probe.n_pairs)
        .map(|_| {
            let u = cur.next_unit_vector(dim);
            let v = cur.next_unit_vector(dim);
            let x: Vec<f64> = u.iter().map(|a| a * far_radius).collect();
            // keep the partner away from x
            let mut y: Vec<f64> = v.iter().map(|a| a * far_radius).collect();
            if norm2(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>()) < far_radius * far_radius {
                y = x.iter().map(|a| -a).collect();
            }
            (x, y)
        })
        .collect();
    let sublevel = (0..probe.n_pairs)
        .map(|_| loop {
            let x = uniform_in_ball(&mut cur, dim, radius);
            let y = uniform_in_ball(&mut cur, dim, radius);
            let sep: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            if sep >= radius * radius {
                break (x, y);
            }
        })
        .collect();
    Ok([close, high, sublevel])
}

/// Synchronous-coupling contraction probe over the three pair regimes.
pub fn contraction_estimate(
    sys: &PolySystem,
    weights: &WeightConfig,
    probe: &ProbeConfig,
    scheme: &SchemeConfig,
    seed: u64,
) -> Result<ContractionReport> {
    weights.validate()?;
    probe.validate()?;
    let families = draw_pairs(sys.dim(), weights, probe, seed)?;
    let coupling_seed = derive_seed(seed, purpose::COUPLING);
    let mut regimes = Vec::new();
    for (k, (pairs, regime)) in families
        .iter()
        .zip([Regime::Close, Regime::FarHighEnergy, Regime::FarSublevel])
        .enumerate()
    {
        regimes.push(coupled_ratios(
            sys,
            weights,
            pairs,
            probe.horizon,
            probe.replicas,
            probe.quad_points,
            scheme,
            derive_seed(coupling_seed, k as u64),
            regime,
        )?);
    }
    let all: Vec<f64> = regimes.iter().flat_map(|r| r.ratios.iter().copied()).collect();
    let max_ratio = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ContractionReport {
        weights: weights.clone(),
        horizon: probe.horizon,
        mean_ratio: all.iter().sum::<f64>() / all.len().max(1) as f64,
        max_ratio,
        contracts: !all.is_empty() && max_ratio < 1.0,
        distance_is_upper_bound: true,
        regimes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartHits {
    pub start: Vec<f64>,
    pub hits: u64,
    pub trials: u64,
    pub probability: f64,
    pub lower_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorizationReport {
    pub starts: Vec<StartHits>,
    pub min_probability: f64,
    /// Clopper–Pearson lower bound at the start with the fewest hits.
    pub alpha_hat: f64,
    pub confidence: f64,
    /// Starts that never reached the ball.
    pub zero_hit_starts: usize,
    pub pass: bool,
}

/// Grid of about `n` points covering the ball of radius `radius`.
pub fn ball_grid(dim: usize, radius: f64, n: usize) -> Vec<Vec<f64>> {
    let per_axis = ((n as f64).powf(1.0 / dim as f64).ceil() as usize).max(2);
    let coord = |k: usize| -radius + 2.0 * radius * k as f64 / (per_axis - 1) as f64;
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            (0..dim)
                .map(|_| {
                    let c = coord(idx % per_axis);
                    idx /= per_axis;
                    c
                })
                .collect::<Vec<f64>>()
        })
        .filter(|x| norm2(x) <= radius * radius * (1.0 + 1e-12))
        .collect()
}

/// Monte Carlo estimate of `P_t(x, B_ε(x⋆))` from a grid of starts covering
/// the sublevel set.
pub fn minorization_probe(
    sys: &PolySystem,
    weights: &WeightConfig,
    probe: &ProbeConfig,
    n_starts: usize,
    scheme: &SchemeConfig,
    seed: u64,
) -> Result<MinorizationReport> {
    probe.validate()?;
    let d = sys.dim();
    if probe.x_star.len() != d {
        return Err(Error::Dimension("x_star does not match the system dimension".into()));
    }
    if n_starts == 0 || probe.samples_per_start == 0 {
        return Err(Error::config("probe", "need starts and samples"));
    }
    let starts = ball_grid(d, probe.start_radius(weights)?, n_starts);
    let scheme = scheme.clone().state_only();
    let n_steps = scheme.steps_for(probe.horizon);
    let trials = probe.samples_per_start as u64;
    let base = derive_seed(seed, purpose::MINORIZATION);
    let eps2 = probe.eps * probe.eps;
    let alpha = 1.0 - probe.confidence;
    let results = par_indexed(starts.len(), |k| {
        let mut stepper = LaneStepper::new(sys, None, &scheme)?;
        let stream_seed = derive_seed(base, k as u64);
        let mut hits = 0u64;
        let mut first = 0;
        while first < probe.samples_per_start {
            let count = (probe.samples_per_start - first).min(LANES);
            let streams = lane_streams(stream_seed, first, count);
            let mut st = LaneState::new(&vec![starts[k].as_slice(); count], false);
            for _ in 0..n_steps {
                stepper.step(&mut st, &streams)?;
            }
            for l in 0..count {
                let dist2: f64 = (0..d).map(|i| (st.x[i][l] - probe.x_star[i]).powi(2)).sum();
                if dist2 < eps2 {
                    hits += 1;
                }
            }
            first += count;
        }
        Ok(StartHits {
            start: starts[k].clone(),
            hits,
            trials,
            probability: hits as f64 / trials as f64,
            lower_bound: clopper_pearson_lower(hits, trials, alpha),
        })
    })?;
    let worst = results
        .iter()
        .min_by(|a, b| a.hits.cmp(&b.hits))
        .expect("grid is never empty");
    let alpha_hat = worst.lower_bound;
    Ok(MinorizationReport {
        min_probability: worst.probability,
        alpha_hat,
        confidence: probe.confidence,
        zero_hit_starts: results.iter().filter(|r| r.hits == 0).count(),
        pass: alpha_hat > 0.0,
        starts: results,
    })
}
