//! The run configuration document.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gap_probe::{ProbeConfig, WeightConfig};
use crate::integrator::SchemeConfig;
use crate::markov_testbed::{ChainFamily, ChainWeights};
use crate::observable::Observable;
use crate::poly_system::{
    Monomial, ParamDirection, PolySystem, SpanSampling, DEFAULT_PROBE_RADII,
};
use crate::presets::{self, TriadParams};
use crate::response::{CurrentSpec, FdConfig, Method, ResponseConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Check,
    Simulate,
    Response,
    Oracle,
    Testbed,
    GapProbe,
    Compare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Simulate => "simulate",
            Command::Response => "response",
            Command::Oracle => "oracle",
            Command::Testbed => "testbed",
            Command::GapProbe => "gap-probe",
            Command::Compare => "compare",
        }
    }
}

/// A catalog preset or an explicit polynomial system. Matrices are lists of
/// rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "preset", deny_unknown_fields)]
pub enum SystemSpec {
    ScalarCubic {
        #[serde(default = "one")]
        sigma: f64,
    },
    OuNd { a: Vec<Vec<f64>>, sigma: Vec<Vec<f64>> },
    Triad {
        #[serde(default = "triad_b")]
        b: [f64; 3],
        #[serde(default = "triad_gamma")]
        gamma: [f64; 3],
        #[serde(default = "triad_sigma")]
        sigma: f64,
    },
    HypoellipticPair,
    Explicit {
        dim: usize,
        degree: usize,
        monomials: Vec<Monomial>,
        sigma: Vec<Vec<f64>>,
    },
}

fn one() -> f64 {
    1.0
}

fn triad_b() -> [f64; 3] {
    TriadParams::default().b
}

fn triad_gamma() -> [f64; 3] {
    TriadParams::default().gamma
}

fn triad_sigma() -> f64 {
    TriadParams::default().sigma
}

fn matrix(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Err(Error::config(path, "matrix must be non-empty"));
    }
    if let Some(k) = rows.iter().position(|r| r.len() != m) {
        return Err(Error::config(format!("{path}[{k}]"), format!("row length differs from {m}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(path, "entries must be finite"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl SystemSpec {
    pub fn build(&self) -> Result<PolySystem> {
        match self {
            SystemSpec::ScalarCubic { sigma } => Ok(presets::scalar_cubic(*sigma)),
            SystemSpec::OuNd { a, sigma } => {
                presets::ou(&matrix(a, "system.a")?, matrix(sigma, "system.sigma")?)
            }
            SystemSpec::Triad { b, gamma, sigma } => presets::triad(&TriadParams {
                b: *b,
                gamma: *gamma,
                sigma: *sigma,
            }),
            SystemSpec::HypoellipticPair => Ok(presets::hypoelliptic_pair()),
            SystemSpec::Explicit {
                dim,
                degree,
                monomials,
                sigma,
            } => PolySystem::from_monomials(*dim, *degree, monomials, matrix(sigma, "system.sigma")?),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemSpec::ScalarCubic { .. } => "scalar_cubic",
            SystemSpec::OuNd { .. } => "ou_nd",
            SystemSpec::Triad { .. } => "triad",
            SystemSpec::HypoellipticPair => "hypoelliptic_pair",
            SystemSpec::Explicit { .. } => "explicit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DirectionSpec {
    /// Constant forcing `δN = e`.
    Forcing { e: Vec<f64> },
    /// Polynomial drift change plus an optional noise change.
    Parts {
        #[serde(default)]
        monomials: Vec<Monomial>,
        delta_sigma: Option<Vec<Vec<f64>>>,
    },
}

impl DirectionSpec {
    pub fn build(&self, sys: &PolySystem) -> Result<ParamDirection> {
        match self {
            DirectionSpec::Forcing { e } => ParamDirection::forcing(sys, e),
            DirectionSpec::Parts { monomials, delta_sigma } => {
                let ds = match delta_sigma {
                    Some(rows) => matrix(rows, "direction.delta_sigma")?,
                    None => DMatrix::zeros(sys.dim(), sys.noise_channels()),
                };
                ParamDirection::from_parts(sys, monomials, ds)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub n_directions: usize,
    pub radii: Vec<f64>,
    pub coercivity_tol: f64,
    pub span_tol: f64,
    pub span_sampling: SpanSampling,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            n_directions: 256,
            radii: DEFAULT_PROBE_RADII.to_vec(),
            coercivity_tol: 1e-10,
            span_tol: 1e-10,
            span_sampling: SpanSampling::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n_samples: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { n_samples: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponseSection {
    pub methods: Vec<Method>,
    /// Required when Green–Kubo is requested.
    pub current: Option<CurrentSpec>,
    pub fd: FdConfig,
}

impl Default for ResponseSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Tangent],
            current: None,
            fd: FdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFamily {
    pub states: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestbedSection {
    #[serde(rename = "P0")]
    pub p0: Option<Vec<Vec<f64>>>,
    #[serde(rename = "dP")]
    pub dp: Option<Vec<Vec<f64>>>,
    pub a0: f64,
    /// Used when no explicit matrices are given.
    pub random: Option<RandomFamily>,
    /// Observable as a vector over states; the last-state indicator when
    /// absent.
    pub phi: Option<Vec<f64>>,
    /// Largest power `m` of the formula evaluated.
    pub max_power: usize,
    /// State weights; all ones when absent.
    pub v: Option<Vec<f64>>,
    pub a_list: Vec<f64>,
    pub fd_steps: Vec<f64>,
}

impl Default for TestbedSection {
    fn default() -> Self {
        Self {
            p0: None,
            dp: None,
            a0: 0.0,
            random: None,
            phi: None,
            max_power: 3,
            v: None,
            a_list: vec![1e-1, -1e-1, 1e-2, -1e-2, 1e-3, -1e-3],
            fd_steps: vec![1e-2, 1e-3, 1e-4],
        }
    }
}

impl TestbedSection {
    pub fn family(&self) -> Result<ChainFamily> {
        match (&self.p0, &self.dp, &self.random) {
            (Some(p0), dp, _) => {
                let p0 = matrix(p0, "testbed.P0")?;
                let dp = match dp {
                    Some(rows) => matrix(rows, "testbed.dP")?,
                    None => DMatrix::zeros(p0.nrows(), p0.ncols()),
                };
                ChainFamily::new(p0, dp, self.a0)
            }
            (None, Some(_), _) => Err(Error::config("testbed.dP", "dP given without P0")),
            (None, None, Some(r)) => ChainFamily::random(r.states, r.seed),
            (None, None, None) => Err(Error::config("testbed", "give P0 (and dP) or a random family")),
        }
    }

    pub fn phi(&self, states: usize) -> Result<Vec<f64>> {
        match &self.phi {
            Some(p) if p.len() != states => {
                Err(Error::config("testbed.phi", format!("expected {states} entries")))
            }
            Some(p) => Ok(p.clone()),
            None => Ok((0..states).map(|i| if i + 1 == states { 1.0 } else { 0.0 }).collect()),
        }
    }

    pub fn weights(&self, states: usize) -> Result<ChainWeights> {
        match &self.v {
            Some(v) if v.len() != states => {
                Err(Error::config("testbed.v", format!("expected {states} entries")))
            }
            Some(v) => ChainWeights::new(v.clone()),
            None => Ok(ChainWeights::uniform(states)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapProbeSection {
    /// Explicit weights; otherwise the defaults scaled by the stationary
    /// mean of `‖x‖²`.
    pub weights: Option<WeightConfig>,
    pub probe: ProbeConfig,
    pub n_starts: usize,
    /// Stationary samples used for the energy scale.
    pub energy_samples: usize,
}

impl Default for GapProbeSection {
    fn default() -> Self {
        Self {
            weights: None,
            probe: ProbeConfig::default(),
            n_starts: 21,
            energy_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub system: Option<SystemSpec>,
    pub direction: Option<DirectionSpec>,
    pub observable: Option<Observable>,
    #[serde(default)]
    pub scheme: SchemeConfig,
    /// Path counts, horizon, batching and the stationary burn-in.
    #[serde(default)]
    pub ensemble: ResponseConfig,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub response: ResponseSection,
    #[serde(default)]
    pub testbed: TestbedSection,
    #[serde(default)]
    pub gap_probe: GapProbeSection,
    #[serde(default)]
    pub master_seed: u64,
    pub output: Option<String>,
}

/// Turn serde's "unknown field `x`, expected one of `a`, `b`" into a
/// suggestion of the closest expected name.
fn suggestion(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    let (unknown, tail) = rest.split_once('`')?;
    let candidates: Vec<&str> = tail.split('`').skip(1).step_by(2).collect();
    candidates
        .into_iter()
        .map(|c| (strsim::damerau_levenshtein(unknown, c), c))
        .filter(|(d, c)| *d <= 2.max(c.len() / 3))
        .min()
        .map(|(_, c)| c.to_string())
}

fn field_path(path: &serde_path_to_error::Path) -> String {
    let s = path.to_string();
    if s == "." {
        "<root>".into()
    } else {
        s
    }
}

/// Parse and validate a configuration document.
pub fn load_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = field_path(e.path());
        let inner = e.into_inner();
        let mut message = inner.to_string();
        if let Some(s) = suggestion(&message) {
            message.push_str(&format!("; did you mean `{s}`?"));
        }
        Error::config(path, message)
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

fn require<'a, T>(v: &'a Option<T>, path: &str, cmd: Command) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::config(path, format!("required by command `{}`", cmd.name())))
}

/// Checks that need the built objects: system and direction compatibility,
/// matrix validity, section constraints of the chosen command.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.scheme.validate()?;
    let cmd = cfg.command;
    if cmd == Command::Testbed {
        let fam = cfg.testbed.family()?;
        let s = fam.states();
        cfg.testbed.phi(s)?;
        cfg.testbed.weights(s)?;
        if cfg.testbed.max_power == 0 {
            return Err(Error::config("testbed.max_power", "must be at least 1"));
        }
        return Ok(());
    }
    let sys = require(&cfg.system, "system", cmd)?.build()?;
    let needs_direction = matches!(cmd, Command::Response | Command::Compare);
    if needs_direction {
        let dir = require(&cfg.direction, "direction", cmd)?.build(&sys)?;
        dir.check_compatible(&sys)?;
        require(&cfg.observable, "observable", cmd)?.check_dim(sys.dim())?;
        cfg.ensemble.validate()?;
        let methods = &cfg.response.methods;
        if methods.is_empty() {
            return Err(Error::config("response.methods", "list at least one method"));
        }
        if cmd == Command::Compare && methods.len() < 2 {
            return Err(Error::config("response.methods", "compare needs at least two methods"));
        }
        if methods.contains(&Method::GreenKubo) && cfg.response.current.is_none() {
            return Err(Error::config("response.current", "required by the green-kubo method"));
        }
    } else if let Some(d) = &cfg.direction {
        d.build(&sys)?;
    }
    match cmd {
        Command::Oracle => {
            if sys.degree() != 1 || sys.maps()[0].coeffs().iter().any(|c| *c != 0.0) {
                return Err(Error::config("system", "the oracle needs a linear system dx = Ax dt + Σ dW"));
            }
        }
        Command::GapProbe => {
            if let Some(w) = &cfg.gap_probe.weights {
                w.validate()?;
            }
            cfg.gap_probe.probe.validate()?;
            if cfg.gap_probe.probe.x_star.len() != sys.dim() {
                return Err(Error::config("gap_probe.probe.x_star", "length differs from the system dimension"));
            }
            if cfg.gap_probe.n_starts == 0 {
                return Err(Error::config("gap_probe.n_starts", "must be at least 1"));
            }
        }
        Command::Simulate => {
            if cfg.simulate.n_samples == 0 {
                return Err(Error::config("simulate.n_samples", "must be at least 1"));
            }
        }
        _ => {}
    }
    Ok(())
}
