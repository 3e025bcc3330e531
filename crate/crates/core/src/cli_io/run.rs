//! Command dispatch and the command-line entry point.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gap_probe::{contraction_estimate, minorization_probe, WeightConfig};
use crate::integrator::{sample_stationary, stationary_seed};
use crate::markov_testbed::{
    exact_derivative, finite_difference, gap_and_lipschitz_report, linear_response_formula, stationary,
};
use crate::poly_system::{coercivity_probe, hypoellipticity_span, PolySystem};
use crate::response::{
    compare_estimates, finite_difference_oracle, green_kubo_response, lyapunov::lyapunov_residual,
    ou_mean_response, stationary_covariance_reference, tangent_response, Method, ResponseCurve,
};

use super::config::{load_config, Command, RunConfig};
use super::report::{to_value, write_report, Cell, Report, Table};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_ASSUMPTION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Dimension(_) | Error::Json(_) | Error::Unsupported(_) => EXIT_CONFIG,
        Error::AssumptionFailed(_) | Error::NonUnique(_) => EXIT_ASSUMPTION,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Numerical(_) | Error::IllConditioned(_) | Error::Io(_) => EXIT_RUNTIME,
    }
}

/// A finished run. `verdict_failed` marks a completed check whose verdict
/// is negative.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub verdict_failed: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.verdict_failed {
            EXIT_ASSUMPTION
        } else {
            EXIT_OK
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn curve_table(name: &str, c: &ResponseCurve) -> Table {
    let mut t = Table::new(name, &["t", "R", "stderr"]);
    for i in 0..c.times.len() {
        t.rows.push(vec![Cell::Num(c.times[i]), Cell::Num(c.values[i]), Cell::Num(c.stderr[i])]);
    }
    t
}

fn system(cfg: &RunConfig) -> Result<PolySystem> {
    cfg.system
        .as_ref()
        .ok_or_else(|| Error::config("system", "missing"))?
        .build()
}

/// Execute a validated configuration.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let echo = RunConfig {
        output: None,
        ..cfg.clone()
    };
    let mut report = Report::new(cfg.command.name(), to_value(&echo)?);
    let mut verdict_failed = false;
    match cfg.command {
        Command::Check => {
            let sys = system(cfg)?;
            let c = &cfg.check;
            let coercivity = coercivity_probe(&sys, c.n_directions, &c.radii, c.coercivity_tol)?;
            let span = hypoellipticity_span(&sys, c.span_tol, c.span_sampling)?;
            let pass = coercivity.pass && span.full_rank;
            verdict_failed = !pass;
            report.results.push(json!({
                "coercivity": to_value(&coercivity)?,
                "hypoellipticity": to_value(&span)?,
                "pass": pass,
            }));
        }
        Command::Simulate => {
            let sys = system(cfg)?;
            let ens = sample_stationary(
                &sys,
                &cfg.scheme,
                &cfg.ensemble.stationary,
                cfg.simulate.n_samples,
                stationary_seed(cfg.master_seed),
            )?;
            report.results.push(json!({
                "n_samples": ens.len(),
                "mean": ens.mean(),
                "covariance": rows(&ens.covariance()),
                "provenance": to_value(&ens.provenance)?,
            }));
            let mut header = vec!["stream".to_string()];
            header.extend((1..=ens.dim).map(|i| format!("x{i}")));
            let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            let mut t = Table::new("ensemble", &header);
            for (x, s) in ens.samples.iter().zip(&ens.stream_of) {
                let mut row = vec![Cell::Int(u64::from(*s))];
                row.extend(x.iter().map(|v| Cell::Num(*v)));
                t.rows.push(row);
            }
            report.tables.push(t);
        }
        Command::Response | Command::Compare => {
            let sys = system(cfg)?;
            let dir = cfg.direction.as_ref().expect("validated").build(&sys)?;
            let phi = cfg.observable.as_ref().expect("validated");
            let mut ens = cfg.ensemble.clone();
            ens.master_seed = cfg.master_seed;
            let mut estimates = Vec::new();
            for method in &cfg.response.methods {
                match method {
                    Method::Tangent | Method::GreenKubo => {
                        let curve = if *method == Method::Tangent {
                            tangent_response(&sys, &dir, phi, &ens, &cfg.scheme)?
                        } else {
                            let current = cfg.response.current.as_ref().expect("validated");
                            green_kubo_response(&sys, &dir, phi, current, &ens, &cfg.scheme)?
                        };
                        let est = curve.estimate();
                        report.results.push(json!({
                            "method": method.tag(),
                            "estimate": to_value(&est)?,
                            "plateau": to_value(&curve.plateau)?,
                        }));
                        report.tables.push(curve_table(method.tag(), &curve));
                        estimates.push(est);
                    }
                    Method::FiniteDifference => {
                        let fd = finite_difference_oracle(&sys, &dir, phi, &cfg.response.fd, &ens, &cfg.scheme)?;
                        report.results.push(json!({
                            "method": method.tag(),
                            "estimate": to_value(&fd.estimate)?,
                            "half_step": to_value(&fd.half_step)?,
                            "richardson_extrapolated": fd.richardson_extrapolated,
                            "nonlinearity_flag": fd.nonlinearity_flag,
                        }));
                        estimates.push(fd.estimate);
                    }
                }
            }
            if cfg.command == Command::Compare {
                report.results.push(json!({ "comparison": to_value(&compare_estimates(&estimates)?)? }));
            }
        }
        Command::Oracle => {
            let sys = system(cfg)?;
            let d = sys.dim();
            let lin = &sys.maps()[1];
            let a = DMatrix::from_fn(d, d, |i, j| lin.entry(i, &[j]));
            let cov = stationary_covariance_reference(&a, sys.sigma())?;
            let resp = ou_mean_response(&a)?;
            let mut result = json!({
                "drift_matrix": rows(&a),
                "stationary_covariance": rows(&cov),
                "lyapunov_residual": lyapunov_residual(&a, sys.sigma(), &cov),
                "mean_response_matrix": rows(&resp),
            });
            if let Some(spec) = &cfg.direction {
                let dir = spec.build(&sys)?;
                if dir.has_noise_part() || dir.delta_maps().iter().skip(1).any(|m| !m.is_zero()) {
                    return Err(Error::Unsupported("the oracle covers constant forcing only".into()));
                }
                let e: Vec<f64> = dir.eval_drift(&vec![0.0; d]);
                let r = &resp * nalgebra::DVector::from_vec(e);
                result["direction_response"] = json!(r.iter().copied().collect::<Vec<f64>>());
            }
            report.results.push(result);
        }
        Command::Testbed => {
            let tb = &cfg.testbed;
            let fam = tb.family()?;
            let s = fam.states();
            let phi = tb.phi(s)?;
            let weights = tb.weights(s)?;
            let pi = stationary(fam.p0())?;
            let formula = (1..=tb.max_power)
                .map(|m| linear_response_formula(&fam, &phi, m).map(|v| json!({"m": m, "value": v})))
                .collect::<Result<Vec<Value>>>()?;
            let exact = exact_derivative(&fam, &phi)?;
            let mut fd_table = Table::new("finite-difference", &["h", "value", "error"]);
            let mut fds = Vec::new();
            for &h in &tb.fd_steps {
                let v = finite_difference(&fam, &phi, h)?;
                fd_table.rows.push(vec![Cell::Num(h), Cell::Num(v), Cell::Num(v - exact)]);
                fds.push(json!({"h": h, "value": v, "error": v - exact}));
            }
            let gap = gap_and_lipschitz_report(&fam, &weights, &tb.a_list)?;
            report.results.push(json!({
                "states": s,
                "validity": [fam.validity().0, fam.validity().1],
                "stationary": pi.iter().copied().collect::<Vec<f64>>(),
                "formula": formula,
                "exact_derivative": exact,
                "finite_differences": fds,
                "gap": to_value(&gap)?,
            }));
            report.tables.push(fd_table);
        }
        Command::GapProbe => {
            let sys = system(cfg)?;
            let gp = &cfg.gap_probe;
            let (weights, energy) = match &gp.weights {
                Some(w) => (w.clone(), None),
                None => {
                    let ens = sample_stationary(
                        &sys,
                        &cfg.scheme,
                        &cfg.ensemble.stationary,
                        gp.energy_samples,
                        stationary_seed(cfg.master_seed),
                    )?;
                    let e = ens.samples.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
                        / ens.len().max(1) as f64;
                    (WeightConfig::scaled(e), Some(e))
                }
            };
            let contraction = contraction_estimate(&sys, &weights, &gp.probe, &cfg.scheme, cfg.master_seed)?;
            let minor = minorization_probe(&sys, &weights, &gp.probe, gp.n_starts, &cfg.scheme, cfg.master_seed)?;
            let mut ratios = Table::new("ratios", &["regime", "pair", "ratio"]);
            for r in &contraction.regimes {
                let tag = to_value(&r.regime)?.as_str().unwrap_or_default().to_string();
                for (k, v) in r.ratios.iter().enumerate() {
                    ratios.rows.push(vec![Cell::Text(tag.clone()), Cell::Int(k as u64), Cell::Num(*v)]);
                }
            }
            report.results.push(json!({
                "weights": to_value(&weights)?,
                "energy": energy,
                "contraction": to_value(&contraction)?,
                "minorization": to_value(&minor)?,
            }));
            report.tables.push(ratios);
        }
    }
    Ok(Outcome { report, verdict_failed })
}

#[derive(Debug, Parser)]
#[command(name = "fdtlab", version, about = "Linear response laboratory")]
pub struct Cli {
    /// Configuration document (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output path prefix; overrides the document. Without one the report
    /// goes to standard output and no CSV files are written.
    #[arg(long)]
    pub output: Option<String>,
    /// Master seed; overrides the document.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "FDTLAB_THREADS")]
    pub threads: Option<usize>,
}

fn fail(err: &Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(err)
}

/// Parse arguments, run and write artifacts; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return EXIT_CONFIG;
        }
    };
    let mut cfg = match load_config(&text) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if cli.output.is_some() {
        cfg.output = cli.output.clone();
    }
    if cli.threads == Some(0) {
        return fail(&Error::config("--threads", "must be at least 1"));
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    let outcome = match pool.install(|| run(&cfg)) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let runtime = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "threads": pool.current_num_threads(),
        "output": cfg.output,
    });
    match &cfg.output {
        Some(prefix) => match write_report(&outcome.report, prefix, runtime) {
            Ok(files) => {
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
            }
            Err(e) => return fail(&e),
        },
        None => print!("{}", outcome.report.to_json(runtime)),
    }
    if outcome.verdict_failed {
        eprintln!("verdict: assumption check failed");
    }
    outcome.exit_code()
}
