//! Exact linear response on finite state spaces.
//!
//! A family of transition matrices `P_a = P0 + (a − a0) dP` stands in for the
//! Markov semigroup at a fixed time; `m` plays the role of the time multiple.
//! Everything is dense linear algebra.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamCursor};

const ROW_SUM_TOL: f64 = 1e-12;
const UNIT_EIGEN_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

/// Affine family of transition matrices around `a0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainFamily {
    p0: DMatrix<f64>,
    dp: DMatrix<f64>,
    a0: f64,
    validity: (f64, f64),
}

impl ChainFamily {
    pub fn new(p0: DMatrix<f64>, dp: DMatrix<f64>, a0: f64) -> Result<Self> {
        let s = p0.nrows();
        if s == 0 || !p0.is_square() || dp.shape() != (s, s) {
            return Err(Error::Dimension(
                "P0 and dP must be square matrices of the same size".into(),
            ));
        }
        check_stochastic(&p0, "testbed.P0")?;
        for k in 0..s {
            let row = dp.row(k);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("testbed.dP.row[{k}]"), "non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOL {
                return Err(Error::config(
                    format!("testbed.dP.row[{k}]"),
                    format!("row sums to {sum}, expected 0"),
                ));
            }
        }
        // entries of P0 + h dP stay nonnegative for h in [lo, hi]
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (p, d) in p0.iter().zip(dp.iter()) {
            if *d > 0.0 {
                lo = lo.max(-p / d);
            } else if *d < 0.0 {
                hi = hi.min(p / -d);
            }
        }
        Ok(Self {
            p0,
            dp,
            a0,
            validity: (a0 + lo, a0 + hi),
        })
    }

    /// Random family on `states` states: a strictly positive `P0` and a
    /// zero-row-sum `dP` scaled so the family stays valid for `|a − a0| ≤ 1`.
    pub fn random(states: usize, seed: u64) -> Result<Self> {
        if states < 2 {
            return Err(Error::Dimension("a random family needs at least 2 states".into()));
        }
        let mut cur = StreamCursor::new(RngStream::new(seed, 0));
        let mut p0 = DMatrix::from_fn(states, states, |_, _| 0.0);
        for i in 0..states {
            for j in 0..states {
                p0[(i, j)] = 0.05 + cur.next_uniform();
            }
            let sum: f64 = p0.row(i).iter().sum();
            for j in 0..states {
                p0[(i, j)] /= sum;
            }
            renormalize_row(&mut p0, i);
        }
        let mut dp = DMatrix::from_fn(states, states, |_, _| 0.0);
        for i in 0..states {
            for j in 0..states {
                dp[(i, j)] = 2.0 * cur.next_uniform() - 1.0;
            }
            let mean = dp.row(i).iter().sum::<f64>() / states as f64;
            for j in 0..states {
                dp[(i, j)] -= mean;
            }
        }
        let scale = p0.min() / dp.amax() * 0.99;
        dp *= scale;
        for i in 0..states {
            let err = dp.row(i).iter().sum::<f64>();
            dp[(i, states - 1)] -= err;
        }
        Self::new(p0, dp, 0.0)
    }

    pub fn states(&self) -> usize {
        self.p0.nrows()
    }

    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p0
    }

    pub fn dp(&self) -> &DMatrix<f64> {
        &self.dp
    }

    pub fn a0(&self) -> f64 {
        self.a0
    }

    /// Parameter range on which every entry of `P_a` is nonnegative.
    pub fn validity(&self) -> (f64, f64) {
        self.validity
    }

    pub fn at(&self, a: f64) -> Result<DMatrix<f64>> {
        let (lo, hi) = self.validity;
        if !(a >= lo && a <= hi) {
            return Err(Error::config(
                "testbed.a",
                format!("a = {a} is outside the validity interval [{lo}, {hi}]"),
            ));
        }
        let mut p = &self.p0 + &self.dp * (a - self.a0);
        for v in p.iter_mut() {
            *v = v.max(0.0);
        }
        Ok(p)
    }
}

fn renormalize_row(p: &mut DMatrix<f64>, i: usize) {
    let n = p.ncols();
    let err = p.row(i).iter().sum::<f64>() - 1.0;
    p[(i, n - 1)] -= err;
}

fn check_stochastic(p: &DMatrix<f64>, name: &str) -> Result<()> {
    for k in 0..p.nrows() {
        let row = p.row(k);
        if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::config(
                format!("{name}.row[{k}]"),
                format!("entry {v} is not a probability"),
            ));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::config(
                format!("{name}.row[{k}]"),
                format!("row sums to {sum}, expected 1"),
            ));
        }
    }
    Ok(())
}

/// Weights `V ≥ 1` of the norm `‖φ‖_V = max_i |φ_i| / V_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainWeights {
    pub v: Vec<f64>,
}

impl ChainWeights {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if let Some(k) = v.iter().position(|x| !(*x >= 1.0) || !x.is_finite()) {
            return Err(Error::config(
                format!("testbed.weights[{k}]"),
                "weights must be finite and at least 1",
            ));
        }
        Ok(Self { v })
    }

    pub fn uniform(states: usize) -> Self {
        Self { v: vec![1.0; states] }
    }

    /// `Σ_k V_k |μ_k|`, the norm dual to `‖·‖_V` on signed measures.
    pub fn dual_norm(&self, mu: &DVector<f64>) -> f64 {
        self.v.iter().zip(mu.iter()).map(|(w, m)| w * m.abs()).sum()
    }
}

/// The invariant probability vector of a row-stochastic `p`.
pub fn stationary(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let s = p.nrows();
    if s == 0 || !p.is_square() {
        return Err(Error::Dimension("transition matrix must be square".into()));
    }
    check_stochastic(p, "P")?;
    let eye = DMatrix::<f64>::identity(s, s);
    let a = (&eye - p).transpose();
    let sv = a.clone().singular_values();
    let unit = sv.iter().filter(|v| **v < UNIT_EIGEN_TOL).count();
    if unit > 1 {
        return Err(Error::NonUnique(format!(
            "eigenvalue 1 has multiplicity {unit}"
        )));
    }
    let mut system = a;
    for j in 0..s {
        system[(s - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(s);
    rhs[s - 1] = 1.0;
    let mut pi = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonUnique("stationarity system is singular".into()))?;
    if let Some(v) = pi.iter().find(|v| **v < -1e-12) {
        return Err(Error::Numerical(format!("negative stationary mass {v}")));
    }
    for v in pi.iter_mut() {
        *v = v.max(0.0);
    }
    let total = pi.sum();
    pi /= total;
    let residual = (p.transpose() * &pi - &pi).amax();
    if !(residual < RESIDUAL_TOL) {
        return Err(Error::Numerical(format!(
            "stationary residual {residual:e} exceeds {RESIDUAL_TOL:e}"
        )));
    }
    Ok(pi)
}

/// Spectral radius of `p` on functions with zero `π`-mean.
pub fn centred_spectral_radius(p: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    let s = p.nrows();
    let proj = DMatrix::from_fn(s, s, |_, j| pi[j]);
    (p - proj)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn check_phi(fam: &ChainFamily, phi: &[f64]) -> Result<DVector<f64>> {
    if phi.len() != fam.states() {
        return Err(Error::Dimension(format!(
            "observable has {} entries for {} states",
            phi.len(),
            fam.states()
        )));
    }
    Ok(DVector::from_column_slice(phi))
}

/// `⟨∂(P^m) (1 − P0^m)⁻¹ (φ − ⟨φ, π⟩), π⟩` with the product-rule derivative
/// `∂(P^m) = Σ_j P0^j dP P0^{m−1−j}`.
///
/// The resolvent is applied on centred functions through the solve
/// `(1 − P0^m + 1πᵀ) ψ = φ − ⟨φ, π⟩`.
pub fn linear_response_formula(fam: &ChainFamily, phi: &[f64], m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::config("testbed.m", "m must be at least 1"));
    }
    let phi = check_phi(fam, phi)?;
    let s = fam.states();
    let p0 = &fam.p0;
    let pi = stationary(p0)?;
    let rho = centred_spectral_radius(p0, &pi);
    if !(rho.powi(m as i32) < 1.0 - 1e-12) {
        return Err(Error::AssumptionFailed(format!(
            "no spectral gap: spectral radius on centred functions is {rho}"
        )));
    }
    let mut powers = vec![DMatrix::<f64>::identity(s, s)];
    for j in 1..=m {
        powers.push(&powers[j - 1] * p0);
    }
    let mut dpm = DMatrix::<f64>::zeros(s, s);
    for j in 0..m {
        dpm += &powers[j] * &fam.dp * &powers[m - 1 - j];
    }
    let centred = phi.add_scalar(-phi.dot(&pi));
    let ones_pi = DMatrix::from_fn(s, s, |_, j| pi[j]);
    let resolvent = DMatrix::<f64>::identity(s, s) - &powers[m] + ones_pi;
    let sv = resolvent.clone().singular_values();
    let cond = sv.max() / sv.min();
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(format!(
            "resolvent condition estimate {cond:e} exceeds {MAX_CONDITION:e}"
        )));
    }
    let psi = resolvent
        .lu()
        .solve(&centred)
        .ok_or_else(|| Error::IllConditioned("resolvent is singular".into()))?;
    Ok(pi.dot(&(dpm * psi)))
}

/// Derivative of `π_a` at `a0`: the solution of `dπᵀ (1 − P0) = πᵀ dP` with
/// `Σ dπ = 0`, via a least-squares solve of the bordered system.
pub fn stationary_derivative(fam: &ChainFamily) -> Result<DVector<f64>> {
    let s = fam.states();
    let pi = stationary(&fam.p0)?;
    let mut system = DMatrix::<f64>::zeros(s + 1, s);
    let lhs = (DMatrix::<f64>::identity(s, s) - &fam.p0).transpose();
    system.rows_mut(0, s).copy_from(&lhs);
    system.row_mut(s).fill(1.0);
    let mut rhs = DVector::zeros(s + 1);
    rhs.rows_mut(0, s).copy_from(&(fam.dp.transpose() * &pi));
    let svd = system.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|v| **v > 1e-12 * smax)
        .count();
    if rank < s {
        return Err(Error::IllConditioned(format!(
            "bordered stationarity system has rank {rank} < {s}"
        )));
    }
    let dpi = svd
        .solve(&rhs, 1e-14 * smax)
        .map_err(|e| Error::Numerical(e.into()))?;
    let residual = (&system * &dpi - &rhs).amax();
    if !(residual < 1e-9 * (1.0 + rhs.amax())) {
        return Err(Error::Numerical(format!(
            "bordered system residual {residual:e}"
        )));
    }
    Ok(dpi)
}

/// `⟨φ, dπ⟩` from [`stationary_derivative`]; the oracle for
/// [`linear_response_formula`].
pub fn exact_derivative(fam: &ChainFamily, phi: &[f64]) -> Result<f64> {
    let phi = check_phi(fam, phi)?;
    Ok(phi.dot(&stationary_derivative(fam)?))
}

/// Central difference `(⟨φ, π_{a0+h}⟩ − ⟨φ, π_{a0−h}⟩) / 2h`.
pub fn finite_difference(fam: &ChainFamily, phi: &[f64], h: f64) -> Result<f64> {
    let phi = check_phi(fam, phi)?;
    let plus = stationary(&fam.at(fam.a0 + h)?)?;
    let minus = stationary(&fam.at(fam.a0 - h)?)?;
    Ok((phi.dot(&plus) - phi.dot(&minus)) / (2.0 * h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzPoint {
    pub a: f64,
    /// `‖π_a − π_{a0}‖_V-dual / |a − a0|`
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `max_{i≠j} Σ_k V_k |P_ik − P_jk| / (V_i + V_j)`: the norm of `P0`
    /// on zero-mass signed measures in the `V`-weighted total variation,
    /// the dual of its action on centred functions.
    pub contraction_factor: f64,
    /// Second largest eigenvalue modulus.
    pub slem: f64,
    pub lipschitz: Vec<LipschitzPoint>,
    /// Largest of the Lipschitz ratios.
    pub lipschitz_constant: f64,
}

/// Spectral gap diagnostics of `P0` and Lipschitz ratios of `a ↦ π_a`.
pub fn gap_and_lipschitz_report(
    fam: &ChainFamily,
    weights: &ChainWeights,
    a_list: &[f64],
) -> Result<GapReport> {
    let s = fam.states();
    if weights.v.len() != s {
        return Err(Error::Dimension(format!(
            "{} weights for {s} states",
            weights.v.len()
        )));
    }
    let v = &weights.v;
    let p0 = &fam.p0;
    let mut contraction = 0.0f64;
    for i in 0..s {
        for j in i + 1..s {
            let num: f64 = (0..s).map(|k| v[k] * (p0[(i, k)] - p0[(j, k)]).abs()).sum();
            contraction = contraction.max(num / (v[i] + v[j]));
        }
    }
    let mut moduli: Vec<f64> = p0.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let slem = moduli.get(1).copied().unwrap_or(0.0);
    let pi0 = stationary(p0)?;
    let mut lipschitz = Vec::with_capacity(a_list.len());
    for &a in a_list {
        if a == fam.a0 {
            return Err(Error::config("testbed.a_list", "a must differ from a0"));
        }
        let pi = stationary(&fam.at(a)?)?;
        lipschitz.push(LipschitzPoint {
            a,
            ratio: weights.dual_norm(&(pi - &pi0)) / (a - fam.a0).abs(),
        });
    }
    let lipschitz_constant = lipschitz.iter().map(|l| l.ratio).fold(0.0, f64::max);
    Ok(GapReport {
        contraction_factor: contraction,
        slem,
        lipschitz,
        lipschitz_constant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(a: f64, b: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0 - a, a, b, 1.0 - b])
    }

    /// `P(a) = [[1−a, a], [b, 1−b]]` around `a0`.
    fn two_state_family(a: f64, b: f64) -> ChainFamily {
        ChainFamily::new(
            two_state(a, b),
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]),
            a,
        )
        .unwrap()
    }

    #[test]
    fn identity_is_not_unique() {
        for s in 2..5 {
            assert!(matches!(
                stationary(&DMatrix::identity(s, s)),
                Err(Error::NonUnique(_))
            ));
        }
        assert_eq!(stationary(&DMatrix::identity(1, 1)).unwrap()[0], 1.0);
    }

    #[test]
    fn two_state_closed_form() {
        let (a, b) = (0.3, 0.6);
        let pi = stationary(&two_state(a, b)).unwrap();
        assert!((pi[0] - b / (a + b)).abs() < 1e-15);
        assert!((pi[1] - a / (a + b)).abs() < 1e-15);
        let half = stationary(&two_state(0.5, 0.5)).unwrap();
        assert_eq!(half.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn doubly_stochastic_is_uniform() {
        let p = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.3, 0.2, 0.5, 0.5, 0.3, 0.2]);
        let pi = stationary(&p).unwrap();
        assert!(pi.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn bad_rows_are_named() {
        let p = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.49]);
        let err = ChainFamily::new(p, DMatrix::zeros(2, 2), 0.0).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "testbed.P0.row[1]"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn two_state_response() {
        let fam = two_state_family(0.5, 0.5);
        let phi = [0.0, 1.0];
        for m in 1..4 {
            let r = linear_response_formula(&fam, &phi, m).unwrap();
            assert!((r - 0.5).abs() < 1e-12, "m={m} r={r}");
        }
        assert!((exact_derivative(&fam, &phi).unwrap() - 0.5).abs() < 1e-12);
        let (a, b) = (0.2, 0.7);
        let fam = two_state_family(a, b);
        let expect = b / ((a + b) * (a + b));
        assert!((linear_response_formula(&fam, &phi, 2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_gives_zero() {
        let fam = ChainFamily::random(5, 1).unwrap();
        let still = ChainFamily::new(fam.p0().clone(), DMatrix::zeros(5, 5), 0.0).unwrap();
        let phi = [1.0, -2.0, 0.5, 3.0, 0.0];
        assert_eq!(linear_response_formula(&still, &phi, 2).unwrap(), 0.0);
        assert_eq!(exact_derivative(&still, &phi).unwrap(), 0.0);
    }

    #[test]
    fn stationary_preserving_direction() {
        let fam = ChainFamily::random(4, 3).unwrap();
        let pi = stationary(fam.p0()).unwrap();
        let f = DMatrix::from_row_slice(
            4,
            4,
            &[0.0, 1.0, -1.0, 0.0, 1.0, 0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 0.0],
        );
        // F symmetric with zero row sums; dP_ik = F_ik / π_i has zero row
        // sums and πᵀ dP = column sums of F = 0.
        let dp = DMatrix::from_fn(4, 4, |i, k| 1e-3 * f[(i, k)] / pi[i]);
        let fam = ChainFamily::new(fam.p0().clone(), dp, 0.0).unwrap();
        let phi = [0.3, -1.0, 2.0, 0.7];
        assert!(exact_derivative(&fam, &phi).unwrap().abs() < 1e-12);
        assert!(linear_response_formula(&fam, &phi, 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rank_one_contracts_in_one_step() {
        let row = [0.1, 0.6, 0.3];
        let p = DMatrix::from_fn(3, 3, |_, j| row[j]);
        let fam = ChainFamily::new(p, DMatrix::zeros(3, 3), 0.0).unwrap();
        let w = ChainWeights::new(vec![1.0, 4.0, 9.0]).unwrap();
        let rep = gap_and_lipschitz_report(&fam, &w, &[]).unwrap();
        assert_eq!(rep.contraction_factor, 0.0);
        assert!(rep.slem < 1e-12);
        let half = two_state_family(0.5, 0.5);
        let rep = gap_and_lipschitz_report(&half, &ChainWeights::uniform(2), &[0.4]).unwrap();
        assert_eq!(rep.contraction_factor, 0.0);
        assert!(rep.slem < 1e-15);
    }

    #[test]
    fn validity_interval_is_exact() {
        let fam = two_state_family(0.3, 0.6);
        assert_eq!(fam.validity(), (0.0, 1.0));
        assert!(fam.at(1.0).is_ok() && fam.at(1.0 + 1e-9).is_err());
        let rnd = ChainFamily::random(6, 9).unwrap();
        let (lo, hi) = rnd.validity();
        assert!(lo <= -1.0 && hi >= 1.0);
    }

    #[test]
    fn periodic_chain_has_no_gap() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let fam = ChainFamily::new(p, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, -0.5]), 0.0)
            .unwrap();
        assert!(matches!(
            linear_response_formula(&fam, &[0.0, 1.0], 1),
            Err(Error::AssumptionFailed(_))
        ));
    }

    #[test]
    fn weights_below_one_rejected() {
        assert!(ChainWeights::new(vec![1.0, 0.5]).is_err());
    }
}
