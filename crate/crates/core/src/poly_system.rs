//! Polynomial-drift, additive-noise systems
//!
//! ```text
//! dx = Σ_{k=0..N} N_k(x, …, x) dt + Σ dW
//! ```
//!
//! Each `N_k` is a symmetric k-linear map stored once per output component
//! and per *sorted* multi-index, so symmetry holds by construction. For the
//! hot loops the maps are flattened into a list of monomials
//! ([`Polynomial`]) which evaluates the drift and its first two derivatives
//! on the diagonal.
//!
//! The module also carries the two structural checks that can be decided
//! algorithmically: radial coercivity of the drift and the recursive span
//! condition on the top-degree map.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamCursor};

/// `binom(n, k)` in u64; callers stay far below overflow.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// All non-decreasing index tuples of length `order` over `0..dim`, in
/// lexicographic order.
pub fn sorted_multi_indices(order: usize, dim: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(dim + order, order));
    if order == 0 {
        out.push(Vec::new());
        return out;
    }
    if dim == 0 {
        return out;
    }
    let mut idx = vec![0usize; order];
    loop {
        out.push(idx.clone());
        // advance: find the rightmost position that can be incremented
        let mut p = order;
        while p > 0 && idx[p - 1] == dim - 1 {
            p -= 1;
        }
        if p == 0 {
            break;
        }
        let v = idx[p - 1] + 1;
        for slot in &mut idx[p - 1..] {
            *slot = v;
        }
    }
    out
}

/// Position of a sorted multi-index in [`sorted_multi_indices`] order.
fn multi_index_rank(sorted: &[usize], dim: usize) -> usize {
    let k = sorted.len();
    let mut rank = 0;
    let mut lo = 0;
    for (p, &a) in sorted.iter().enumerate() {
        let rest = k - p - 1;
        for v in lo..a {
            // non-decreasing tuples of length `rest` with entries in [v, dim)
            rank += binomial(dim - v + rest - 1, rest);
        }
        lo = a;
    }
    rank
}

/// Number of distinct orderings of a multi-index: k! / Π(count!).
fn multiplicity(sorted: &[usize]) -> f64 {
    let mut m = 1.0;
    let mut run = 0usize;
    for (i, _) in sorted.iter().enumerate() {
        run = if i > 0 && sorted[i] == sorted[i - 1] {
            run + 1
        } else {
            1
        };
        m *= (i + 1) as f64 / run as f64;
    }
    m
}

/// One polynomial term `coef · Π x[vars]` contributing to output `out`,
/// as written in configuration documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub out: usize,
    pub vars: Vec<usize>,
    pub coef: f64,
}

/// A symmetric multilinear map `(R^d)^k → R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMultiMap {
    order: usize,
    dim: usize,
    /// `coeffs[out * n_indices + rank(α)]` is the tensor entry `T_out[α]`.
    coeffs: Vec<f64>,
}

impl SymMultiMap {
    pub fn zeros(order: usize, dim: usize) -> Self {
        let n = binomial(dim + order - 1 + usize::from(dim == 0), order);
        Self {
            order,
            dim,
            coeffs: vec![0.0; dim * n],
        }
    }

    /// Build from tensor entries laid out as `[out][sorted multi-index]`.
    pub fn from_entries(order: usize, dim: usize, coeffs: Vec<f64>) -> Result<Self> {
        let map = Self::zeros(order, dim);
        if coeffs.len() != map.coeffs.len() {
            return Err(Error::Dimension(format!(
                "order-{order} map on R^{dim} needs {} coefficients, got {}",
                map.coeffs.len(),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical(format!(
                "order-{order} map has non-finite coefficients"
            )));
        }
        Ok(Self { coeffs, ..map })
    }

    /// Build from polynomial terms: `coef · x_{v1} ⋯ x_{vk}` in component
    /// `out`. Repeated terms accumulate. The tensor entry is the polynomial
    /// coefficient divided by the number of orderings of the multi-index.
    pub fn from_monomials(order: usize, dim: usize, terms: &[Monomial]) -> Result<Self> {
        let mut map = Self::zeros(order, dim);
        let n = map.n_indices();
        for t in terms {
            if t.vars.len() != order {
                return Err(Error::Dimension(format!(
                    "term of degree {} given to the order-{order} map",
                    t.vars.len()
                )));
            }
            if t.out >= dim || t.vars.iter().any(|&v| v >= dim) {
                return Err(Error::Dimension(format!(
                    "term indices out of range for dimension {dim}"
                )));
            }
            if !t.coef.is_finite() {
                return Err(Error::Numerical("non-finite monomial coefficient".into()));
            }
            let mut sorted = t.vars.clone();
            sorted.sort_unstable();
            let slot = t.out * n + multi_index_rank(&sorted, dim);
            map.coeffs[slot] += t.coef / multiplicity(&sorted);
        }
        Ok(map)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_indices(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.coeffs.len() / self.dim
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Tensor entry `T_out[idx]` for an index tuple in any order.
    pub fn entry(&self, out: usize, idx: &[usize]) -> f64 {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        self.coeffs[out * self.n_indices() + multi_index_rank(&sorted, self.dim)]
    }

    /// `self + a · other`, coefficientwise.
    pub fn add_scaled(&self, other: &SymMultiMap, a: f64) -> Result<Self> {
        if self.order != other.order || self.dim != other.dim {
            return Err(Error::Dimension(format!(
                "cannot add order-{}/dim-{} map to order-{}/dim-{} map",
                other.order, other.dim, self.order, self.dim
            )));
        }
        Ok(Self {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(c, d)| c + a * d)
                .collect(),
            ..self.clone()
        })
    }

    /// Evaluate on `order` (possibly distinct) arguments.
    pub fn eval(&self, args: &[&[f64]]) -> Result<Vec<f64>> {
        if args.len() != self.order {
            return Err(Error::Dimension(format!(
                "order-{} map given {} arguments",
                self.order,
                args.len()
            )));
        }
        if args.iter().any(|a| a.len() != self.dim) {
            return Err(Error::Dimension(format!(
                "argument length differs from dimension {}",
                self.dim
            )));
        }
        let d = self.dim;
        let n = self.n_indices();
        let mut out = vec![0.0; d];
        // Sum over all ordered index tuples; the entry only depends on the
        // sorted tuple.
        let mut tuple = vec![0usize; self.order];
        let mut sorted = vec![0usize; self.order];
        loop {
            let weight: f64 = tuple.iter().zip(args).map(|(&j, a)| a[j]).product();
            if weight != 0.0 {
                sorted.copy_from_slice(&tuple);
                sorted.sort_unstable();
                let r = multi_index_rank(&sorted, d);
                for (i, o) in out.iter_mut().enumerate() {
                    *o += self.coeffs[i * n + r] * weight;
                }
            }
            // odometer
            let mut p = self.order;
            loop {
                if p == 0 {
                    return Ok(out);
                }
                p -= 1;
                tuple[p] += 1;
                if tuple[p] < d {
                    break;
                }
                tuple[p] = 0;
            }
        }
    }
}

/// Flattened monomial form `Σ_t coef_t Π_{v ∈ vars_t} x_v e_{out_t}` of a
/// list of symmetric maps; evaluates values and derivatives on the diagonal.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Term {
    coef: f64,
    out: u32,
    start: u32,
    len: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Polynomial {
    dim: usize,
    terms: Vec<Term>,
    vars: Vec<u32>,
}

impl Polynomial {
    pub fn from_maps(dim: usize, maps: &[SymMultiMap]) -> Self {
        let mut p = Polynomial {
            dim,
            ..Default::default()
        };
        for map in maps {
            let n = map.n_indices();
            for (r, alpha) in sorted_multi_indices(map.order, dim).iter().enumerate() {
                let m = multiplicity(alpha);
                for i in 0..dim {
                    let c = map.coeffs[i * n + r];
                    if c != 0.0 {
                        p.terms.push(Term {
                            coef: c * m,
                            out: i as u32,
                            start: p.vars.len() as u32,
                            len: alpha.len() as u32,
                        });
                        p.vars.extend(alpha.iter().map(|&v| v as u32));
                    }
                }
            }
        }
        p
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    #[inline]
    fn term_vars(&self, t: &Term) -> &[u32] {
        &self.vars[t.start as usize..(t.start + t.len) as usize]
    }

    /// `out ← p(x)`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for t in &self.terms {
            let mut prod = t.coef;
            for &v in self.term_vars(t) {
                prod *= x[v as usize];
            }
            out[t.out as usize] += prod;
        }
    }

    /// `out ← p(x)` and `jac ← Dp(x)` (row-major, `jac[i*d + j] = ∂p_i/∂x_j`).
    #[inline]
    pub fn eval_jacobian_into(&self, x: &[f64], out: &mut [f64], jac: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        jac.fill(0.0);
        for t in &self.terms {
            let vars = self.term_vars(t);
            let i = t.out as usize;
            let c = t.coef;
            out[i] += c * vars.iter().map(|&v| x[v as usize]).product::<f64>();
            for p in 0..vars.len() {
                let mut prod = c;
                for (q, &v) in vars.iter().enumerate() {
                    if q != p {
                        prod *= x[v as usize];
                    }
                }
                jac[i * d + vars[p] as usize] += prod;
            }
        }
    }

    /// [`Polynomial::eval_into`] on `L` points at once, coordinate-major:
    /// `x[i][l]` is coordinate `i` of point `l`. Each lane follows the same
    /// operation order as the single-point routine.
    #[inline]
    pub fn eval_lanes<const L: usize>(&self, x: &[[f64; L]], out: &mut [[f64; L]]) {
        for o in out.iter_mut() {
            *o = [0.0; L];
        }
        for t in &self.terms {
            let mut prod = [t.coef; L];
            for &v in self.term_vars(t) {
                let xv = &x[v as usize];
                for l in 0..L {
                    prod[l] *= xv[l];
                }
            }
            let o = &mut out[t.out as usize];
            for l in 0..L {
                o[l] += prod[l];
            }
        }
    }

    /// [`Polynomial::eval_jacobian_into`] on `L` points at once;
    /// `jac[i*d + j][l]`.
    #[inline]
    pub fn eval_jacobian_lanes<const L: usize>(
        &self,
        x: &[[f64; L]],
        out: &mut [[f64; L]],
        jac: &mut [[f64; L]],
    ) {
        let d = self.dim;
        for o in out.iter_mut() {
            *o = [0.0; L];
        }
        for j in jac.iter_mut() {
            *j = [0.0; L];
        }
        for t in &self.terms {
            let vars = self.term_vars(t);
            let i = t.out as usize;
            let mut full = [1.0; L];
            for &v in vars {
                let xv = &x[v as usize];
                for l in 0..L {
                    full[l] *= xv[l];
                }
            }
            for l in 0..L {
                out[i][l] += t.coef * full[l];
            }
            for p in 0..vars.len() {
                let mut prod = [t.coef; L];
                for (q, &v) in vars.iter().enumerate() {
                    if q != p {
                        let xv = &x[v as usize];
                        for l in 0..L {
                            prod[l] *= xv[l];
                        }
                    }
                }
                let jj = &mut jac[i * d + vars[p] as usize];
                for l in 0..L {
                    jj[l] += prod[l];
                }
            }
        }
    }

    /// Second derivative tensor, `hess[(i*d + j)*d + l] = ∂²p_i/∂x_j∂x_l`.
    #[inline]
    pub fn hessian_into(&self, x: &[f64], hess: &mut [f64]) {
        let d = self.dim;
        hess.fill(0.0);
        for t in &self.terms {
            let vars = self.term_vars(t);
            if vars.len() < 2 {
                continue;
            }
            let i = t.out as usize;
            for p in 0..vars.len() {
                for q in 0..vars.len() {
                    if p == q {
                        continue;
                    }
                    let mut prod = t.coef;
                    for (r, &v) in vars.iter().enumerate() {
                        if r != p && r != q {
                            prod *= x[v as usize];
                        }
                    }
                    hess[(i * d + vars[p] as usize) * d + vars[q] as usize] += prod;
                }
            }
        }
    }

    /// Divergence `Σ_i ∂p_i/∂x_i`.
    pub fn divergence(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut out = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        self.eval_jacobian_into(x, &mut out, &mut jac);
        (0..d).map(|i| jac[i * d + i]).sum()
    }
}

/// A polynomial-drift additive-noise system.
#[derive(Clone, Debug, PartialEq)]
pub struct PolySystem {
    dim: usize,
    maps: Vec<SymMultiMap>,
    sigma: DMatrix<f64>,
    poly: Polynomial,
}

impl PolySystem {
    /// `maps[k]` must be the order-`k` map for `k = 0..=N` with `N ≥ 1`, and
    /// `sigma` a `d × M` matrix with `M ≥ 1`.
    pub fn new(maps: Vec<SymMultiMap>, sigma: DMatrix<f64>) -> Result<Self> {
        if maps.len() < 2 {
            return Err(Error::Dimension(
                "a system needs maps of orders 0..=N with N >= 1".into(),
            ));
        }
        let dim = maps[0].dim();
        if dim == 0 {
            return Err(Error::Dimension("state dimension must be positive".into()));
        }
        for (k, m) in maps.iter().enumerate() {
            if m.order() != k || m.dim() != dim {
                return Err(Error::Dimension(format!(
                    "maps[{k}] has order {} and dimension {}, expected order {k} and dimension {dim}",
                    m.order(),
                    m.dim()
                )));
            }
        }
        if sigma.nrows() != dim || sigma.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "noise matrix must be {dim} x M with M >= 1, got {} x {}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite noise coefficients".into()));
        }
        let poly = Polynomial::from_maps(dim, &maps);
        Ok(Self {
            dim,
            maps,
            sigma,
            poly,
        })
    }

    /// Build from polynomial terms; the degree is the largest term degree
    /// unless `degree` forces a higher one.
    pub fn from_monomials(
        dim: usize,
        degree: usize,
        terms: &[Monomial],
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let top = terms.iter().map(|t| t.vars.len()).max().unwrap_or(0);
        let degree = degree.max(top).max(1);
        let maps = (0..=degree)
            .map(|k| {
                let ts: Vec<Monomial> =
                    terms.iter().filter(|t| t.vars.len() == k).cloned().collect();
                SymMultiMap::from_monomials(k, dim, &ts)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps, sigma)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Top degree `N`.
    pub fn degree(&self) -> usize {
        self.maps.len() - 1
    }

    pub fn noise_channels(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn maps(&self) -> &[SymMultiMap] {
        &self.maps
    }

    pub fn top_map(&self) -> &SymMultiMap {
        &self.maps[self.degree()]
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    /// Number of real parameters `(N_0..N_N, Σ)`, counting each symmetric
    /// k-linear map into R^d as `d · binom(d+k-1, k)` numbers.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        d * self.noise_channels()
            + (0..=self.degree())
                .map(|k| d * binomial(d + k - 1, k))
                .sum::<usize>()
    }

    fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension(format!(
                "{what} has length {}, system dimension is {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("{what} is not finite")));
        }
        Ok(())
    }

    /// `N(x) = Σ_k N_k(x, …, x)`.
    pub fn eval_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x, "x")?;
        let mut out = vec![0.0; self.dim];
        self.poly.eval_into(x, &mut out);
        Ok(out)
    }

    /// `(DN(x), D²N(x)(ξ, ζ))`.
    pub fn eval_derivatives(
        &self,
        x: &[f64],
        xi: &[f64],
        zeta: &[f64],
    ) -> Result<(DMatrix<f64>, Vec<f64>)> {
        self.check_len(x, "x")?;
        self.check_len(xi, "xi")?;
        self.check_len(zeta, "zeta")?;
        let d = self.dim;
        let mut n = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        let mut hess = vec![0.0; d * d * d];
        self.poly.eval_jacobian_into(x, &mut n, &mut jac);
        self.poly.hessian_into(x, &mut hess);
        let second = (0..d)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..d {
                    for l in 0..d {
                        s += hess[(i * d + j) * d + l] * xi[j] * zeta[l];
                    }
                }
                s
            })
            .collect();
        Ok((DMatrix::from_row_slice(d, d, &jac), second))
    }
}

/// A one-parameter family `a ↦ (N + a δN, Σ + a δΣ)` through the base
/// system at `a = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDirection {
    delta_maps: Vec<SymMultiMap>,
    delta_sigma: DMatrix<f64>,
    poly: Polynomial,
}

impl ParamDirection {
    pub fn new(delta_maps: Vec<SymMultiMap>, delta_sigma: DMatrix<f64>) -> Result<Self> {
        let dim = delta_sigma.nrows();
        if delta_maps
            .iter()
            .enumerate()
            .any(|(k, m)| m.order() != k || m.dim() != dim)
        {
            return Err(Error::Dimension(
                "direction maps must have orders 0.. and the noise matrix's row count".into(),
            ));
        }
        if delta_maps.iter().all(SymMultiMap::is_zero) && delta_sigma.iter().all(|&s| s == 0.0)
        {
            return Err(Error::config(
                "direction",
                "parameter direction is identically zero",
            ));
        }
        if delta_sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite noise direction".into()));
        }
        let poly = Polynomial::from_maps(dim, &delta_maps);
        Ok(Self {
            delta_maps,
            delta_sigma,
            poly,
        })
    }

    /// Drift perturbation given as polynomial terms, shaped like `sys`.
    pub fn drift(sys: &PolySystem, terms: &[Monomial]) -> Result<Self> {
        Self::from_parts(sys, terms, DMatrix::zeros(sys.dim(), sys.noise_channels()))
    }

    /// Constant forcing `δN_0 = e`.
    pub fn forcing(sys: &PolySystem, e: &[f64]) -> Result<Self> {
        if e.len() != sys.dim() {
            return Err(Error::Dimension("forcing vector length".into()));
        }
        let terms: Vec<Monomial> = e
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(i, &c)| Monomial {
                out: i,
                vars: vec![],
                coef: c,
            })
            .collect();
        Self::drift(sys, &terms)
    }

    /// Noise perturbation `δΣ`.
    pub fn noise(sys: &PolySystem, delta_sigma: DMatrix<f64>) -> Result<Self> {
        Self::from_parts(sys, &[], delta_sigma)
    }

    pub fn from_parts(
        sys: &PolySystem,
        terms: &[Monomial],
        delta_sigma: DMatrix<f64>,
    ) -> Result<Self> {
        if delta_sigma.shape() != sys.sigma().shape() {
            return Err(Error::Dimension(format!(
                "noise direction is {:?}, system noise is {:?}",
                delta_sigma.shape(),
                sys.sigma().shape()
            )));
        }
        if let Some(t) = terms.iter().find(|t| t.vars.len() > sys.degree()) {
            return Err(Error::Dimension(format!(
                "direction term of degree {} exceeds system degree {}",
                t.vars.len(),
                sys.degree()
            )));
        }
        let maps = (0..=sys.degree())
            .map(|k| {
                let ts: Vec<Monomial> =
                    terms.iter().filter(|t| t.vars.len() == k).cloned().collect();
                SymMultiMap::from_monomials(k, sys.dim(), &ts)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps, delta_sigma)
    }

    pub fn delta_maps(&self) -> &[SymMultiMap] {
        &self.delta_maps
    }

    pub fn delta_sigma(&self) -> &DMatrix<f64> {
        &self.delta_sigma
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    pub fn is_drift_only(&self) -> bool {
        self.delta_sigma.iter().all(|&s| s == 0.0)
    }

    pub fn has_noise_part(&self) -> bool {
        !self.is_drift_only()
    }

    /// Largest absolute coefficient; the natural unit for step sizes in `a`.
    pub fn scale(&self) -> f64 {
        self.delta_maps
            .iter()
            .flat_map(|m| m.coeffs().iter())
            .chain(self.delta_sigma.iter())
            .fold(0.0f64, |acc, c| acc.max(c.abs()))
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        let maps = self
            .delta_maps
            .iter()
            .map(|m| SymMultiMap::zeros(m.order(), m.dim()).add_scaled(m, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps, &self.delta_sigma * c)
    }

    /// `δN(x)`.
    pub fn eval_drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.delta_sigma.nrows()];
        self.poly.eval_into(x, &mut out);
        out
    }

    /// `div δN(x)`.
    pub fn divergence(&self, x: &[f64]) -> f64 {
        self.poly.divergence(x)
    }

    pub fn check_compatible(&self, sys: &PolySystem) -> Result<()> {
        if self.delta_sigma.shape() != sys.sigma().shape()
            || self.delta_maps.len() > sys.maps().len()
            || self.delta_maps.first().map(|m| m.dim()) != Some(sys.dim())
        {
            return Err(Error::Dimension(
                "parameter direction is not shaped like the system".into(),
            ));
        }
        Ok(())
    }
}

/// The system at parameter value `a` along `dir`.
pub fn apply_direction(sys: &PolySystem, dir: &ParamDirection, a: f64) -> Result<PolySystem> {
    dir.check_compatible(sys)?;
    let maps = sys
        .maps()
        .iter()
        .enumerate()
        .map(|(k, m)| match dir.delta_maps().get(k) {
            Some(delta) => m.add_scaled(delta, a),
            None => Ok(m.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    PolySystem::new(maps, sys.sigma() + dir.delta_sigma() * a)
}

/// Outcome of the sampled radial-dissipation check
/// `⟨x, N(x)⟩ ≤ C − c‖x‖^N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub degree: usize,
    /// Estimated dissipation constant `c`.
    pub c_hat: f64,
    /// Estimated offset `C`.
    pub big_c_hat: f64,
    /// Sampled unit vector maximizing `⟨u, N_N(u, …, u)⟩`.
    pub worst_direction: Vec<f64>,
    pub top_degree_radial: f64,
    /// Required bound for odd degree: `top_degree_radial ≤ -margin`.
    pub margin: f64,
    pub tolerance: f64,
    pub n_directions: usize,
    pub radii: Vec<f64>,
    pub pass: bool,
}

/// Default shells for [`coercivity_probe`].
pub const DEFAULT_PROBE_RADII: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

fn probe_directions(dim: usize, n_random: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(2 * dim + n_random);
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[i] = s;
            dirs.push(e);
        }
    }
    if dim == 2 {
        // evenly spread angles are quasi-uniform on the circle
        dirs.extend((0..n_random).map(|j| {
            let th = std::f64::consts::TAU * (j as f64 + 0.5) / n_random as f64;
            vec![th.cos(), th.sin()]
        }));
    } else if dim > 2 {
        let mut cursor = StreamCursor::new(RngStream::new(0xC0E7C1, 0));
        dirs.extend((0..n_random).map(|_| cursor.next_unit_vector(dim)));
    }
    dirs
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sampled check of radial dissipation.
///
/// Samples unit directions (coordinate axes plus `n_directions` spread over
/// the sphere). For even top degree `N` the top-degree radial part must
/// vanish (`|⟨u, N_N(u,…,u)⟩| ≤ tol`); for odd `N` it must be at most
/// `-tol`. The constants `(c, C)` are then fit on the shells `radii` so that
/// `⟨x, N(x)⟩ ≤ C − c‖x‖^N` holds on every sampled point.
pub fn coercivity_probe(
    sys: &PolySystem,
    n_directions: usize,
    radii: &[f64],
    tol: f64,
) -> Result<CoercivityReport> {
    if n_directions == 0 {
        return Err(Error::config("n_directions", "must be at least 1"));
    }
    if tol <= 0.0 || radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::config(
            "tolerance",
            "tolerance and radii must be positive",
        ));
    }
    let d = sys.dim();
    let big_n = sys.degree();
    let top = Polynomial::from_maps(d, std::slice::from_ref(sys.top_map()));
    let dirs = probe_directions(d, n_directions);

    let mut top_value = f64::NEG_INFINITY;
    let mut worst = dirs[0].clone();
    let mut top_abs_max = 0.0f64;
    let mut buf = vec![0.0; d];
    for u in &dirs {
        top.eval_into(u, &mut buf);
        let v = dot(u, &buf);
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite drift in coercivity probe".into()));
        }
        top_abs_max = top_abs_max.max(v.abs());
        if v > top_value {
            top_value = v;
            worst = u.clone();
        }
    }

    // G(r) = max_u ⟨ru, N(ru)⟩ on every shell
    let mut sorted_radii = radii.to_vec();
    sorted_radii.sort_by(f64::total_cmp);
    let mut shell_max = Vec::with_capacity(sorted_radii.len());
    for &r in &sorted_radii {
        let mut g = f64::NEG_INFINITY;
        for u in &dirs {
            let x: Vec<f64> = u.iter().map(|c| r * c).collect();
            sys.polynomial().eval_into(&x, &mut buf);
            let v = dot(&x, &buf);
            if !v.is_finite() {
                return Err(Error::Numerical("non-finite drift in coercivity probe".into()));
            }
            g = g.max(v);
        }
        shell_max.push(g);
    }

    // Odd degree: the top-degree radial part is the asymptotic rate. Even
    // degree: the rate comes from the outer half of the shells. Either is
    // halved for slack, then the smallest offset making the bound hold on
    // all shells is taken.
    let rate = if big_n % 2 == 1 {
        -top_value
    } else {
        let outer = sorted_radii.len() / 2;
        sorted_radii[outer..]
            .iter()
            .zip(&shell_max[outer..])
            .map(|(r, g)| -g / r.powi(big_n as i32))
            .fold(f64::INFINITY, f64::min)
    };
    let c_hat = if rate.is_finite() { 0.5 * rate.max(0.0) } else { 0.0 };
    let big_c_hat = sorted_radii
        .iter()
        .zip(&shell_max)
        .map(|(r, g)| g + c_hat * r.powi(big_n as i32))
        .fold(0.0f64, f64::max);

    let top_ok = if big_n % 2 == 0 {
        top_abs_max <= tol
    } else {
        top_value <= -tol
    };
    Ok(CoercivityReport {
        degree: big_n,
        c_hat,
        big_c_hat,
        worst_direction: worst,
        top_degree_radial: top_value,
        margin: tol,
        tolerance: tol,
        n_directions: dirs.len(),
        radii: sorted_radii,
        pass: top_ok && c_hat > 0.0,
    })
}

/// How argument tuples for the top-degree map are chosen in
/// [`hypoellipticity_span`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum SpanSampling {
    /// Every multiset of basis vectors.
    Exhaustive,
    /// `n_random` tuples of random unit combinations of the basis.
    Randomized { n_random: usize, seed: u64 },
    /// Exhaustive while `(dim A_k)^N ≤ cap`, randomized otherwise.
    Auto {
        cap: usize,
        n_random: usize,
        seed: u64,
    },
}

impl Default for SpanSampling {
    fn default() -> Self {
        SpanSampling::Auto {
            cap: 4096,
            n_random: 256,
            seed: 0x5BA4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanReport {
    /// `dim A_k` for each computed level.
    pub level_dims: Vec<usize>,
    /// Orthonormal basis of the final level.
    pub basis: Vec<Vec<f64>>,
    pub full_rank: bool,
    pub tolerance: f64,
}

/// Orthonormal basis of the column span, with rank decided by singular
/// values above `tol · σ_max`.
fn orthonormal_basis(columns: &[Vec<f64>], dim: usize, tol: f64) -> Vec<Vec<f64>> {
    if columns.is_empty() {
        return Vec::new();
    }
    let m = DMatrix::from_fn(dim, columns.len(), |i, j| columns[j][i]);
    let svd = m.svd(true, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return Vec::new();
    }
    let u = svd.u.expect("left singular vectors requested");
    svd.singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tol * smax)
        .map(|(j, _)| u.column(j).iter().copied().collect())
        .collect()
}

fn unit_or_none(v: Vec<f64>, floor: f64) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > floor && n.is_finite()).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Recursive span check: `A_0 = span Σ`,
/// `A_{k+1} = span(A_k ∪ {N_N(y_1, …, y_N) : y_j ∈ A_k})`; full rank when
/// the final level is all of R^d.
pub fn hypoellipticity_span(
    sys: &PolySystem,
    tol: f64,
    sampling: SpanSampling,
) -> Result<SpanReport> {
    if !(tol > 0.0) {
        return Err(Error::config("tolerance", "span tolerance must be positive"));
    }
    let d = sys.dim();
    let big_n = sys.degree();
    let top = sys.top_map();
    let sigma_cols: Vec<Vec<f64>> = (0..sys.noise_channels())
        .map(|j| sys.sigma().column(j).iter().copied().collect())
        .collect();
    let mut basis = orthonormal_basis(&sigma_cols, d, tol);
    let mut level_dims = vec![basis.len()];

    for level in 0..d {
        if basis.len() == d {
            break;
        }
        let r = basis.len();
        let exhaustive = match sampling {
            SpanSampling::Exhaustive => true,
            SpanSampling::Randomized { .. } => false,
            SpanSampling::Auto { cap, .. } => (r as f64).powi(big_n as i32) <= cap as f64,
        };
        let mut columns = basis.clone();
        if r > 0 {
            if exhaustive {
                // symmetry: multisets of basis vectors suffice
                for alpha in sorted_multi_indices(big_n, r) {
                    let args: Vec<&[f64]> = alpha.iter().map(|&j| basis[j].as_slice()).collect();
                    if let Some(v) = unit_or_none(top.eval(&args)?, 1e-300) {
                        columns.push(v);
                    }
                }
            } else {
                let (n_random, seed) = match sampling {
                    SpanSampling::Randomized { n_random, seed }
                    | SpanSampling::Auto { n_random, seed, .. } => (n_random, seed),
                    SpanSampling::Exhaustive => unreachable!(),
                };
                let mut cursor = StreamCursor::new(RngStream::new(seed, level as u32));
                for _ in 0..n_random {
                    let ys: Vec<Vec<f64>> = (0..big_n)
                        .map(|_| {
                            let w = cursor.next_unit_vector(r);
                            (0..d)
                                .map(|i| (0..r).map(|j| w[j] * basis[j][i]).sum())
                                .collect()
                        })
                        .collect();
                    let args: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
                    if let Some(v) = unit_or_none(top.eval(&args)?, 1e-300) {
                        columns.push(v);
                    }
                }
            }
        }
        let next = orthonormal_basis(&columns, d, tol);
        let grew = next.len() > basis.len();
        if next.len() >= basis.len() {
            basis = next;
        }
        level_dims.push(basis.len());
        if !grew {
            break;
        }
    }
    Ok(SpanReport {
        full_rank: basis.len() == d,
        level_dims,
        basis,
        tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mono(out: usize, vars: &[usize], coef: f64) -> Monomial {
        Monomial {
            out,
            vars: vars.to_vec(),
            coef,
        }
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
    fn multi_index_enumeration_and_rank() {
        for (k, d) in [(0, 3), (1, 3), (2, 3), (3, 2), (3, 4), (4, 3)] {
            let all = sorted_multi_indices(k, d);
            assert_eq!(all.len(), binomial(d + k - 1, k), "k={k} d={d}");
            for (r, a) in all.iter().enumerate() {
                assert_eq!(multi_index_rank(a, d), r);
            }
        }
    }

    #[test]
    fn multiplicity_counts_orderings() {
        assert_eq!(multiplicity(&[]), 1.0);
        assert_eq!(multiplicity(&[0, 0, 0]), 1.0);
        assert_eq!(multiplicity(&[0, 0, 1]), 3.0);
        assert_eq!(multiplicity(&[0, 1, 2]), 6.0);
        assert_eq!(multiplicity(&[0, 0, 1, 1]), 6.0);
    }

    #[test]
    fn cubic_drift_and_derivative() {
        let sys = cubic();
        assert_eq!(sys.eval_drift(&[2.0]).unwrap(), vec![-6.0]);
        let (dn, d2) = sys.eval_derivatives(&[2.0], &[1.0], &[1.0]).unwrap();
        assert_eq!(dn[(0, 0)], -11.0);
        assert_eq!(d2[0], -12.0);
    }

    #[test]
    fn zero_system_is_zero() {
        let maps = (0..=3).map(|k| SymMultiMap::zeros(k, 2)).collect();
        let sys = PolySystem::new(maps, DMatrix::identity(2, 2)).unwrap();
        assert_eq!(sys.eval_drift(&[1.5, -3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_system_has_zero_second_derivative() {
        let sys = PolySystem::from_monomials(
            2,
            1,
            &[mono(0, &[0], -1.0), mono(0, &[1], 2.0), mono(1, &[0], -0.5)],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let (_, d2) = sys
            .eval_derivatives(&[0.3, 0.2], &[1.0, -4.0], &[2.0, 5.0])
            .unwrap();
        assert_eq!(d2, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            cubic().eval_drift(&[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
        assert!(PolySystem::new(vec![SymMultiMap::zeros(0, 1)], DMatrix::zeros(1, 1)).is_err());
        assert!(PolySystem::new(
            vec![SymMultiMap::zeros(0, 1), SymMultiMap::zeros(1, 1)],
            DMatrix::zeros(2, 1)
        )
        .is_err());
    }

    #[test]
    fn param_count_uses_symmetric_dimension() {
        let sys = cubic();
        // d=1: every symmetric map is one number; 4 maps + 1 noise entry
        assert_eq!(sys.param_count(), 5);
        let triad = PolySystem::new(
            (0..=2).map(|k| SymMultiMap::zeros(k, 3)).collect(),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        // 3*3 + 3*(1 + 3 + 6)
        assert_eq!(triad.param_count(), 39);
    }

    #[test]
    fn coercivity_cases() {
        let rep = coercivity_probe(&cubic(), 64, &DEFAULT_PROBE_RADII, 1e-10).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.top_degree_radial, -1.0);
        assert!(rep.c_hat > 0.0);

        // strong linear instability is beaten by the cubic eventually
        let steep = PolySystem::from_monomials(
            1,
            3,
            &[mono(0, &[0], 11.0), mono(0, &[0, 0, 0], -1.0)],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!(coercivity_probe(&steep, 64, &DEFAULT_PROBE_RADII, 1e-10).unwrap().pass);

        let anti = PolySystem::from_monomials(
            1,
            3,
            &[mono(0, &[0, 0, 0], 1.0)],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let rep = coercivity_probe(&anti, 64, &DEFAULT_PROBE_RADII, 1e-10).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.worst_direction[0].abs(), 1.0);
        assert_eq!(rep.top_degree_radial, 1.0);
    }

    #[test]
    fn coercive_bound_holds_on_shells() {
        let sys = cubic();
        let rep = coercivity_probe(&sys, 8, &DEFAULT_PROBE_RADII, 1e-10).unwrap();
        for &r in &DEFAULT_PROBE_RADII {
            for s in [1.0, -1.0] {
                let x = [s * r];
                let v = x[0] * sys.eval_drift(&x).unwrap()[0];
                assert!(v <= rep.big_c_hat - rep.c_hat * r.powi(3) + 1e-9);
            }
        }
    }

    #[test]
    fn span_full_noise() {
        let sys = PolySystem::from_monomials(
            3,
            2,
            &[mono(0, &[1, 2], 1.0)],
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let rep = hypoellipticity_span(&sys, 1e-10, SpanSampling::default()).unwrap();
        assert_eq!(rep.level_dims, vec![3]);
        assert!(rep.full_rank);
    }

    #[test]
    fn span_one_step() {
        // σ_1 = e_1, N_2(x, x) = (0, x_1²)
        let sys = PolySystem::from_monomials(
            2,
            2,
            &[mono(1, &[0, 0], 1.0)],
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        for sampling in [
            SpanSampling::Exhaustive,
            SpanSampling::Randomized {
                n_random: 8,
                seed: 3,
            },
        ] {
            let rep = hypoellipticity_span(&sys, 1e-10, sampling).unwrap();
            assert_eq!(rep.level_dims, vec![1, 2]);
            assert!(rep.full_rank);
        }
    }

    #[test]
    fn span_partial_rank() {
        // second coordinate neither forced nor reached by the top-degree map
        let sys = PolySystem::from_monomials(
            2,
            2,
            &[mono(0, &[0, 0], -1.0), mono(1, &[1], -1.0)],
            DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        )
        .unwrap();
        let rep = hypoellipticity_span(&sys, 1e-10, SpanSampling::Exhaustive).unwrap();
        assert!(!rep.full_rank);
        assert_eq!(*rep.level_dims.last().unwrap(), 1);
        assert!(rep.level_dims.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn span_rejects_bad_tolerance() {
        assert!(hypoellipticity_span(&cubic(), 0.0, SpanSampling::Exhaustive).is_err());
    }

    #[test]
    fn apply_direction_cases() {
        let sys = cubic();
        let dir = ParamDirection::forcing(&sys, &[1.0]).unwrap();
        assert_eq!(apply_direction(&sys, &dir, 0.0).unwrap(), sys);
        let shifted = apply_direction(&sys, &dir, 0.3).unwrap();
        assert_eq!(shifted.maps()[0].coeffs(), &[0.3]);
        assert_eq!(&shifted.maps()[1..], &sys.maps()[1..]);
        assert_eq!(shifted.sigma(), sys.sigma());

        let lin = ParamDirection::drift(&sys, &[mono(0, &[0], 0.5)]).unwrap();
        let ab = apply_direction(&apply_direction(&sys, &lin, 0.25).unwrap(), &lin, 0.5).unwrap();
        assert_eq!(ab, apply_direction(&sys, &lin, 0.75).unwrap());
    }

    #[test]
    fn zero_direction_rejected() {
        let sys = cubic();
        assert!(ParamDirection::forcing(&sys, &[0.0]).is_err());
        assert!(ParamDirection::drift(&sys, &[mono(0, &[0, 0, 0, 0], 1.0)]).is_err());
    }
}
