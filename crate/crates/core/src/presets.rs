//! Built-in systems.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly_system::{Monomial, PolySystem};
use crate::rng::{derive_seed, purpose, RngStream, StreamCursor};

fn mono(out: usize, vars: &[usize], coef: f64) -> Monomial {
    Monomial {
        out,
        vars: vars.to_vec(),
        coef,
    }
}

/// `dx = (x − x³) dt + σ dW`.
pub fn scalar_cubic(sigma: f64) -> PolySystem {
    PolySystem::from_monomials(
        1,
        3,
        &[mono(0, &[0], 1.0), mono(0, &[0, 0, 0], -1.0)],
        DMatrix::from_element(1, 1, sigma),
    )
    .expect("static preset")
}

/// `dx = A x dt + Σ dW`.
pub fn ou(a: &DMatrix<f64>, sigma: DMatrix<f64>) -> Result<PolySystem> {
    if !a.is_square() {
        return Err(Error::Dimension("drift matrix must be square".into()));
    }
    let d = a.nrows();
    let terms: Vec<Monomial> = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .filter(|&(i, j)| a[(i, j)] != 0.0)
        .map(|(i, j)| mono(i, &[j], a[(i, j)]))
        .collect();
    PolySystem::from_monomials(d, 1, &terms, sigma)
}

/// Scalar `dx = −γ x dt + σ dW`.
pub fn scalar_ou(gamma: f64, sigma: f64) -> PolySystem {
    ou(
        &DMatrix::from_element(1, 1, -gamma),
        DMatrix::from_element(1, 1, sigma),
    )
    .expect("static preset")
}

/// A random matrix whose symmetric part is at most `−½ I`, so it is both
/// stable and coercive: `−(L Lᵀ + ½ I) + (K − Kᵀ)/2` with Gaussian `L, K`.
pub fn random_stable_matrix(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut cur = StreamCursor::new(RngStream::new(derive_seed(seed, purpose::PROBE_POINTS), 0));
    let scale = 1.0 / (dim as f64).sqrt();
    let l = DMatrix::from_fn(dim, dim, |_, _| scale * cur.next_normal());
    let k = DMatrix::from_fn(dim, dim, |_, _| scale * cur.next_normal());
    -(&l * l.transpose() + DMatrix::identity(dim, dim) * 0.5) + (&k - k.transpose()) * 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriadParams {
    /// Coupling coefficients; must sum to zero.
    pub b: [f64; 3],
    /// Diagonal damping.
    pub gamma: [f64; 3],
    /// Noise amplitude, `Σ = sigma · I`.
    pub sigma: f64,
}

impl Default for TriadParams {
    fn default() -> Self {
        Self {
            b: [1.0, 0.5, -1.5],
            gamma: [0.5, 1.0, 1.5],
            sigma: 0.5,
        }
    }
}

/// Energy-conserving quadratic triad with linear damping:
/// `dx_1 = (b_1 x_2 x_3 − γ_1 x_1) dt + σ dW_1` and cyclic.
pub fn triad(p: &TriadParams) -> Result<PolySystem> {
    let s: f64 = p.b.iter().sum();
    if s.abs() > 1e-12 * p.b.iter().map(|v| v.abs()).sum::<f64>().max(1.0) {
        return Err(Error::config("system.b", "triad coefficients must sum to zero"));
    }
    let mut terms = Vec::new();
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        terms.push(mono(i, &[j, k], p.b[i]));
        terms.push(mono(i, &[i], -p.gamma[i]));
    }
    PolySystem::from_monomials(3, 2, &terms, DMatrix::identity(3, 3) * p.sigma)
}

/// Two-dimensional system driven by noise in the first coordinate only:
/// `dx = (−x + (0, x_1²)) dt + e_1 dW`.
pub fn hypoelliptic_pair() -> PolySystem {
    PolySystem::from_monomials(
        2,
        2,
        &[mono(0, &[0], -1.0), mono(1, &[1], -1.0), mono(1, &[0, 0], 1.0)],
        DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
    )
    .expect("static preset")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly_system::{coercivity_probe, hypoellipticity_span, SpanSampling, DEFAULT_PROBE_RADII};

    #[test]
    fn triad_conserves_energy() {
        let sys = triad(&TriadParams::default()).unwrap();
        let rep = coercivity_probe(&sys, 256, &DEFAULT_PROBE_RADII, 1e-12).unwrap();
        assert!(rep.top_degree_radial.abs() <= 1e-12);
        assert!(rep.pass);
    }

    #[test]
    fn triad_rejects_unbalanced() {
        let p = TriadParams {
            b: [1.0, 1.0, 1.0],
            ..Default::default()
        };
        assert!(triad(&p).is_err());
    }

    #[test]
    fn random_stable_is_coercive() {
        for seed in 0..5 {
            let a = random_stable_matrix(4, seed);
            let sym = (&a + a.transpose()) * 0.5;
            let top = sym.symmetric_eigenvalues().max();
            assert!(top <= -0.5 + 1e-12);
            let sys = ou(&a, DMatrix::identity(4, 4)).unwrap();
            assert!(coercivity_probe(&sys, 64, &DEFAULT_PROBE_RADII, 1e-10).unwrap().pass);
        }
    }

    #[test]
    fn presets_are_hypoelliptic() {
        for sys in [scalar_cubic(1.0), triad(&TriadParams::default()).unwrap(), hypoelliptic_pair()] {
            assert!(hypoellipticity_span(&sys, 1e-10, SpanSampling::default()).unwrap().full_rank);
        }
    }
}
