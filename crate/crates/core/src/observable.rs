//! Scalar observables `φ: R^d → R` with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Growth class of an observable; all built-in kinds are admissible for
/// weights `e^{-δ‖x‖²}` with any `δ > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Growth {
    Bounded,
    Polynomial(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Observable {
    /// `x_i`
    Coordinate { index: usize },
    /// `x_i x_j`
    Product { i: usize, j: usize },
    /// `‖x‖²`
    NormSquared,
    /// `Σ w_i x_i`
    Linear { weights: Vec<f64> },
    /// `tanh(x_i)`
    Tanh { index: usize },
    Constant { value: f64 },
}

impl Observable {
    pub fn name(&self) -> String {
        match self {
            Observable::Coordinate { index } => format!("x{}", index + 1),
            Observable::Product { i, j } => format!("x{}*x{}", i + 1, j + 1),
            Observable::NormSquared => "|x|^2".into(),
            Observable::Linear { weights } => format!("linear{weights:?}"),
            Observable::Tanh { index } => format!("tanh(x{})", index + 1),
            Observable::Constant { value } => format!("const({value})"),
        }
    }

    pub fn growth(&self) -> Growth {
        match self {
            Observable::Coordinate { .. } | Observable::Linear { .. } => Growth::Polynomial(1),
            Observable::Product { .. } | Observable::NormSquared => Growth::Polynomial(2),
            Observable::Tanh { .. } | Observable::Constant { .. } => Growth::Bounded,
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match self {
            Observable::Coordinate { index } | Observable::Tanh { index } => *index < dim,
            Observable::Product { i, j } => *i < dim && *j < dim,
            Observable::Linear { weights } => weights.len() == dim,
            Observable::NormSquared | Observable::Constant { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "observable {} does not fit dimension {dim}",
                self.name()
            )))
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Observable::Coordinate { index } => x[*index],
            Observable::Product { i, j } => x[*i] * x[*j],
            Observable::NormSquared => x.iter().map(|v| v * v).sum(),
            Observable::Linear { weights } => weights.iter().zip(x).map(|(w, v)| w * v).sum(),
            Observable::Tanh { index } => x[*index].tanh(),
            Observable::Constant { value } => *value,
        }
    }

    /// `out ← ∇φ(x)`.
    #[inline]
    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match self {
            Observable::Coordinate { index } => out[*index] = 1.0,
            Observable::Product { i, j } => {
                out[*i] += x[*j];
                out[*j] += x[*i];
            }
            Observable::NormSquared => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = 2.0 * v;
                }
            }
            Observable::Linear { weights } => out.copy_from_slice(weights),
            Observable::Tanh { index } => {
                let t = x[*index].tanh();
                out[*index] = 1.0 - t * t;
            }
            Observable::Constant { .. } => {}
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.grad_into(x, &mut g);
        g
    }

    /// `∇φ(x) · v`
    #[inline]
    pub fn directional(&self, x: &[f64], v: &[f64]) -> f64 {
        match self {
            Observable::Coordinate { index } => v[*index],
            Observable::Product { i, j } => x[*j] * v[*i] + x[*i] * v[*j],
            Observable::NormSquared => 2.0 * x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>(),
            Observable::Linear { weights } => weights.iter().zip(v).map(|(w, b)| w * b).sum(),
            Observable::Tanh { index } => {
                let t = x[*index].tanh();
                (1.0 - t * t) * v[*index]
            }
            Observable::Constant { .. } => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all(dim: usize) -> Vec<Observable> {
        vec![
            Observable::Coordinate { index: dim - 1 },
            Observable::Product { i: 0, j: dim - 1 },
            Observable::Product { i: 0, j: 0 },
            Observable::NormSquared,
            Observable::Linear {
                weights: (0..dim).map(|i| i as f64 - 0.5).collect(),
            },
            Observable::Tanh { index: 0 },
            Observable::Constant { value: 2.5 },
        ]
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            x in prop::collection::vec(-3.0f64..3.0, 3)
        ) {
            let eps = 1e-5;
            for phi in all(3) {
                let g = phi.grad(&x);
                for k in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += eps;
                    xm[k] -= eps;
                    let fd = (phi.eval(&xp) - phi.eval(&xm)) / (2.0 * eps);
                    let scale = g[k].abs().max(1.0);
                    prop_assert!((fd - g[k]).abs() / scale < 1e-6, "{} d{k}: {fd} vs {}", phi.name(), g[k]);
                }
                let v = [0.3, -1.2, 0.7];
                let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
                prop_assert!((phi.directional(&x, &v) - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_checks() {
        assert!(Observable::Coordinate { index: 3 }.check_dim(3).is_err());
        assert!(Observable::Linear { weights: vec![1.0] }.check_dim(2).is_err());
        assert!(Observable::NormSquared.check_dim(5).is_ok());
    }
}
