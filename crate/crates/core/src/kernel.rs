//! Stationary covariance functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A positive semidefinite covariance function over points of a fixed dimension.
pub trait Kernel {
    /// Evaluate the covariance of `a` and `b`. Callers guarantee matching dimensions.
    fn covariance(&self, a: &[f64], b: &[f64]) -> f64;

    /// Input dimension, when the kernel fixes one.
    fn input_dim(&self) -> Option<usize>;

    fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.covariance(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn cross(&self, xs: &[Vec<f64>], q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|x| self.covariance(x, q)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[serde(alias = "se", alias = "rbf")]
    SquaredExponential,
    #[serde(alias = "matern52", alias = "matern")]
    Matern52,
}

/// Stationary kernel with per-coordinate lengthscales and a signal variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    lengthscales: Vec<f64>,
    signal_var: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscales: Vec<f64>, signal_var: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::InvalidHyperparameter("no lengthscales".into()));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidHyperparameter(format!("lengthscale {l} is not positive")));
        }
        if !(signal_var.is_finite() && signal_var > 0.0) {
            return Err(Error::InvalidHyperparameter(format!(
                "signal variance {signal_var} is not positive"
            )));
        }
        Ok(Self {
            family,
            lengthscales,
            signal_var,
        })
    }

    pub fn isotropic(family: KernelFamily, dim: usize, lengthscale: f64, signal_var: f64) -> Result<Self> {
        Self::new(family, vec![lengthscale; dim], signal_var)
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Checked evaluation of `κ(a, b)`.
    pub fn kernel_eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        for x in [a, b] {
            if x.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    found: x.len(),
                });
            }
        }
        Ok(self.covariance(a, b))
    }

    fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum()
    }
}

impl Kernel for KernelSpec {
    fn covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2 = self.scaled_sq_dist(a, b);
        match self.family {
            KernelFamily::SquaredExponential => self.signal_var * (-0.5 * r2).exp(),
            KernelFamily::Matern52 => {
                let s = (5.0 * r2).sqrt();
                self.signal_var * (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
        }
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.dim())
    }
}

/// Cartesian grid of isotropic kernels, lengthscale-major.
pub fn hyperparameter_grid(
    family: KernelFamily,
    dim: usize,
    lengthscales: &[f64],
    signal_vars: &[f64],
) -> Result<Vec<KernelSpec>> {
    let mut grid = Vec::with_capacity(lengthscales.len() * signal_vars.len());
    for &l in lengthscales {
        for &s in signal_vars {
            grid.push(KernelSpec::isotropic(family, dim, l, s)?);
        }
    }
    Ok(grid)
}

/// Default grid for inputs scaled to the unit cube and standardized outputs.
pub fn default_grid(family: KernelFamily, dim: usize) -> Vec<KernelSpec> {
    hyperparameter_grid(
        family,
        dim,
        &[0.05, 0.1, 0.2, 0.4, 0.8, 1.6],
        &[0.5, 1.0, 2.0],
    )
    .expect("static grid is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn se(l: f64) -> KernelSpec {
        KernelSpec::isotropic(KernelFamily::SquaredExponential, 1, l, 1.0).unwrap()
    }

    #[test]
    fn se_values() {
        assert_eq!(se(1.0).kernel_eval(&[0.0], &[0.0]).unwrap(), 1.0);
        let v = se(1.0).kernel_eval(&[0.0], &[1.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn matern_at_zero_and_one() {
        let k = KernelSpec::isotropic(KernelFamily::Matern52, 1, 1.0, 2.0).unwrap();
        assert_eq!(k.kernel_eval(&[0.3], &[0.3]).unwrap(), 2.0);
        let s5 = 5f64.sqrt();
        let expected = 2.0 * (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert!((k.kernel_eval(&[0.0], &[1.0]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            se(1.0).kernel_eval(&[0.0, 1.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(KernelSpec::isotropic(KernelFamily::Matern52, 2, 0.0, 1.0).is_err());
        assert!(KernelSpec::isotropic(KernelFamily::Matern52, 2, 1.0, -1.0).is_err());
    }

    fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    proptest! {
        #[test]
        fn symmetric(a in prop::collection::vec(-3.0f64..3.0, 3),
                     b in prop::collection::vec(-3.0f64..3.0, 3),
                     l in 0.1f64..3.0, matern in any::<bool>()) {
            let fam = if matern { KernelFamily::Matern52 } else { KernelFamily::SquaredExponential };
            let k = KernelSpec::isotropic(fam, 3, l, 1.3).unwrap();
            prop_assert_eq!(k.kernel_eval(&a, &b).unwrap(), k.kernel_eval(&b, &a).unwrap());
        }

        #[test]
        fn gram_is_psd(pts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 2..25),
                       l in 0.05f64..2.0, matern in any::<bool>()) {
            let fam = if matern { KernelFamily::Matern52 } else { KernelFamily::SquaredExponential };
            let k = KernelSpec::isotropic(fam, 2, l, 1.0).unwrap();
            let g = k.gram(&pts);
            prop_assert!(min_eigenvalue(&g) >= -1e-8 * g.trace());
            prop_assert_eq!(g.clone(), g.transpose());
        }
    }
}
