//! Exact Gaussian-process regression with a zero prior mean.
//!
//! A [`GpModel`] caches the lower Cholesky factor of `K_n + σ_ε² I` (plus
//! whatever diagonal jitter was needed for the factorization to succeed) and
//! the dual weights `(K_n + σ_ε² I)⁻¹ z`, so posterior queries cost one
//! triangular solve each.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, KernelSpec};

const JITTER_START: f64 = 1e-9;
const JITTER_MAX: f64 = 1e-3;

/// Queried points and their noisy objective values, in query order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSet {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    noise_var: f64,
}

impl EvaluationSet {
    pub fn new(noise_var: f64) -> Result<Self> {
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return Err(Error::InvalidHyperparameter(format!(
                "noise variance {noise_var} must be finite and non-negative"
            )));
        }
        Ok(Self {
            points: Vec::new(),
            values: Vec::new(),
            noise_var,
        })
    }

    pub fn from_records(points: Vec<Vec<f64>>, values: Vec<f64>, noise_var: f64) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: values.len(),
            });
        }
        let mut set = Self::new(noise_var)?;
        for (p, v) in points.into_iter().zip(values) {
            set.push(p, v)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, point: Vec<f64>, value: f64) -> Result<()> {
        if let Some(first) = self.points.first() {
            if first.len() != point.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: point.len(),
                });
            }
        }
        if point.is_empty() || point.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("points must be non-empty and finite".into()));
        }
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("observed value {value} is not finite")));
        }
        self.points.push(point);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }
}

/// Posterior mean and variance at a single point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoment {
    pub mean: f64,
    pub var: f64,
}

impl PosteriorMoment {
    pub fn std(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }
}

/// Anything that provides a Gaussian posterior over a black-box function.
pub trait Surrogate {
    fn dim(&self) -> usize;

    fn posterior(&self, q: &[f64]) -> Result<PosteriorMoment>;

    /// Joint posterior mean and covariance at `qs`.
    fn joint_posterior(&self, qs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)>;
}

/// A fitted exact GP. Immutable; refitting builds a new model.
#[derive(Debug, Clone)]
pub struct GpModel<K = KernelSpec> {
    data: EvaluationSet,
    kernel: K,
    dim: usize,
    chol: DMatrix<f64>,
    dual: DVector<f64>,
    jitter: f64,
}

/// Lower Cholesky factor of `m + jitter·I`, trying no jitter first and then
/// `1e-9·mean(diag)` escalated ×10 up to `1e-3·mean(diag)`.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 0.0;
    loop {
        let jitter = rel * mean_diag;
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(c) = a.cholesky() {
            return Ok((c.l(), jitter));
        }
        rel = if rel == 0.0 { JITTER_START } else { rel * 10.0 };
        if rel > JITTER_MAX * 1.000_001 {
            return Err(Error::FactorizationFailed {
                max_jitter: JITTER_MAX * mean_diag,
            });
        }
    }
}

/// Fit a zero-mean GP to `data` under `kernel`.
pub fn fit_gp<K: Kernel>(data: &EvaluationSet, kernel: K) -> Result<GpModel<K>> {
    let dim = match (data.dim(), kernel.input_dim()) {
        (Some(d), Some(k)) if d != k => return Err(Error::DimensionMismatch { expected: k, found: d }),
        (Some(d), _) => d,
        (None, Some(k)) => k,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "cannot infer input dimension from an empty data set".into(),
            ))
        }
    };
    let n = data.len();
    let mut gram = kernel.gram(data.points());
    for i in 0..n {
        gram[(i, i)] += data.noise_var();
    }
    let (chol, jitter) = cholesky_with_jitter(&gram)?;
    let z = DVector::from_column_slice(data.values());
    let dual = solve_with_factor(&chol, &z);
    Ok(GpModel {
        data: data.clone(),
        kernel,
        dim,
        chol,
        dual,
        jitter,
    })
}

/// Solve `L Lᵀ x = b` given the lower factor `L`.
pub(crate) fn solve_with_factor(chol: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if chol.nrows() == 0 {
        return DVector::zeros(0);
    }
    let y = chol.solve_lower_triangular(b).expect("non-singular factor");
    chol.tr_solve_lower_triangular(&y).expect("non-singular factor")
}

impl<K: Kernel> GpModel<K> {
    pub fn data(&self) -> &EvaluationSet {
        &self.data
    }

    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    /// Lower Cholesky factor of the regularized Gram matrix.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Weights `(K_n + σ_ε² I)⁻¹ z`.
    pub fn dual(&self) -> &DVector<f64> {
        &self.dual
    }

    /// Diagonal jitter added on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// The matrix the cached factor reconstructs: `K_n + (σ_ε² + jitter) I`.
    pub fn regularized_gram(&self) -> DMatrix<f64> {
        let mut g = self.kernel.gram(self.data.points());
        for i in 0..g.nrows() {
            g[(i, i)] += self.data.noise_var() + self.jitter;
        }
        g
    }

    fn check_dim(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        Ok(())
    }

    /// `log N(z; 0, K_n + σ_ε² I)`.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let n = self.data.len();
        if n == 0 {
            return Err(Error::InsufficientData { needed: 1, found: 0 });
        }
        let z = DVector::from_column_slice(self.data.values());
        let fit = -0.5 * z.dot(&self.dual);
        let log_det_half: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        Ok(fit - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln())
    }
}

impl<K: Kernel> Surrogate for GpModel<K> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn posterior(&self, q: &[f64]) -> Result<PosteriorMoment> {
        self.check_dim(q)?;
        let prior = self.kernel.covariance(q, q);
        if self.data.is_empty() {
            return Ok(PosteriorMoment { mean: 0.0, var: prior.max(0.0) });
        }
        let k = self.kernel.cross(self.data.points(), q);
        let mean = k.dot(&self.dual);
        let v = self.chol.solve_lower_triangular(&k).expect("non-singular factor");
        Ok(PosteriorMoment {
            mean,
            var: (prior - v.norm_squared()).max(0.0),
        })
    }

    fn joint_posterior(&self, qs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        for q in qs {
            self.check_dim(q)?;
        }
        let prior = self.kernel.gram(qs);
        if self.data.is_empty() {
            return Ok((DVector::zeros(qs.len()), prior));
        }
        let n = self.data.len();
        let mut cross = DMatrix::zeros(n, qs.len());
        for (j, q) in qs.iter().enumerate() {
            cross.set_column(j, &self.kernel.cross(self.data.points(), q));
        }
        let mean = cross.tr_mul(&self.dual);
        let v = self.chol.solve_lower_triangular(&cross).expect("non-singular factor");
        let mut cov = prior - v.tr_mul(&v);
        // restore exact symmetry lost to round-off
        let cov_t = cov.transpose();
        cov += cov_t;
        cov *= 0.5;
        Ok((mean, cov))
    }
}

/// Pick the grid element with the highest log marginal likelihood.
/// Ties go to the lowest grid index; candidates that cannot be factorized are skipped.
pub fn select_hyperparams(data: &EvaluationSet, grid: &[KernelSpec]) -> Result<KernelSpec> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("hyperparameter grid"));
    }
    if data.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            found: data.len(),
        });
    }
    let mut best: Option<(f64, &KernelSpec)> = None;
    let mut last_err = None;
    for spec in grid {
        match fit_gp(data, spec.clone()).and_then(|m| m.log_marginal_likelihood()) {
            Ok(lml) if lml.is_finite() => {
                if best.is_none_or(|(b, _)| lml > b) {
                    best = Some((lml, spec));
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, spec)) => Ok(spec.clone()),
        None => Err(last_err.unwrap_or(Error::FactorizationFailed { max_jitter: JITTER_MAX })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;

    fn se(d: usize, l: f64) -> KernelSpec {
        KernelSpec::isotropic(KernelFamily::SquaredExponential, d, l, 1.0).unwrap()
    }

    #[test]
    fn prior_only_model() {
        let data = EvaluationSet::new(0.0).unwrap();
        let m = fit_gp(&data, se(2, 0.5)).unwrap();
        let p = m.posterior(&[0.3, 0.9]).unwrap();
        assert_eq!(p, PosteriorMoment { mean: 0.0, var: 1.0 });
        assert!(matches!(m.log_marginal_likelihood(), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn single_point_dual() {
        let k = KernelSpec::isotropic(KernelFamily::SquaredExponential, 1, 1.0, 1.7).unwrap();
        let data = EvaluationSet::from_records(vec![vec![0.4]], vec![2.0], 0.0).unwrap();
        let m = fit_gp(&data, k).unwrap();
        assert_eq!(m.jitter(), 0.0);
        assert!((m.dual()[0] - 2.0 / 1.7).abs() < 1e-15);
    }

    #[test]
    fn noise_free_interpolation() {
        let data = EvaluationSet::from_records(
            vec![vec![0.1], vec![0.5], vec![0.9]],
            vec![1.0, -2.0, 0.5],
            0.0,
        )
        .unwrap();
        let m = fit_gp(&data, se(1, 0.3)).unwrap();
        for (x, z) in data.points().iter().zip(data.values()) {
            let p = m.posterior(x).unwrap();
            assert!((p.mean - z).abs() < 1e-8);
            assert!(p.var <= 1e-8);
        }
    }

    #[test]
    fn dimension_errors() {
        let data = EvaluationSet::from_records(vec![vec![0.1, 0.2]], vec![1.0], 0.0).unwrap();
        assert!(matches!(fit_gp(&data, se(1, 1.0)), Err(Error::DimensionMismatch { .. })));
        let m = fit_gp(&data, se(2, 1.0)).unwrap();
        assert!(m.posterior(&[0.0]).is_err());
        let mut set = EvaluationSet::new(0.0).unwrap();
        set.push(vec![0.0], 1.0).unwrap();
        assert!(set.push(vec![0.0, 1.0], 1.0).is_err());
        assert!(set.push(vec![0.0], f64::NAN).is_err());
    }

    #[test]
    fn duplicated_points_need_jitter() {
        let data = EvaluationSet::from_records(
            vec![vec![0.2], vec![0.2], vec![0.2]],
            vec![1.0, 1.0, 1.0],
            0.0,
        )
        .unwrap();
        let m = fit_gp(&data, se(1, 1.0)).unwrap();
        assert!(m.jitter() > 0.0 && m.jitter() <= 1e-3);
    }

    #[test]
    fn lml_scalar_case() {
        let data = EvaluationSet::from_records(vec![vec![0.0]], vec![0.0], 0.0).unwrap();
        let lml = fit_gp(&data, se(1, 1.0)).unwrap().log_marginal_likelihood().unwrap();
        assert!((lml + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
        assert!((lml + 0.91894).abs() < 1e-5);
    }

    #[test]
    fn lml_decreases_when_outputs_scaled_up() {
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.37]).collect();
        let z: Vec<f64> = pts.iter().map(|p| p[0].sin()).collect();
        let z10: Vec<f64> = z.iter().map(|v| v * 10.0).collect();
        let a = fit_gp(&EvaluationSet::from_records(pts.clone(), z, 0.01).unwrap(), se(1, 1.0))
            .unwrap()
            .log_marginal_likelihood()
            .unwrap();
        let b = fit_gp(&EvaluationSet::from_records(pts, z10, 0.01).unwrap(), se(1, 1.0))
            .unwrap()
            .log_marginal_likelihood()
            .unwrap();
        assert!(b < a);
    }

    #[test]
    fn select_single_and_ties() {
        let data = EvaluationSet::from_records(vec![vec![0.0], vec![1.0]], vec![0.3, -0.1], 0.01).unwrap();
        let one = vec![se(1, 0.7)];
        assert_eq!(select_hyperparams(&data, &one).unwrap(), one[0]);
        // mirrored lengthscales on mirrored data give bit-identical evidence
        let sym = EvaluationSet::from_records(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![0.5, 0.5], 0.01)
            .unwrap();
        let a = KernelSpec::new(KernelFamily::SquaredExponential, vec![0.5, 1.0], 1.0).unwrap();
        let b = KernelSpec::new(KernelFamily::SquaredExponential, vec![1.0, 0.5], 1.0).unwrap();
        let la = fit_gp(&sym, a.clone()).unwrap().log_marginal_likelihood().unwrap();
        let lb = fit_gp(&sym, b.clone()).unwrap().log_marginal_likelihood().unwrap();
        assert_eq!(la, lb);
        assert_eq!(select_hyperparams(&sym, &[a.clone(), b.clone()]).unwrap(), a);
        assert_eq!(select_hyperparams(&sym, &[b.clone(), a]).unwrap(), b);
        assert!(matches!(
            select_hyperparams(&EvaluationSet::from_records(vec![vec![0.0]], vec![1.0], 0.0).unwrap(), &one),
            Err(Error::InsufficientData { needed: 2, found: 1 })
        ));
        assert!(matches!(select_hyperparams(&data, &[]), Err(Error::EmptyInput(_))));
    }
}
