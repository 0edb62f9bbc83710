//! GP surrogate over raw coordinates: inputs are mapped to the unit cube and
//! outputs standardized before fitting, and posterior moments are reported
//! back on the original output scale.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gp::{fit_gp, select_hyperparams, EvaluationSet, GpModel, PosteriorMoment, Surrogate};
use crate::kernel::{Kernel, KernelSpec};
use crate::space::Bounds;

/// Noise floor (in standardized output units) applied when fitting.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Output standardization `z ↦ (z − offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputScaling {
    pub offset: f64,
    pub scale: f64,
}

impl OutputScaling {
    pub fn identity() -> Self {
        Self { offset: 0.0, scale: 1.0 }
    }

    pub fn fit(values: &[f64]) -> Self {
        if values.len() < 2 {
            return Self {
                offset: values.first().copied().unwrap_or(0.0),
                scale: 1.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt();
        Self {
            offset: mean,
            scale: if scale > 1e-12 { scale } else { 1.0 },
        }
    }

    pub fn forward(&self, z: f64) -> f64 {
        (z - self.offset) / self.scale
    }
}

/// A fitted model on normalized data plus the transforms needed to query it
/// in raw coordinates.
#[derive(Debug, Clone)]
pub struct Scaled<M> {
    inner: M,
    bounds: Option<Bounds>,
    scaling: OutputScaling,
}

impl<M: Surrogate> Scaled<M> {
    pub fn new(inner: M, bounds: Option<Bounds>, scaling: OutputScaling) -> Self {
        Self { inner, bounds, scaling }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn scaling(&self) -> OutputScaling {
        self.scaling
    }

    fn map_input(&self, q: &[f64]) -> Vec<f64> {
        match &self.bounds {
            Some(b) => b.to_unit(q),
            None => q.to_vec(),
        }
    }
}

impl<M: Surrogate> Surrogate for Scaled<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn posterior(&self, q: &[f64]) -> Result<PosteriorMoment> {
        let p = self.inner.posterior(&self.map_input(q))?;
        let s = self.scaling.scale;
        Ok(PosteriorMoment {
            mean: p.mean * s + self.scaling.offset,
            var: p.var * s * s,
        })
    }

    fn joint_posterior(&self, qs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mapped: Vec<Vec<f64>> = qs.iter().map(|q| self.map_input(q)).collect();
        let (mean, cov) = self.inner.joint_posterior(&mapped)?;
        let s = self.scaling.scale;
        Ok((mean.map(|m| m * s + self.scaling.offset), cov * (s * s)))
    }
}

/// Normalize `data` (inputs by `bounds` when given, outputs by standardization).
pub fn normalize(data: &EvaluationSet, bounds: Option<&Bounds>) -> Result<(EvaluationSet, OutputScaling)> {
    let scaling = OutputScaling::fit(data.values());
    let noise = (data.noise_var() / (scaling.scale * scaling.scale)).max(NOISE_FLOOR);
    let points = data
        .points()
        .iter()
        .map(|p| bounds.map_or_else(|| p.clone(), |b| b.to_unit(p)))
        .collect();
    let values = data.values().iter().map(|&z| scaling.forward(z)).collect();
    Ok((EvaluationSet::from_records(points, values, noise)?, scaling))
}

/// Fit a scaled surrogate with the given kernel on normalized data.
pub fn fit_scaled<K: Kernel>(data: &EvaluationSet, bounds: Option<&Bounds>, kernel: K) -> Result<Scaled<GpModel<K>>> {
    let (normalized, scaling) = normalize(data, bounds)?;
    let model = fit_gp(&normalized, kernel)?;
    Ok(Scaled::new(model, bounds.cloned(), scaling))
}

/// Grid-select the kernel on normalized data, then fit.
pub fn select_and_fit(
    data: &EvaluationSet,
    bounds: &Bounds,
    grid: &[KernelSpec],
) -> Result<(Scaled<GpModel<KernelSpec>>, KernelSpec)> {
    let (normalized, scaling) = normalize(data, Some(bounds))?;
    let spec = select_hyperparams(&normalized, grid)?;
    let model = fit_gp(&normalized, spec.clone())?;
    Ok((Scaled::new(model, Some(bounds.clone()), scaling), spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;

    #[test]
    fn scaled_model_interpolates_raw_values() {
        let bounds = Bounds::new(&[(-5.0, 10.0)]).unwrap();
        let data = EvaluationSet::from_records(
            vec![vec![-4.0], vec![0.0], vec![3.0], vec![9.0]],
            vec![120.0, 80.0, 95.0, 130.0],
            0.0,
        )
        .unwrap();
        let k = KernelSpec::isotropic(KernelFamily::Matern52, 1, 0.2, 1.0).unwrap();
        let m = fit_scaled(&data, Some(&bounds), k).unwrap();
        for (x, z) in data.points().iter().zip(data.values()) {
            let p = m.posterior(x).unwrap();
            assert!((p.mean - z).abs() < 1e-2, "{} vs {z}", p.mean);
        }
        // far from data the posterior reverts to the sample mean
        let far = m.posterior(&[6.0]).unwrap();
        assert!(far.var > 0.0);
    }

    #[test]
    fn constant_outputs_do_not_divide_by_zero() {
        let s = OutputScaling::fit(&[3.0, 3.0, 3.0]);
        assert_eq!(s.scale, 1.0);
        assert_eq!(s.forward(3.0), 0.0);
    }
}
