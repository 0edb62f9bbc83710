//! Synthetic test objectives (all maximized).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bo::Objective;
use crate::error::{Error, Result};
use crate::space::Bounds;

fn add_noise(value: f64, noise_std: f64, seed: u64) -> f64 {
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        value + Normal::new(0.0, noise_std).expect("positive std").sample(&mut rng)
    } else {
        value
    }
}

fn check_dim(bounds: &Bounds, x: &[f64]) -> Result<()> {
    if x.len() != bounds.dim() {
        return Err(Error::DimensionMismatch {
            expected: bounds.dim(),
            found: x.len(),
        });
    }
    Ok(())
}

/// `r(θ) = −(θ − 0.3)²` on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Sphere1D {
    bounds: Bounds,
    pub optimum: f64,
    pub noise_std: f64,
}

impl Default for Sphere1D {
    fn default() -> Self {
        Self {
            bounds: Bounds::unit(1),
            optimum: 0.3,
            noise_std: 0.0,
        }
    }
}

impl Objective for Sphere1D {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn evaluate(&mut self, x: &[f64], seed: u64) -> Result<f64> {
        check_dim(&self.bounds, x)?;
        Ok(add_noise(-(x[0] - self.optimum).powi(2), self.noise_std, seed))
    }

    fn descriptor(&self) -> String {
        "sphere1d".into()
    }
}

/// Negated Branin on `[−5, 10] × [0, 15]`; maximum `−0.397887…`.
#[derive(Debug, Clone)]
pub struct Branin {
    bounds: Bounds,
    pub noise_std: f64,
}

impl Branin {
    pub const OPTIMUM: f64 = -0.397_887_357_729_738;

    pub fn value(x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        let (x1, x2) = (x[0], x[1]);
        let b = 5.1 / (4.0 * PI * PI);
        let c = 5.0 / PI;
        let t = 1.0 / (8.0 * PI);
        let f = (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0;
        -f
    }
}

impl Default for Branin {
    fn default() -> Self {
        Self {
            bounds: Bounds::new(&[(-5.0, 10.0), (0.0, 15.0)]).expect("static bounds"),
            noise_std: 0.0,
        }
    }
}

impl Objective for Branin {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn evaluate(&mut self, x: &[f64], seed: u64) -> Result<f64> {
        check_dim(&self.bounds, x)?;
        Ok(add_noise(Self::value(x), self.noise_std, seed))
    }

    fn descriptor(&self) -> String {
        "branin".into()
    }
}

/// `r(θ) = −‖θ − c‖²` on `[0, 1]^d` with additive Gaussian noise and a seeded center.
#[derive(Debug, Clone)]
pub struct NoisyQuadratic {
    bounds: Bounds,
    pub center: Vec<f64>,
    pub noise_std: f64,
}

impl NoisyQuadratic {
    pub fn new(dim: usize, noise_std: f64, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            bounds: Bounds::unit(dim),
            center: (0..dim).map(|_| rng.random_range(0.2..0.8)).collect(),
            noise_std,
        }
    }
}

impl Objective for NoisyQuadratic {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn evaluate(&mut self, x: &[f64], seed: u64) -> Result<f64> {
        check_dim(&self.bounds, x)?;
        let v: f64 = -x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
        Ok(add_noise(v, self.noise_std, seed))
    }

    fn descriptor(&self) -> String {
        format!("noisy_quadratic{}", self.bounds.dim())
    }
}
