//! Standard normal density, distribution function and related helpers.

use std::f64::consts::{PI, SQRT_2};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `ln Φ(x)`, accurate far into the lower tail.
pub fn log_cdf(x: f64) -> f64 {
    if x > -20.0 {
        cdf(x).ln()
    } else {
        // asymptotic series for the Mills ratio
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

/// `φ(x) / Φ(x)`, the inverse Mills ratio, stable for very negative `x`.
pub fn inverse_mills(x: f64) -> f64 {
    if x > -20.0 {
        pdf(x) / cdf(x)
    } else {
        (log_pdf(x) - log_cdf(x)).exp()
    }
}

pub fn log_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!((cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert!((pdf(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn log_cdf_branches_join() {
        let a = cdf(-20.001).ln();
        let b = log_cdf(-20.001);
        assert!((a - b).abs() / a.abs() < 1e-9);
        assert!(log_cdf(-40.0).is_finite());
    }

    #[test]
    fn mills_ratio_tail() {
        // φ(x)/Φ(x) ~ -x for x → -∞
        let r = inverse_mills(-30.0);
        assert!((r - 30.0).abs() / 30.0 < 1e-2);
        assert!((inverse_mills(0.0) - 2.0 * pdf(0.0)).abs() < 1e-15);
    }
}
