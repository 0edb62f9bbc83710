//! Box-constrained search spaces and seeded quasi-random designs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `Θ = Π [lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    pub fn new(intervals: &[(f64, f64)]) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::InvalidBounds("at least one coordinate is required".into()));
        }
        for (i, &(lo, hi)) in intervals.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidBounds(format!("coordinate {i} has a non-finite limit")));
            }
            if lo > hi {
                return Err(Error::InvalidBounds(format!(
                    "coordinate {i}: lower limit {lo} exceeds upper limit {hi}"
                )));
            }
        }
        Ok(Self {
            lo: intervals.iter().map(|b| b.0).collect(),
            hi: intervals.iter().map(|b| b.1).collect(),
        })
    }

    /// The unit cube `[0, 1]^d`.
    pub fn unit(dim: usize) -> Self {
        Self::uniform(dim, 0.0, 1.0)
    }

    /// `[lo, hi]^d`.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        assert!(dim >= 1 && lo <= hi);
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.lo.iter().copied().zip(self.hi.iter().copied()).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (lo, hi))| v.is_finite() && lo <= v && v <= hi)
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if !self.contains(x) {
            return Err(Error::InvalidArgument(format!("point {x:?} lies outside the box")));
        }
        Ok(())
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Affine map of `x` into the unit cube. Zero-width coordinates map to 0.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let w = self.width(i);
                if w > 0.0 {
                    (v - self.lo[i]) / w
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| (self.lo[i] + v * self.width(i)).clamp(self.lo[i], self.hi[i]))
            .collect()
    }
}

/// Randomly shifted Halton sequence (Cranley–Patterson rotation).
#[derive(Debug, Clone)]
pub struct Halton {
    bases: Vec<u64>,
    shift: Vec<f64>,
    index: u64,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            bases: first_primes(dim),
            shift: (0..dim).map(|_| rng.random::<f64>()).collect(),
            // index 0 is the origin in every base
            index: 1,
        }
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        let i = self.index;
        self.index += 1;
        self.bases
            .iter()
            .zip(&self.shift)
            .map(|(&b, s)| (radical_inverse(i, b) + s).fract())
            .collect()
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut candidate = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|&&p| p * p <= candidate).all(|&p| !candidate.is_multiple_of(p)) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}

/// `count` seeded quasi-random points inside `bounds`.
pub fn quasi_random_design(bounds: &Bounds, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut seq = Halton::new(bounds.dim(), seed);
    (0..count).map(|_| bounds.from_unit(&seq.next_point())).collect()
}

/// `count` i.i.d. uniform points inside `bounds`.
pub fn uniform_design(bounds: &Bounds, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u: Vec<f64> = (0..bounds.dim()).map(|_| rng.random::<f64>()).collect();
            bounds.from_unit(&u)
        })
        .collect()
}

/// Deterministic sub-seed for stream `stream`, index `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_interval() {
        assert!(matches!(Bounds::new(&[(1.0, 0.0)]), Err(Error::InvalidBounds(_))));
        assert!(Bounds::new(&[(0.5, 0.5)]).is_ok());
    }

    #[test]
    fn unit_roundtrip() {
        let b = Bounds::new(&[(-5.0, 10.0), (0.0, 15.0)]).unwrap();
        let x = [2.5, 7.5];
        let u = b.to_unit(&x);
        assert_eq!(u, vec![0.5, 0.5]);
        assert_eq!(b.from_unit(&u), x.to_vec());
    }

    #[test]
    fn design_in_bounds_and_seeded() {
        let b = Bounds::new(&[(-1.0, 1.0), (2.0, 3.0), (0.0, 0.1)]).unwrap();
        let a = quasi_random_design(&b, 64, 3);
        assert!(a.iter().all(|x| b.contains(x)));
        assert_eq!(a, quasi_random_design(&b, 64, 3));
        assert_ne!(a, quasi_random_design(&b, 64, 4));
    }

    #[test]
    fn halton_fills_unit_interval_evenly() {
        let mut h = Halton::new(1, 0);
        let pts: Vec<f64> = (0..1000).map(|_| h.next_point()[0]).collect();
        for k in 0..10 {
            let lo = k as f64 / 10.0;
            let c = pts.iter().filter(|&&p| p >= lo && p < lo + 0.1).count();
            assert!((95..=105).contains(&c), "bin {k} has {c}");
        }
    }

    #[test]
    fn primes() {
        assert_eq!(first_primes(6), vec![2, 3, 5, 7, 11, 13]);
    }
}
