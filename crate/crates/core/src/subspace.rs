//! Low-dimensional soft-prompt search space: random projections, output
//! similarity scores, and the instruction-coupled Nyström kernel.
//!
//! The instruction-coupled kernel is
//!
//! ```text
//! κ(φ, φ′) = l(φ)ᵀ A⁻¹ K A⁻¹ l(φ′),   A = L + ε I
//! ```
//!
//! where `l(φ)` holds base-kernel values between `φ` and the evaluated prompts,
//! `L` is the base Gram matrix of those prompts and `K` is the score-correlation
//! matrix of the instructions they produced. Evaluated at prompts `φ_i, φ_j` it
//! returns `K_ij`. The ridge `ε` is zero unless `L` is numerically singular.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::cholesky_with_jitter;
use crate::kernel::{Kernel, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryDistribution {
    Normal,
    Uniform,
}

/// A `d × d′` random matrix mapping soft prompts `φ ∈ ℝ^{d′}` to `ξ = Rφ ∈ ℝ^d`.
///
/// Entries have variance `1/d`, so `E‖Rφ‖² = ‖φ‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    entries: DMatrix<f64>,
    dist: EntryDistribution,
    seed: u64,
}

impl ProjectionMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn distribution(&self) -> EntryDistribution {
        self.dist
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output dimension `d`.
    pub fn full_dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Input dimension `d′`.
    pub fn reduced_dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        if entries.ncols() == 0 || entries.ncols() > entries.nrows() {
            return Err(Error::InvalidArgument(format!(
                "projection must be d × d′ with 1 ≤ d′ ≤ d, got {} × {}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self {
            entries,
            dist: EntryDistribution::Normal,
            seed: 0,
        })
    }
}

pub fn sample_projection(d: usize, d_prime: usize, dist: EntryDistribution, seed: u64) -> Result<ProjectionMatrix> {
    if d_prime == 0 || d_prime > d {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ d′ ≤ d, got d = {d}, d′ = {d_prime}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let var = 1.0 / d as f64;
    let entries = match dist {
        EntryDistribution::Normal => {
            let n = Normal::new(0.0, var.sqrt()).expect("positive std");
            DMatrix::from_fn(d, d_prime, |_, _| n.sample(&mut rng))
        }
        EntryDistribution::Uniform => {
            let a = (3.0 * var).sqrt();
            let u = Uniform::new_inclusive(-a, a).expect("valid range");
            DMatrix::from_fn(d, d_prime, |_, _| u.sample(&mut rng))
        }
    };
    Ok(ProjectionMatrix { entries, dist, seed })
}

/// `ξ = Rφ`.
pub fn project(r: &ProjectionMatrix, phi: &[f64]) -> Result<Vec<f64>> {
    if phi.len() != r.reduced_dim() {
        return Err(Error::DimensionMismatch {
            expected: r.reduced_dim(),
            found: phi.len(),
        });
    }
    Ok((&r.entries * DVector::from_column_slice(phi)).data.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[serde(alias = "exact")]
    ExactMatch,
    #[serde(alias = "f1")]
    TokenF1,
}

/// Whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Similarity of two token sequences in `[0, 1]`. Two empty sequences score 1.
pub fn similarity<S: AsRef<str>>(kind: SimilarityKind, a: &[S], b: &[S]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    match kind {
        SimilarityKind::ExactMatch => {
            let same = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_ref() == y.as_ref());
            if same {
                1.0
            } else {
                0.0
            }
        }
        SimilarityKind::TokenF1 => {
            if a.is_empty() || b.is_empty() {
                return 0.0;
            }
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for t in a {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
            let mut common = 0usize;
            for t in b {
                if let Some(c) = counts.get_mut(t.as_ref()) {
                    if *c > 0 {
                        *c -= 1;
                        common += 1;
                    }
                }
            }
            // 2PR/(P+R) with P = common/|a|, R = common/|b|
            2.0 * common as f64 / (a.len() + b.len()) as f64
        }
    }
}

/// Pairwise mean output similarity of `n` instructions over a shared validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    entries: DMatrix<f64>,
    kind: SimilarityKind,
}

impl ScoreMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    /// Wrap a precomputed matrix, checking symmetry, unit diagonal and range.
    pub fn from_entries(entries: DMatrix<f64>, kind: SimilarityKind) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: entries.ncols(),
            });
        }
        for i in 0..n {
            if entries[(i, i)] != 1.0 {
                return Err(Error::InvalidArgument(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = entries[(i, j)];
                if !(0.0..=1.0).contains(&v) || v != entries[(j, i)] {
                    return Err(Error::InvalidArgument(format!("entry ({i},{j}) = {v} is invalid")));
                }
            }
        }
        Ok(Self { entries, kind })
    }
}

/// `K_ij = mean_t sim(out_i[t], out_j[t])`.
///
/// `outputs[i][t]` is instruction `i`'s output on validation input `t`.
pub fn score_correlation_matrix<S: AsRef<str>>(outputs: &[Vec<Vec<S>>], kind: SimilarityKind) -> Result<ScoreMatrix> {
    let n = outputs.len();
    let t = outputs.first().map_or(0, Vec::len);
    if n > 0 && t == 0 {
        return Err(Error::EmptyInput("validation set"));
    }
    if let Some(bad) = outputs.iter().position(|o| o.len() != t) {
        return Err(Error::DimensionMismatch {
            expected: t,
            found: outputs[bad].len(),
        });
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let s: f64 = (0..t).map(|x| similarity(kind, &outputs[i][x], &outputs[j][x])).sum();
            let v = (s / t as f64).clamp(0.0, 1.0);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(ScoreMatrix { entries: k, kind })
}

/// Everything needed to evaluate the instruction-coupled kernel.
#[derive(Debug, Clone)]
pub struct InstructionKernelState {
    base: KernelSpec,
    prompts: Vec<Vec<f64>>,
    base_gram: DMatrix<f64>,
    scores: ScoreMatrix,
    ridge: f64,
    /// Lower Cholesky factor of `A`.
    factor: DMatrix<f64>,
    residual_weight: f64,
}

impl InstructionKernelState {
    pub fn new(base: KernelSpec, prompts: Vec<Vec<f64>>, scores: ScoreMatrix) -> Result<Self> {
        let n = prompts.len();
        if n == 0 {
            return Err(Error::EmptyInput("evaluated prompts"));
        }
        if scores.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: scores.len(),
            });
        }
        if let Some(p) = prompts.iter().find(|p| p.len() != base.dim()) {
            return Err(Error::DimensionMismatch {
                expected: base.dim(),
                found: p.len(),
            });
        }
        let base_gram = base.gram(&prompts);
        let (factor, ridge) = cholesky_with_jitter(&base_gram)?;
        Ok(Self {
            base,
            prompts,
            base_gram,
            scores,
            ridge,
            factor,
            residual_weight: 0.0,
        })
    }

    /// Add `w · (l(φ, φ′) − l(φ)ᵀ A⁻¹ l(φ′))`, the part of the base kernel not
    /// spanned by the evaluated prompts. It vanishes at evaluated prompts, so
    /// the reproduction of `K` is unaffected, but it keeps posterior variance
    /// alive away from the data.
    pub fn with_residual(mut self, weight: f64) -> Self {
        self.residual_weight = weight.max(0.0);
        self
    }

    pub fn prompts(&self) -> &[Vec<f64>] {
        &self.prompts
    }

    pub fn scores(&self) -> &ScoreMatrix {
        &self.scores
    }

    pub fn base(&self) -> &KernelSpec {
        &self.base
    }

    pub fn base_gram(&self) -> &DMatrix<f64> {
        &self.base_gram
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn residual_weight(&self) -> f64 {
        self.residual_weight
    }

    fn base_vector(&self, phi: &[f64]) -> DVector<f64> {
        self.base.cross(&self.prompts, phi)
    }

    /// `C⁻¹ l(φ)` with `A = C Cᵀ`.
    fn half_solve(&self, l: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_lower_triangular(l).expect("non-singular factor")
    }

    /// `(A⁻¹ l_a)ᵀ K (A⁻¹ l_b)` from half solves. Solving per call rather than
    /// forming `A⁻¹` keeps the error at the evaluated prompts near `cond(A)·u`.
    fn nystrom(&self, va: &DVector<f64>, vb: &DVector<f64>) -> f64 {
        let wa = self.factor.tr_solve_lower_triangular(va).expect("non-singular factor");
        let wb = self.factor.tr_solve_lower_triangular(vb).expect("non-singular factor");
        wa.dot(&(self.scores.entries() * wb))
    }
}

/// `l(φ)ᵀ A⁻¹ K A⁻¹ l(φ′)`, without any residual term.
pub fn instruction_kernel_eval(state: &InstructionKernelState, phi: &[f64], phi2: &[f64]) -> Result<f64> {
    for p in [phi, phi2] {
        if p.len() != state.base.dim() {
            return Err(Error::DimensionMismatch {
                expected: state.base.dim(),
                found: p.len(),
            });
        }
    }
    let va = state.half_solve(&state.base_vector(phi));
    let vb = state.half_solve(&state.base_vector(phi2));
    Ok(state.nystrom(&va, &vb))
}

impl Kernel for InstructionKernelState {
    fn covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        let va = self.half_solve(&self.base_vector(a));
        let vb = self.half_solve(&self.base_vector(b));
        let mut v = self.nystrom(&va, &vb);
        if self.residual_weight > 0.0 {
            v += self.residual_weight * (self.base.covariance(a, b) - va.dot(&vb));
        }
        v
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.base.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn projection_shape_and_seed() {
        let r = sample_projection(3, 2, EntryDistribution::Normal, 1).unwrap();
        assert_eq!(r.entries().shape(), (3, 2));
        assert_eq!(r, sample_projection(3, 2, EntryDistribution::Normal, 1).unwrap());
        assert!(sample_projection(2, 3, EntryDistribution::Normal, 1).is_err());
        assert!(sample_projection(2, 0, EntryDistribution::Normal, 1).is_err());
        let u = sample_projection(50, 5, EntryDistribution::Uniform, 2).unwrap();
        let a = (3.0f64 / 50.0).sqrt();
        assert!(u.entries().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn project_identity_and_zero() {
        let r = ProjectionMatrix::from_entries(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(project(&r, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let r = sample_projection(10, 4, EntryDistribution::Uniform, 9).unwrap();
        assert_eq!(project(&r, &[0.0; 4]).unwrap(), vec![0.0; 10]);
        assert!(project(&r, &[0.0; 3]).is_err());
    }

    #[test]
    fn project_matches_row_dot_products() {
        let r = sample_projection(17, 5, EntryDistribution::Normal, 4).unwrap();
        let phi = [0.3, -0.9, 0.1, 0.77, -0.25];
        let xi = project(&r, &phi).unwrap();
        for (i, v) in xi.iter().enumerate() {
            let mut dot = 0.0;
            for j in 0..5 {
                dot += r.entries()[(i, j)] * phi[j];
            }
            assert!((v - dot).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(SimilarityKind::ExactMatch, &toks("low pass"), &toks("low pass")), 1.0);
        assert_eq!(similarity(SimilarityKind::ExactMatch, &toks("low pass"), &toks("pass low")), 0.0);
        assert_eq!(similarity(SimilarityKind::TokenF1, &toks("a b"), &toks("c d")), 0.0);
        let f = similarity(SimilarityKind::TokenF1, &toks("a b c"), &toks("a b"));
        let (p, r) = (2.0 / 3.0, 1.0);
        assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!((f - 0.8).abs() < 1e-15);
        let e: Vec<String> = vec![];
        assert_eq!(similarity(SimilarityKind::TokenF1, &e, &e), 1.0);
        assert_eq!(similarity(SimilarityKind::ExactMatch, &e, &e), 1.0);
        assert_eq!(similarity(SimilarityKind::TokenF1, &e, &toks("a")), 0.0);
        // multiset matching: repeated tokens only match as often as they occur
        let f = similarity(SimilarityKind::TokenF1, &toks("a a a"), &toks("a"));
        assert!((f - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_matrix_examples() {
        let same = vec![vec![toks("x y"), toks("z")], vec![toks("x y"), toks("z")]];
        let k = score_correlation_matrix(&same, SimilarityKind::ExactMatch).unwrap();
        assert_eq!(k.entries(), &DMatrix::from_element(2, 2, 1.0));
        let disjoint = vec![vec![toks("a"), toks("b")], vec![toks("c"), toks("d")]];
        let k = score_correlation_matrix(&disjoint, SimilarityKind::ExactMatch).unwrap();
        assert_eq!(k.entries(), &DMatrix::identity(2, 2));
        let empty: Vec<Vec<Vec<String>>> = vec![vec![], vec![]];
        assert!(matches!(
            score_correlation_matrix(&empty, SimilarityKind::TokenF1),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn single_prompt_kernel() {
        let base = KernelSpec::isotropic(KernelFamily::SquaredExponential, 2, 1.0, 1.0).unwrap();
        let scores = ScoreMatrix::from_entries(DMatrix::from_element(1, 1, 1.0), SimilarityKind::TokenF1).unwrap();
        let phi = vec![0.2, -0.4];
        let st = InstructionKernelState::new(base, vec![phi.clone()], scores).unwrap();
        let v = instruction_kernel_eval(&st, &phi, &phi).unwrap();
        assert!((v - 1.0).abs() < 1e-7);
        assert!(instruction_kernel_eval(&st, &phi, &[0.0]).is_err());
    }

    #[test]
    fn residual_vanishes_at_prompts() {
        let base = KernelSpec::isotropic(KernelFamily::Matern52, 2, 0.5, 1.0).unwrap();
        let prompts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, -1.0]];
        let outs = vec![
            vec![toks("a b"), toks("c")],
            vec![toks("a"), toks("c d")],
            vec![toks("e"), toks("c")],
        ];
        let scores = score_correlation_matrix(&outs, SimilarityKind::TokenF1).unwrap();
        let st = InstructionKernelState::new(base, prompts.clone(), scores.clone())
            .unwrap()
            .with_residual(1.0);
        for i in 0..3 {
            for j in 0..3 {
                let v = st.covariance(&prompts[i], &prompts[j]);
                assert!((v - scores.entries()[(i, j)]).abs() < 1e-6);
            }
        }
        // far away only the residual survives
        let far = [5.0, 5.0];
        assert!((st.covariance(&far, &far) - 1.0).abs() < 1e-6);
    }
}
