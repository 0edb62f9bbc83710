//! Acquisition functions and their seeded maximization over a box.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, PosteriorMoment, Surrogate};
use crate::normal;
use crate::space::{derive_seed, quasi_random_design, Bounds};

pub const DEFAULT_STARTS: usize = 512;
pub const DEFAULT_KEEP: usize = 8;
pub const DEFAULT_REFINE_ITERS: usize = 50;
pub const DEFAULT_THOMPSON_CANDIDATES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AcquisitionKind {
    #[serde(rename = "ei")]
    ExpectedImprovement,
    #[serde(rename = "ucb")]
    UpperConfidenceBound,
    #[serde(rename = "thompson")]
    Thompson,
}

/// How candidate points are generated when maximizing an acquisition function.
#[derive(Debug, Clone, PartialEq)]
pub enum CandidateSearch {
    /// Quasi-random starts, the best `keep` refined by coordinate pattern search.
    /// For Thompson sampling, `starts` is replaced by the Thompson candidate count
    /// and no refinement happens.
    MultiStart {
        starts: usize,
        keep: usize,
        iterations: usize,
        thompson_candidates: usize,
    },
    /// Exhaustive evaluation of an explicit candidate list.
    Grid(Vec<Vec<f64>>),
}

impl Default for CandidateSearch {
    fn default() -> Self {
        CandidateSearch::MultiStart {
            starts: DEFAULT_STARTS,
            keep: DEFAULT_KEEP,
            iterations: DEFAULT_REFINE_ITERS,
            thompson_candidates: DEFAULT_THOMPSON_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    /// Exploration weight, UCB only.
    pub beta: f64,
    /// Best observed value `r*`, EI only.
    pub incumbent: f64,
    pub search: CandidateSearch,
}

impl AcquisitionSpec {
    pub fn expected_improvement(incumbent: f64) -> Self {
        Self {
            kind: AcquisitionKind::ExpectedImprovement,
            beta: 1.0,
            incumbent,
            search: CandidateSearch::default(),
        }
    }

    pub fn ucb(beta: f64) -> Self {
        Self {
            kind: AcquisitionKind::UpperConfidenceBound,
            beta,
            incumbent: 0.0,
            search: CandidateSearch::default(),
        }
    }

    pub fn thompson() -> Self {
        Self {
            kind: AcquisitionKind::Thompson,
            beta: 1.0,
            incumbent: 0.0,
            search: CandidateSearch::default(),
        }
    }

    pub fn with_search(mut self, search: CandidateSearch) -> Self {
        self.search = search;
        self
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            AcquisitionKind::UpperConfidenceBound if !(self.beta > 0.0 && self.beta.is_finite()) => Err(
                Error::InvalidArgument(format!("UCB beta must be positive, got {}", self.beta)),
            ),
            AcquisitionKind::ExpectedImprovement if !self.incumbent.is_finite() => Err(
                Error::InvalidArgument("EI incumbent must be finite".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Closed-form AF value (EI or UCB) for a posterior moment.
    pub fn value(&self, post: PosteriorMoment) -> f64 {
        match self.kind {
            AcquisitionKind::ExpectedImprovement => expected_improvement(post, self.incumbent),
            AcquisitionKind::UpperConfidenceBound => ucb_value(post, self.beta),
            AcquisitionKind::Thompson => post.mean,
        }
    }
}

/// Default UCB schedule `β_n = 2 ln(n² + 1)`, floored so that β stays positive at n = 0.
pub fn ucb_beta_schedule(n: usize) -> f64 {
    let n = n as f64;
    (2.0 * (n * n + 1.0).ln()).max(1e-3)
}

/// `E[(r − r*)⁺]` for `r ~ N(mean, var)`.
pub fn expected_improvement(post: PosteriorMoment, incumbent: f64) -> f64 {
    let gap = post.mean - incumbent;
    let sigma = post.std();
    if sigma <= 0.0 {
        return gap.max(0.0);
    }
    let u = gap / sigma;
    (gap * normal::cdf(u) + sigma * normal::pdf(u)).max(0.0)
}

/// `mean + √β·σ`.
pub fn ucb_value(post: PosteriorMoment, beta: f64) -> f64 {
    post.mean + beta.sqrt() * post.std()
}

/// Index of the first maximum. NaNs never win.
fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Draw one joint posterior sample over `candidates`.
pub fn sample_joint<S: Surrogate + ?Sized>(model: &S, candidates: &[Vec<f64>], seed: u64) -> Result<DVector<f64>> {
    let (mean, cov) = model.joint_posterior(candidates)?;
    let n = candidates.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
    if cov.diagonal().iter().all(|v| *v <= 0.0) {
        return Ok(mean);
    }
    let (l, _) = cholesky_with_jitter(&cov).or_else(|_| {
        // near-singular joint covariances (clustered candidates) get a larger absolute floor
        let mut c = cov.clone();
        let floor = 1e-6 * (cov.trace() / n as f64).max(1e-12);
        for i in 0..n {
            c[(i, i)] += floor;
        }
        cholesky_with_jitter(&c)
    })?;
    Ok(mean + l * eps)
}

/// Draw a joint posterior sample over `candidates` and return the index of its
/// maximum (lowest index on ties).
pub fn thompson_select<S: Surrogate + ?Sized>(model: &S, candidates: &[Vec<f64>], seed: u64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("Thompson candidate set"));
    }
    if candidates.len() == 1 {
        model.joint_posterior(candidates)?;
        return Ok(0);
    }
    let sample = sample_joint(model, candidates, seed)?;
    argmax(sample.as_slice()).ok_or_else(|| Error::InvalidArgument("posterior sample is NaN".into()))
}

/// Coordinate-wise pattern search from `start`, maximizing `f` inside `bounds`.
fn pattern_search<F: Fn(&[f64]) -> Result<f64>>(
    f: &F,
    bounds: &Bounds,
    start: Vec<f64>,
    start_value: f64,
    iterations: usize,
) -> Result<(Vec<f64>, f64)> {
    let d = bounds.dim();
    let mut x = start;
    let mut fx = start_value;
    let mut steps: Vec<f64> = (0..d).map(|i| 0.1 * bounds.width(i)).collect();
    for _ in 0..iterations {
        let mut improved = false;
        for i in 0..d {
            if steps[i] <= 0.0 {
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[i] = (y[i] + dir * steps[i]).clamp(bounds.lower()[i], bounds.upper()[i]);
                if y[i] == x[i] {
                    continue;
                }
                let fy = f(&y)?;
                if fy > fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            steps.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
    Ok((x, fx))
}

/// Maximize an acquisition function over `bounds`. Deterministic for a fixed seed.
pub fn maximize_acquisition<S: Surrogate + ?Sized>(
    spec: &AcquisitionSpec,
    model: &S,
    bounds: &Bounds,
    seed: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if bounds.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: bounds.dim(),
        });
    }
    if spec.kind == AcquisitionKind::Thompson {
        let candidates = match &spec.search {
            CandidateSearch::Grid(g) => g.clone(),
            CandidateSearch::MultiStart { thompson_candidates, .. } => {
                quasi_random_design(bounds, *thompson_candidates, derive_seed(seed, 1, 0))
            }
        };
        let idx = thompson_select(model, &candidates, derive_seed(seed, 2, 0))?;
        let mut x = candidates[idx].clone();
        bounds.clamp(&mut x);
        return Ok(x);
    }

    let af = |x: &[f64]| -> Result<f64> { Ok(spec.value(model.posterior(x)?)) };
    match &spec.search {
        CandidateSearch::Grid(grid) => {
            if grid.is_empty() {
                return Err(Error::EmptyInput("candidate grid"));
            }
            let values = grid.iter().map(|x| af(x)).collect::<Result<Vec<_>>>()?;
            let idx = argmax(&values).ok_or_else(|| Error::InvalidArgument("AF is NaN everywhere".into()))?;
            let mut x = grid[idx].clone();
            bounds.clamp(&mut x);
            Ok(x)
        }
        CandidateSearch::MultiStart {
            starts,
            keep,
            iterations,
            ..
        } => {
            let pts = quasi_random_design(bounds, (*starts).max(1), derive_seed(seed, 0, 0));
            let values = pts.iter().map(|x| af(x)).collect::<Result<Vec<_>>>()?;
            let mut order: Vec<usize> = (0..pts.len()).filter(|&i| !values[i].is_nan()).collect();
            // stable sort keeps lower indices first among equal values
            order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("NaNs filtered"));
            let mut best: Option<(Vec<f64>, f64)> = None;
            for &i in order.iter().take((*keep).max(1)) {
                let (x, fx) = pattern_search(&af, bounds, pts[i].clone(), values[i], *iterations)?;
                if best.as_ref().is_none_or(|(_, b)| fx > *b) {
                    best = Some((x, fx));
                }
            }
            best.map(|(x, _)| x)
                .ok_or_else(|| Error::InvalidArgument("AF is NaN everywhere".into()))
        }
    }
}
