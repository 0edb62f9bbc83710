//! Preferential BO: a latent utility learned from pairwise duels.
//!
//! The duel likelihood is the probit `P(left wins) = Φ((u(left) − u(right)) / (√2·σ_p))`
//! and the latent posterior is a Laplace approximation, found by Newton ascent in
//! whitened coordinates `f = L v` with `K = L Lᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use crate::acquisition::{maximize_acquisition, AcquisitionSpec, CandidateSearch};
use crate::bo::{RunError, StepClock, STREAM_AF, STREAM_EVAL, STREAM_INIT};
use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, PosteriorMoment, Surrogate};
use crate::kernel::{Kernel, KernelFamily, KernelSpec};
use crate::normal;
use crate::space::{derive_seed, quasi_random_design, Bounds};
use crate::trace::{RunTrace, StepDetail, TraceStep, Winner};

pub const MAX_NEWTON_ITERS: usize = 50;
pub const GRADIENT_TOL: f64 = 1e-8;
/// Gradient norm still accepted when the line search can no longer improve.
const STALL_TOL: f64 = 1e-5;
const MAX_HALVINGS: usize = 40;

/// `Φ(h / (√2·σ_p))`.
pub fn duel_probability(h: f64, sigma_p: f64) -> f64 {
    normal::cdf(h / (std::f64::consts::SQRT_2 * sigma_p))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DuelRecord {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub winner: Winner,
}

impl DuelRecord {
    pub fn new(left: Vec<f64>, right: Vec<f64>, winner: Winner) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::DimensionMismatch {
                expected: left.len(),
                found: right.len(),
            });
        }
        if left == right {
            return Err(Error::InvalidArgument("a duel needs two distinct points".into()));
        }
        Ok(Self { left, right, winner })
    }

    fn winner_loser(&self) -> (&[f64], &[f64]) {
        match self.winner {
            Winner::Left => (&self.left, &self.right),
            Winner::Right => (&self.right, &self.left),
        }
    }
}

/// Laplace posterior over the latent utility at every distinct duel endpoint.
#[derive(Debug, Clone)]
pub struct PreferenceModel {
    duels: Vec<DuelRecord>,
    kernel: KernelSpec,
    bounds: Option<Bounds>,
    sigma_p: f64,
    points: Vec<Vec<f64>>,
    /// (winner index, loser index) per duel.
    pairs: Vec<(usize, usize)>,
    chol: DMatrix<f64>,
    /// Cholesky factor of `M = I + Lᵀ W L` at the mode.
    m_chol: DMatrix<f64>,
    mode: DVector<f64>,
    iterations: usize,
    log_evidence: f64,
}

fn log_likelihood(f: &DVector<f64>, pairs: &[(usize, usize)], scale: f64) -> f64 {
    pairs.iter().map(|&(w, l)| normal::log_cdf((f[w] - f[l]) / scale)).sum()
}

/// Gradient and negative Hessian of the log-likelihood in `f`.
fn likelihood_derivatives(f: &DVector<f64>, pairs: &[(usize, usize)], scale: f64) -> (DVector<f64>, DMatrix<f64>) {
    let m = f.len();
    let mut grad = DVector::zeros(m);
    let mut w = DMatrix::zeros(m, m);
    for &(a, b) in pairs {
        let z = (f[a] - f[b]) / scale;
        let r = normal::inverse_mills(z);
        let g = r / scale;
        let h = r * (z + r) / (scale * scale);
        grad[a] += g;
        grad[b] -= g;
        w[(a, a)] += h;
        w[(b, b)] += h;
        w[(a, b)] -= h;
        w[(b, a)] -= h;
    }
    (grad, w)
}

fn chol_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Divergence("I + LᵀWL is not positive definite".into()))
}

fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l.solve_lower_triangular(b).expect("non-singular factor");
    l.tr_solve_lower_triangular(&y).expect("non-singular factor")
}

/// Laplace fit of the latent utility to `duels`.
pub fn fit_preference_model(
    duels: &[DuelRecord],
    kernel: KernelSpec,
    sigma_p: f64,
    bounds: Option<&Bounds>,
) -> Result<PreferenceModel> {
    if duels.is_empty() {
        return Err(Error::InsufficientData { needed: 1, found: 0 });
    }
    if !(sigma_p > 0.0 && sigma_p.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!("sigma_p must be positive, got {sigma_p}")));
    }
    let dim = duels[0].left.len();
    if kernel.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: kernel.dim(),
            found: dim,
        });
    }
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut index_of = |p: &[f64]| -> usize {
        match points.iter().position(|q| q == p) {
            Some(i) => i,
            None => {
                points.push(p.to_vec());
                points.len() - 1
            }
        }
    };
    let mut pairs = Vec::with_capacity(duels.len());
    for d in duels {
        if d.left.len() != dim || d.right.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: d.left.len().max(d.right.len()),
            });
        }
        let (w, l) = d.winner_loser();
        pairs.push((index_of(w), index_of(l)));
    }
    let unit: Vec<Vec<f64>> = match bounds {
        Some(b) => points.iter().map(|p| b.to_unit(p)).collect(),
        None => points.clone(),
    };
    let (chol, _) = cholesky_with_jitter(&kernel.gram(&unit))?;
    let m = points.len();
    let scale = std::f64::consts::SQRT_2 * sigma_p;
    let objective = |v: &DVector<f64>| log_likelihood(&(&chol * v), &pairs, scale) - 0.5 * v.dot(v);

    let mut v = DVector::zeros(m);
    let mut psi = objective(&v);
    let mut iterations = 0;
    loop {
        let f = &chol * &v;
        let (grad_f, w) = likelihood_derivatives(&f, &pairs, scale);
        let grad = chol.transpose() * grad_f - &v;
        let gnorm = grad.norm();
        if gnorm < GRADIENT_TOL {
            break;
        }
        if iterations == MAX_NEWTON_ITERS {
            if gnorm < STALL_TOL {
                break;
            }
            return Err(Error::Divergence(format!(
                "Newton did not converge in {MAX_NEWTON_ITERS} iterations (gradient norm {gnorm:.3e})"
            )));
        }
        iterations += 1;
        let mm = DMatrix::identity(m, m) + chol.transpose() * &w * &chol;
        let step = chol_solve(&chol_spd(&mm)?, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &v + &step * t;
            let c = objective(&cand);
            if c >= psi {
                let stalled = c - psi <= 1e-15 * psi.abs().max(1.0);
                v = cand;
                psi = c;
                accepted = !stalled;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if gnorm < STALL_TOL {
                break;
            }
            return Err(Error::Divergence(format!(
                "line search failed to improve (gradient norm {gnorm:.3e})"
            )));
        }
    }
    let mode = &chol * &v;
    let (_, w) = likelihood_derivatives(&mode, &pairs, scale);
    let m_chol = chol_spd(&(DMatrix::identity(m, m) + chol.transpose() * &w * &chol))?;
    let log_evidence = psi - m_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(PreferenceModel {
        log_evidence,
        duels: duels.to_vec(),
        kernel,
        bounds: bounds.cloned(),
        sigma_p,
        points,
        pairs,
        chol,
        m_chol,
        mode,
        iterations,
    })
}

impl PreferenceModel {
    pub fn duels(&self) -> &[DuelRecord] {
        &self.duels
    }

    /// Distinct duel endpoints, in order of first appearance.
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn sigma_p(&self) -> f64 {
        self.sigma_p
    }

    /// Laplace approximation of the log marginal likelihood of the duels.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    pub fn newton_iterations(&self) -> usize {
        self.iterations
    }

    /// Latent mode at [`Self::points`], as fitted.
    pub fn mode(&self) -> &DVector<f64> {
        &self.mode
    }

    /// Mode with its mean subtracted; utilities are identified only up to shift.
    pub fn anchored_mode(&self) -> DVector<f64> {
        let mean = self.mode.mean();
        self.mode.map(|x| x - mean)
    }

    /// Laplace covariance `(K⁻¹ + W)⁻¹ = L M⁻¹ Lᵀ` at the endpoints.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.points.len();
        let mut minv = DMatrix::identity(m, m);
        self.m_chol.solve_lower_triangular_mut(&mut minv);
        self.m_chol.tr_solve_lower_triangular_mut(&mut minv);
        let c = &self.chol * minv * self.chol.transpose();
        (&c + c.transpose()) * 0.5
    }

    /// Log-likelihood of the duels at latent values `f` (one per endpoint).
    pub fn duel_log_likelihood(&self, f: &DVector<f64>) -> f64 {
        log_likelihood(f, &self.pairs, std::f64::consts::SQRT_2 * self.sigma_p)
    }

    /// Index of the endpoint with the highest mode; lowest index on ties.
    pub fn best_index(&self) -> usize {
        (0..self.points.len()).fold(0, |b, i| if self.mode[i] > self.mode[b] { i } else { b })
    }

    pub fn recommendation(&self) -> &[f64] {
        &self.points[self.best_index()]
    }

    fn unit(&self, q: &[f64]) -> Vec<f64> {
        match &self.bounds {
            Some(b) => b.to_unit(q),
            None => q.to_vec(),
        }
    }

    fn whitened_cross(&self, q: &[f64]) -> DVector<f64> {
        let uq = self.unit(q);
        let k = DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| self.kernel.covariance(&self.unit(p), &uq)),
        );
        self.chol.solve_lower_triangular(&k).expect("non-singular factor")
    }
}

impl Surrogate for PreferenceModel {
    fn dim(&self) -> usize {
        self.kernel.dim()
    }

    fn posterior(&self, q: &[f64]) -> Result<PosteriorMoment> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: q.len(),
            });
        }
        let v = self.whitened_cross(q);
        let a = self.chol.solve_lower_triangular(&self.mode).expect("non-singular factor");
        let mean = v.dot(&a);
        let u = self.m_chol.solve_lower_triangular(&v).expect("non-singular factor");
        let uq = self.unit(q);
        let var = self.kernel.covariance(&uq, &uq) - v.dot(&v) + u.dot(&u);
        Ok(PosteriorMoment { mean, var: var.max(0.0) })
    }

    fn joint_posterior(&self, qs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = qs.len();
        let a = self.chol.solve_lower_triangular(&self.mode).expect("non-singular factor");
        let mut vs = DMatrix::zeros(self.points.len(), n);
        for (j, q) in qs.iter().enumerate() {
            if q.len() != self.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.dim(),
                    found: q.len(),
                });
            }
            vs.set_column(j, &self.whitened_cross(q));
        }
        let us = self.m_chol.solve_lower_triangular(&vs).expect("non-singular factor");
        let units: Vec<Vec<f64>> = qs.iter().map(|q| self.unit(q)).collect();
        let mean = vs.transpose() * a;
        let mut cov = self.kernel.gram(&units) - vs.transpose() * &vs + us.transpose() * &us;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok((mean, cov))
    }
}

/// Posterior of `u(θ) − u(anchor)`. Duels only identify differences, so the
/// variance of `u(θ)` alone stays near the prior; the difference variance
/// shrinks where comparisons were made.
#[derive(Debug, Clone)]
pub struct AnchoredUtility<'a> {
    model: &'a PreferenceModel,
    anchor: Vec<f64>,
}

impl PreferenceModel {
    pub fn relative_to(&self, anchor: &[f64]) -> AnchoredUtility<'_> {
        AnchoredUtility {
            model: self,
            anchor: anchor.to_vec(),
        }
    }
}

impl Surrogate for AnchoredUtility<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn posterior(&self, q: &[f64]) -> Result<PosteriorMoment> {
        let (m, c) = self.model.joint_posterior(&[q.to_vec(), self.anchor.clone()])?;
        Ok(PosteriorMoment {
            mean: m[0] - m[1],
            var: (c[(0, 0)] + c[(1, 1)] - 2.0 * c[(0, 1)]).max(0.0),
        })
    }

    fn joint_posterior(&self, qs: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut all = qs.to_vec();
        all.push(self.anchor.clone());
        let (m, c) = self.model.joint_posterior(&all)?;
        let n = qs.len();
        let mean = DVector::from_iterator(n, (0..n).map(|i| m[i] - m[n]));
        let cov = DMatrix::from_fn(n, n, |i, j| c[(i, j)] - c[(i, n)] - c[(n, j)] + c[(n, n)]);
        Ok((mean, cov))
    }
}

/// Duel selection. Even duels pit the incumbent against the UCB maximizer of
/// the utility relative to the incumbent. Odd duels, once a model exists,
/// bracket the incumbent: `inc ± bracket·width` along one axis, cycling
/// through the axes. Set `bracket` to 0 to always use the UCB duel.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelPolicy {
    pub beta: f64,
    /// Half-width of the bracketing duel as a fraction of the box width.
    pub bracket: f64,
    pub search: CandidateSearch,
}

impl Default for DuelPolicy {
    fn default() -> Self {
        Self {
            beta: 1.0,
            bracket: 0.25,
            search: CandidateSearch::default(),
        }
    }
}

/// The pair for duel number `duel_index`. Without a model, two distinct
/// quasi-random points. The pair is always distinct and inside `bounds`.
pub fn select_duel(
    model: Option<&PreferenceModel>,
    bounds: &Bounds,
    policy: &DuelPolicy,
    duel_index: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if (0..bounds.dim()).all(|i| bounds.width(i) == 0.0) {
        return Err(Error::InvalidBounds("a degenerate box admits no distinct pair".into()));
    }
    if !(policy.beta > 0.0) || !(0.0..=1.0).contains(&policy.bracket) {
        return Err(Error::InvalidArgument(format!(
            "duel policy needs beta > 0 and bracket in [0, 1], got {} and {}",
            policy.beta, policy.bracket
        )));
    }
    let Some(model) = model else {
        let mut pts = quasi_random_design(bounds, 2, seed);
        let right = pts.pop().expect("two points");
        let left = pts.pop().expect("two points");
        if left == right {
            let right = perturb(&left, bounds);
            return Ok((left, right));
        }
        return Ok((left, right));
    };
    let incumbent = model.recommendation().to_vec();
    if policy.bracket > 0.0 && duel_index % 2 == 1 {
        if let Some(pair) = bracket_pair(&incumbent, bounds, policy.bracket, duel_index / 2) {
            return Ok(pair);
        }
    }
    let spec = AcquisitionSpec::ucb(policy.beta).with_search(policy.search.clone());
    let mut challenger = maximize_acquisition(&spec, &model.relative_to(&incumbent), bounds, seed)?;
    if challenger == incumbent {
        challenger = perturb(&incumbent, bounds);
    }
    Ok((incumbent, challenger))
}

/// `inc ∓ h·width` along the `round`-th non-degenerate axis (cyclic), clamped.
fn bracket_pair(inc: &[f64], bounds: &Bounds, h: f64, round: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let axes: Vec<usize> = (0..bounds.dim()).filter(|&i| bounds.width(i) > 0.0).collect();
    let axis = axes[round % axes.len()];
    let step = h * bounds.width(axis);
    let mut left = inc.to_vec();
    let mut right = inc.to_vec();
    left[axis] -= step;
    right[axis] += step;
    bounds.clamp(&mut left);
    bounds.clamp(&mut right);
    (left != right).then_some((left, right))
}

/// Shift by 1% of the box width along every non-degenerate axis, stepping
/// inward at the upper bound.
fn perturb(x: &[f64], bounds: &Bounds) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let step = 0.01 * bounds.width(i);
            if v + step <= bounds.upper()[i] {
                v + step
            } else {
                v - step
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Simulated,
    Interactive,
}

/// Judges duels. Interactive oracles may block until a judgment arrives.
pub trait PreferenceOracle {
    fn judge(&mut self, left: &[f64], right: &[f64], duel_index: usize) -> Result<Winner>;

    fn kind(&self) -> OracleKind;
}

impl<O: PreferenceOracle + ?Sized> PreferenceOracle for &mut O {
    fn judge(&mut self, left: &[f64], right: &[f64], duel_index: usize) -> Result<Winner> {
        (**self).judge(left, right, duel_index)
    }

    fn kind(&self) -> OracleKind {
        (**self).kind()
    }
}

/// `left` wins iff `u(left) − u(right) + ε > 0` with `ε ~ N(0, 2σ²)`, so
/// `P(left wins) = Φ(Δu / (√2·σ))`. Noise is seeded per duel index.
pub struct SimulatedOracle<U> {
    pub utility: U,
    pub sigma_noise: f64,
    pub seed: u64,
}

impl<U: Fn(&[f64]) -> f64> PreferenceOracle for SimulatedOracle<U> {
    fn judge(&mut self, left: &[f64], right: &[f64], duel_index: usize) -> Result<Winner> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_EVAL, duel_index as u64));
        let z: f64 = StandardNormal.sample(&mut rng);
        let eps = std::f64::consts::SQRT_2 * self.sigma_noise * z;
        let h = (self.utility)(left) - (self.utility)(right);
        Ok(if h + eps > 0.0 { Winner::Left } else { Winner::Right })
    }

    fn kind(&self) -> OracleKind {
        OracleKind::Simulated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferentialConfig {
    pub duel_budget: usize,
    pub bounds: Bounds,
    pub seed: u64,
    pub kernel_family: KernelFamily,
    /// Lengthscale on the unit cube.
    pub lengthscale: f64,
    pub signal_var: f64,
    pub sigma_p: f64,
    pub policy: DuelPolicy,
    pub record_timing: bool,
}

impl PreferentialConfig {
    pub fn new(bounds: Bounds, duel_budget: usize, seed: u64) -> Self {
        Self {
            duel_budget,
            bounds,
            seed,
            kernel_family: KernelFamily::SquaredExponential,
            lengthscale: 0.5,
            signal_var: 1.0,
            sigma_p: 0.2,
            policy: DuelPolicy::default(),
            record_timing: false,
        }
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::isotropic(self.kernel_family, self.bounds.dim(), self.lengthscale, self.signal_var)
    }

    pub fn fit(&self, duels: &[DuelRecord]) -> Result<PreferenceModel> {
        fit_preference_model(duels, self.kernel()?, self.sigma_p, Some(&self.bounds))
    }

    pub fn snapshot(&self) -> serde_json::Value {
        json!({
            "mode": "preferential",
            "duel_budget": self.duel_budget,
            "bounds": self.bounds.intervals(),
            "kernel": self.kernel_family,
            "lengthscale": self.lengthscale,
            "signal_var": self.signal_var,
            "sigma_p": self.sigma_p,
            "beta": self.policy.beta,
            "bracket": self.policy.bracket,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PreferentialOutcome {
    pub recommendation: Vec<f64>,
    pub trace: RunTrace,
    pub model: PreferenceModel,
}

/// Select, judge, refit, `duel_budget` times. Each trace step carries the duel;
/// `point` is the recommendation after the duel and `value`/`incumbent` its
/// anchored posterior mode.
pub fn preferential_run(
    oracle: &mut dyn PreferenceOracle,
    config: &PreferentialConfig,
) -> std::result::Result<PreferentialOutcome, RunError> {
    preferential_run_observed(oracle, config, &mut |_| {})
}

pub fn preferential_run_observed(
    oracle: &mut dyn PreferenceOracle,
    config: &PreferentialConfig,
    observer: &mut dyn FnMut(&TraceStep),
) -> std::result::Result<PreferentialOutcome, RunError> {
    let mut trace = RunTrace::new(config.seed, config.snapshot());
    if config.duel_budget == 0 {
        return Err(RunError::new(Error::InvalidArgument("duel budget must be at least 1".into()), trace));
    }
    if let Err(e) = config.kernel() {
        return Err(RunError::new(e, trace));
    }
    let clock = StepClock::new(config.record_timing);
    let mut duels: Vec<DuelRecord> = Vec::with_capacity(config.duel_budget);
    let mut model: Option<PreferenceModel> = None;
    for iter in 0..config.duel_budget {
        let seed = if model.is_none() {
            derive_seed(config.seed, STREAM_INIT, 0)
        } else {
            derive_seed(config.seed, STREAM_AF, iter as u64)
        };
        let step = select_duel(model.as_ref(), &config.bounds, &config.policy, iter, seed).and_then(|(left, right)| {
            let winner = oracle.judge(&left, &right, iter)?;
            let duel = DuelRecord::new(left, right, winner)?;
            duels.push(duel.clone());
            let fitted = config.fit(&duels)?;
            Ok((duel, fitted))
        });
        let (duel, fitted) = match step {
            Ok(v) => v,
            Err(e) => return Err(RunError::new(e, trace)),
        };
        let anchored = fitted.anchored_mode();
        let best = fitted.best_index();
        let step = TraceStep {
            iter,
            point: fitted.points()[best].clone(),
            value: anchored[best],
            incumbent: anchored[best],
            af: Some(crate::acquisition::AcquisitionKind::UpperConfidenceBound),
            elapsed_ms: clock.elapsed_ms(),
            detail: StepDetail::Duel {
                left: duel.left,
                right: duel.right,
                winner: duel.winner,
            },
        };
        observer(&step);
        trace.steps.push(step);
        model = Some(fitted);
    }
    let model = model.expect("at least one duel");
    Ok(PreferentialOutcome {
        recommendation: model.recommendation().to_vec(),
        trace,
        model,
    })
}
