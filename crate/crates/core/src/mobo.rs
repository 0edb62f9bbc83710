//! Multi-objective BO by random scalarization, with a Pareto archive.
//!
//! All objectives are maximized. A point `a` dominates `b` iff `a ≥ b`
//! componentwise and `a ≠ b`; exact duplicates never dominate each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde_json::json;

use crate::acquisition::{maximize_acquisition, AcquisitionKind, AcquisitionSpec, CandidateSearch};
use crate::bo::{default_init_count, RunError, StepClock, STREAM_AF, STREAM_EVAL, STREAM_INIT};
use crate::error::{Error, Result};
use crate::gp::EvaluationSet;
use crate::kernel::{default_grid, KernelFamily};
use crate::space::{derive_seed, quasi_random_design, Bounds};
use crate::surrogate::select_and_fit;
use crate::trace::{RunTrace, StepDetail, TraceStep};

const STREAM_WEIGHTS: u64 = 13;
const MAX_WEIGHT_TRIES: usize = 100_000;

/// A vector-valued black box with `B ≥ 2` objectives, all maximized.
pub trait VectorObjective {
    fn bounds(&self) -> &Bounds;

    fn num_objectives(&self) -> usize;

    fn evaluate(&mut self, point: &[f64], seed: u64) -> Result<Vec<f64>>;

    fn descriptor(&self) -> String;

    fn dim(&self) -> usize {
        self.bounds().dim()
    }
}

/// `z̄ = Σ_b w_b z_b`.
pub fn scalarize(z: &[f64], w: &[f64]) -> Result<f64> {
    if z.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: z.len(),
        });
    }
    Ok(z.iter().zip(w).map(|(a, b)| a * b).sum())
}

/// Per-objective `[lo, hi]` limits on scalarization weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightBounds(pub Vec<(f64, f64)>);

impl WeightBounds {
    pub fn validate(&self, b: usize) -> Result<()> {
        if self.0.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                found: self.0.len(),
            });
        }
        let (mut lo_sum, mut hi_sum) = (0.0, 0.0);
        for &(lo, hi) in &self.0 {
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return Err(Error::InvalidArgument(format!("weight bound [{lo}, {hi}] outside 0 ≤ lo ≤ hi ≤ 1")));
            }
            lo_sum += lo;
            hi_sum += hi;
        }
        if lo_sum > 1.0 || hi_sum < 1.0 {
            return Err(Error::InvalidArgument("weight bounds exclude the simplex".into()));
        }
        Ok(())
    }

    fn admits(&self, w: &[f64]) -> bool {
        w.iter().zip(&self.0).all(|(x, &(lo, hi))| (lo..=hi).contains(x))
    }
}

fn simplex_draw(rng: &mut ChaCha8Rng, b: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..b).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Uniform draw on the probability simplex from normalized exponentials.
pub fn sample_weights(b: usize, seed: u64) -> Result<Vec<f64>> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 objectives, got {b}")));
    }
    Ok(simplex_draw(&mut ChaCha8Rng::seed_from_u64(seed), b))
}

/// Simplex-uniform draw conditioned on `bounds`, by rejection.
pub fn sample_weights_bounded(b: usize, bounds: &WeightBounds, seed: u64) -> Result<Vec<f64>> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 objectives, got {b}")));
    }
    bounds.validate(b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_WEIGHT_TRIES {
        let w = simplex_draw(&mut rng, b);
        if bounds.admits(&w) {
            return Ok(w);
        }
    }
    Err(Error::InvalidArgument("weight bounds admit too small a region of the simplex".into()))
}

pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a != b
}

/// Indices of the non-dominated points, ascending.
///
/// Points are visited in lexicographically decreasing order; a point can only be
/// dominated by one visited earlier, and if it is dominated at all then some
/// already accepted point dominates it.
pub fn pareto_front(points: &[Vec<f64>]) -> Result<Vec<usize>> {
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    let b = first.len();
    for p in points {
        if p.len() != b {
            return Err(Error::DimensionMismatch { expected: b, found: p.len() });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("objective values must be finite".into()));
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[j]
            .iter()
            .zip(&points[i])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&k| dominates(&points[k], &points[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    Ok(front)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ArchiveEntry {
    pub point: Vec<f64>,
    pub objectives: Vec<f64>,
    pub iter: usize,
}

/// Mutually non-dominated `(θ, r(θ))` pairs seen so far.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct ParetoArchive {
    entries: Vec<ArchiveEntry>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert unless dominated; evicts entries the new one dominates. Returns
    /// whether the entry was kept.
    pub fn insert(&mut self, point: Vec<f64>, objectives: Vec<f64>, iter: usize) -> bool {
        if self.entries.iter().any(|e| dominates(&e.objectives, &objectives)) {
            return false;
        }
        self.entries.retain(|e| !dominates(&objectives, &e.objectives));
        self.entries.push(ArchiveEntry { point, objectives, iter });
        true
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn objective_vectors(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.objectives.clone()).collect()
    }

    /// One row per entry: `theta_1..theta_d,r_1..r_B`.
    pub fn to_csv(&self) -> String {
        let Some(first) = self.entries.first() else {
            return String::new();
        };
        let mut header: Vec<String> = (1..=first.point.len()).map(|i| format!("theta_{i}")).collect();
        header.extend((1..=first.objectives.len()).map(|i| format!("r_{i}")));
        let mut out = header.join(",");
        out.push('\n');
        for e in &self.entries {
            let row: Vec<String> = e.point.iter().chain(&e.objectives).map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Area dominated by `points` and bounded below by `reference`, for two objectives.
pub fn hypervolume_2d(points: &[Vec<f64>], reference: [f64; 2]) -> Result<f64> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(points.len());
    for p in points {
        if p.len() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: p.len() });
        }
        if p[0] > reference[0] && p[1] > reference[1] {
            pts.push([p[0], p[1]]);
        }
    }
    pts.sort_by(|a, b| b[0].total_cmp(&a[0]));
    let mut area = 0.0;
    let mut y_top = reference[1];
    for p in pts {
        if p[1] > y_top {
            area += (p[0] - reference[0]) * (p[1] - y_top);
            y_top = p[1];
        }
    }
    Ok(area)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoboConfig {
    /// Total evaluations, initial design included.
    pub budget: usize,
    pub seed: u64,
    /// Defaults to `max(4, 2d)`, capped at `budget`.
    pub init_count: Option<usize>,
    pub kernel_family: KernelFamily,
    pub weight_bounds: Option<WeightBounds>,
    pub noise_var: f64,
    pub search: CandidateSearch,
    pub record_timing: bool,
}

impl MoboConfig {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self {
            budget,
            seed,
            init_count: None,
            kernel_family: KernelFamily::Matern52,
            weight_bounds: None,
            noise_var: 0.0,
            search: CandidateSearch::default(),
            record_timing: false,
        }
    }

    fn snapshot(&self, objective: &dyn VectorObjective) -> serde_json::Value {
        json!({
            "mode": "mobo",
            "objective": objective.descriptor(),
            "budget": self.budget,
            "kernel": self.kernel_family,
            "weight_bounds": self.weight_bounds,
        })
    }

    fn weights(&self, b: usize, iter: usize) -> Result<Vec<f64>> {
        let seed = derive_seed(self.seed, STREAM_WEIGHTS, iter as u64);
        match &self.weight_bounds {
            Some(wb) => sample_weights_bounded(b, wb, seed),
            None => sample_weights(b, seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoboOutcome {
    pub archive: ParetoArchive,
    pub trace: RunTrace,
}

/// Random-scalarization MOBO. Trace `value` is the new point's scalarized value
/// under that iteration's weights and `incumbent` the best scalarized value
/// among all observations under the same weights, so it need not be monotone.
pub fn mobo_run(objective: &mut dyn VectorObjective, config: &MoboConfig) -> std::result::Result<MoboOutcome, RunError> {
    mobo_run_observed(objective, config, &mut |_| {})
}

pub fn mobo_run_observed(
    objective: &mut dyn VectorObjective,
    config: &MoboConfig,
    observer: &mut dyn FnMut(&TraceStep),
) -> std::result::Result<MoboOutcome, RunError> {
    let mut trace = RunTrace::new(config.seed, config.snapshot(objective));
    let b = objective.num_objectives();
    if b < 2 {
        return Err(RunError::new(Error::InvalidArgument(format!("need at least 2 objectives, got {b}")), trace));
    }
    if config.budget == 0 {
        return Err(RunError::new(Error::InvalidArgument("budget must be at least 1".into()), trace));
    }
    let bounds = objective.bounds().clone();
    let grid = default_grid(config.kernel_family, bounds.dim());
    let init_count = config
        .init_count
        .unwrap_or_else(|| default_init_count(bounds.dim()))
        .clamp(1, config.budget);
    let init = quasi_random_design(&bounds, init_count, derive_seed(config.seed, STREAM_INIT, 0));
    let clock = StepClock::new(config.record_timing);
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut observed: Vec<Vec<f64>> = Vec::new();
    let mut archive = ParetoArchive::new();

    for iter in 0..config.budget {
        let weights = match config.weights(b, iter) {
            Ok(w) => w,
            Err(e) => return Err(RunError::new(e, trace)),
        };
        let (point, af) = if iter < init.len() {
            (init[iter].clone(), None)
        } else {
            match propose(config, &bounds, &grid, &points, &observed, &weights, iter) {
                Ok(p) => (p, Some(AcquisitionKind::ExpectedImprovement)),
                Err(e) => return Err(RunError::new(e, trace)),
            }
        };
        let z = match objective.evaluate(&point, derive_seed(config.seed, STREAM_EVAL, iter as u64)) {
            Ok(z) if z.len() != b => {
                return Err(RunError::new(Error::DimensionMismatch { expected: b, found: z.len() }, trace))
            }
            Ok(z) if z.iter().any(|v| !v.is_finite()) => {
                return Err(RunError::new(Error::Objective("non-finite objective value".into()), trace))
            }
            Ok(z) => z,
            Err(e) => return Err(RunError::new(e, trace)),
        };
        let value = scalarize(&z, &weights).expect("lengths checked");
        let incumbent = observed
            .iter()
            .map(|o| scalarize(o, &weights).expect("lengths checked"))
            .fold(value, f64::max);
        archive.insert(point.clone(), z.clone(), iter);
        let step = TraceStep {
            iter,
            point: point.clone(),
            value,
            incumbent,
            af,
            elapsed_ms: clock.elapsed_ms(),
            detail: StepDetail::MultiObjective {
                objectives: z.clone(),
                weights,
            },
        };
        observer(&step);
        trace.steps.push(step);
        points.push(point);
        observed.push(z);
    }
    Ok(MoboOutcome { archive, trace })
}

fn propose(
    config: &MoboConfig,
    bounds: &Bounds,
    grid: &[crate::kernel::KernelSpec],
    points: &[Vec<f64>],
    observed: &[Vec<f64>],
    weights: &[f64],
    iter: usize,
) -> Result<Vec<f64>> {
    let values = observed
        .iter()
        .map(|z| scalarize(z, weights))
        .collect::<Result<Vec<f64>>>()?;
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = EvaluationSet::from_records(points.to_vec(), values, config.noise_var)?;
    let (model, _) = select_and_fit(&data, bounds, grid)?;
    let spec = AcquisitionSpec::expected_improvement(best).with_search(config.search.clone());
    maximize_acquisition(&spec, &model, bounds, derive_seed(config.seed, STREAM_AF, iter as u64))
}

/// `r(θ) = (θ, 1 − θ)` on `[0, 1]`; every point is Pareto-optimal.
#[derive(Debug, Clone)]
pub struct LinearTradeoff {
    bounds: Bounds,
}

impl Default for LinearTradeoff {
    fn default() -> Self {
        Self { bounds: Bounds::unit(1) }
    }
}

impl VectorObjective for LinearTradeoff {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn num_objectives(&self) -> usize {
        2
    }

    fn evaluate(&mut self, point: &[f64], _seed: u64) -> Result<Vec<f64>> {
        self.bounds.check(point)?;
        Ok(vec![point[0], 1.0 - point[0]])
    }

    fn descriptor(&self) -> String {
        "linear_tradeoff".into()
    }
}

/// Two conflicting bowls on `[0, 1]²`: `r = (−‖θ − a‖², −‖θ − b‖²)` with
/// `a = (0.2, 0.2)`, `b = (0.8, 0.8)`; the front is the segment between them.
#[derive(Debug, Clone)]
pub struct TwoBowls {
    bounds: Bounds,
}

impl Default for TwoBowls {
    fn default() -> Self {
        Self { bounds: Bounds::unit(2) }
    }
}

impl VectorObjective for TwoBowls {
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn num_objectives(&self) -> usize {
        2
    }

    fn evaluate(&mut self, point: &[f64], _seed: u64) -> Result<Vec<f64>> {
        self.bounds.check(point)?;
        let d = |c: f64| -point.iter().map(|x| (x - c).powi(2)).sum::<f64>();
        Ok(vec![d(0.2), d(0.8)])
    }

    fn descriptor(&self) -> String {
        "two_bowls".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalarize_examples() {
        assert_eq!(scalarize(&[3.0, 7.0], &[1.0, 0.0]).unwrap(), 3.0);
        assert_eq!(scalarize(&[2.0, 4.0], &[0.5, 0.5]).unwrap(), 3.0);
        assert!(scalarize(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn weights_on_simplex() {
        for seed in 0..200 {
            let w = sample_weights(4, seed).unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(sample_weights(3, 5).unwrap(), sample_weights(3, 5).unwrap());
        assert!(sample_weights(1, 0).is_err());
    }

    #[test]
    fn bounded_weights_respect_limits() {
        let wb = WeightBounds(vec![(0.6, 1.0), (0.0, 0.4)]);
        for seed in 0..50 {
            let w = sample_weights_bounded(2, &wb, seed).unwrap();
            assert!(w[0] >= 0.6 && w[1] <= 0.4);
        }
        assert!(sample_weights_bounded(2, &WeightBounds(vec![(0.7, 1.0), (0.7, 1.0)]), 0).is_err());
    }

    #[test]
    fn front_examples() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 1.0]];
        assert_eq!(pareto_front(&pts).unwrap(), vec![1, 2]);
        assert_eq!(pareto_front(&[vec![1.0, 1.0]]).unwrap(), vec![0]);
        assert_eq!(pareto_front(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(), vec![0, 1]);
        assert!(pareto_front(&[]).unwrap().is_empty());
    }

    #[test]
    fn archive_evicts_dominated() {
        let mut a = ParetoArchive::new();
        assert!(a.insert(vec![0.0], vec![1.0, 1.0], 0));
        assert!(!a.insert(vec![0.1], vec![0.5, 1.0], 1));
        assert!(a.insert(vec![0.2], vec![2.0, 0.0], 2));
        assert!(a.insert(vec![0.3], vec![2.0, 2.0], 3));
        assert_eq!(a.len(), 1);
        assert_eq!(a.entries()[0].iter, 3);
    }

    #[test]
    fn hypervolume_staircase() {
        let pts = vec![vec![1.0, 3.0], vec![2.0, 2.0], vec![3.0, 1.0], vec![1.0, 1.0]];
        // 3·1 + 2·1 + 1·1
        assert_eq!(hypervolume_2d(&pts, [0.0, 0.0]).unwrap(), 6.0);
        assert_eq!(hypervolume_2d(&[], [0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn csv_layout() {
        let mut a = ParetoArchive::new();
        a.insert(vec![0.25], vec![0.25, 0.75], 0);
        assert_eq!(a.to_csv(), "theta_1,r_1,r_2\n0.25,0.25,0.75\n");
    }

    #[test]
    fn single_evaluation() {
        let out = mobo_run(&mut LinearTradeoff::default(), &MoboConfig::new(1, 4)).unwrap();
        assert_eq!(out.archive.len(), 1);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.archive.entries()[0].point, out.trace.steps[0].point);
    }
}
