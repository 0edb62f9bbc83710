//! The sequential Bayesian-optimization loop: fit the surrogate, maximize the
//! acquisition function, query the objective, repeat.

use std::time::Instant;

use serde_json::json;

use crate::acquisition::{maximize_acquisition, ucb_beta_schedule, AcquisitionKind, AcquisitionSpec, CandidateSearch};
use crate::error::{Error, Result};
use crate::gp::EvaluationSet;
use crate::kernel::{default_grid, KernelFamily, KernelSpec};
use crate::space::{derive_seed, quasi_random_design, uniform_design, Bounds};
use crate::surrogate::{fit_scaled, select_and_fit};
use crate::trace::{RunTrace, StepDetail, TraceStep};

/// Hyperparameters are re-selected every iteration up to this many observations,
/// then every [`REFIT_EVERY`] observations.
pub const REFIT_ALWAYS_UNTIL: usize = 50;
pub const REFIT_EVERY: usize = 5;

// seed streams
pub(crate) const STREAM_INIT: u64 = 10;
pub(crate) const STREAM_AF: u64 = 11;
pub(crate) const STREAM_EVAL: u64 = 12;

/// A black-box objective to be maximized over a box.
pub trait Objective {
    fn bounds(&self) -> &Bounds;

    /// Evaluate at `point`; `seed` drives any observation noise.
    fn evaluate(&mut self, point: &[f64], seed: u64) -> Result<f64>;

    fn descriptor(&self) -> String;

    fn dim(&self) -> usize {
        self.bounds().dim()
    }
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{error} (after {} recorded steps)", partial.len())]
pub struct RunError {
    pub error: Error,
    pub partial: RunTrace,
}

impl RunError {
    pub fn new(error: Error, partial: RunTrace) -> Self {
        Self { error, partial }
    }
}

/// Default size of the initial design: `max(4, 2d)`.
pub fn default_init_count(dim: usize) -> usize {
    (2 * dim).max(4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoConfig {
    pub init_count: usize,
    /// Acquisition-driven evaluations after the initial design.
    pub budget: usize,
    pub acquisition: AcquisitionKind,
    /// Fixed UCB β; `None` uses [`ucb_beta_schedule`].
    pub beta: Option<f64>,
    pub kernel_family: KernelFamily,
    pub seed: u64,
    /// Observation-noise variance assumed by the surrogate.
    pub noise_var: f64,
    pub search: CandidateSearch,
    pub record_timing: bool,
}

impl BoConfig {
    pub fn new(dim: usize, budget: usize, seed: u64) -> Self {
        Self {
            init_count: default_init_count(dim),
            budget,
            acquisition: AcquisitionKind::ExpectedImprovement,
            beta: None,
            kernel_family: KernelFamily::Matern52,
            seed,
            noise_var: 0.0,
            search: CandidateSearch::default(),
            record_timing: false,
        }
    }

    fn snapshot(&self, descriptor: &str) -> serde_json::Value {
        json!({
            "mode": "bo",
            "objective": descriptor,
            "init_count": self.init_count,
            "budget": self.budget,
            "acquisition": self.acquisition,
            "beta": self.beta,
            "kernel": self.kernel_family,
            "noise_var": self.noise_var,
        })
    }
}

pub(crate) struct StepClock {
    start: Instant,
    enabled: bool,
}

impl StepClock {
    pub(crate) fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    pub(crate) fn elapsed_ms(&self) -> u64 {
        if self.enabled {
            self.start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

/// Run BO and return the full trace.
pub fn bo_run(objective: &mut dyn Objective, config: &BoConfig) -> std::result::Result<RunTrace, RunError> {
    bo_run_observed(objective, config, &mut |_| {})
}

/// As [`bo_run`], calling `observer` after every evaluation.
pub fn bo_run_observed(
    objective: &mut dyn Objective,
    config: &BoConfig,
    observer: &mut dyn FnMut(&TraceStep),
) -> std::result::Result<RunTrace, RunError> {
    let bounds = objective.bounds().clone();
    let mut trace = RunTrace::new(config.seed, config.snapshot(&objective.descriptor()));
    if config.init_count == 0 && config.budget == 0 {
        return Err(RunError::new(
            Error::InvalidArgument("init_count and budget are both zero".into()),
            trace,
        ));
    }
    if config.init_count == 0 {
        return Err(RunError::new(
            Error::InvalidArgument("init_count must be at least 1".into()),
            trace,
        ));
    }
    let mut data = match EvaluationSet::new(config.noise_var) {
        Ok(d) => d,
        Err(e) => return Err(RunError::new(e, trace)),
    };
    let clock = StepClock::new(config.record_timing);
    let mut incumbent = f64::NEG_INFINITY;
    let grid = default_grid(config.kernel_family, bounds.dim());
    let mut kernel: Option<KernelSpec> = None;

    let init = quasi_random_design(&bounds, config.init_count, derive_seed(config.seed, STREAM_INIT, 0));
    let total = config.init_count + config.budget;
    for iter in 0..total {
        let (point, af) = if iter < init.len() {
            (init[iter].clone(), None)
        } else {
            let chosen = propose(config, &bounds, &data, &grid, &mut kernel, &incumbent, iter);
            match chosen {
                Ok(p) => (p, Some(config.acquisition)),
                Err(e) => return Err(RunError::new(e, trace)),
            }
        };
        let value = match objective.evaluate(&point, derive_seed(config.seed, STREAM_EVAL, iter as u64)) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => return Err(RunError::new(Error::Objective(format!("non-finite value {v}")), trace)),
            Err(e) => return Err(RunError::new(e, trace)),
        };
        if let Err(e) = data.push(point.clone(), value) {
            return Err(RunError::new(e, trace));
        }
        incumbent = incumbent.max(value);
        let step = TraceStep {
            iter,
            point,
            value,
            incumbent,
            af,
            elapsed_ms: clock.elapsed_ms(),
            detail: StepDetail::Plain {},
        };
        observer(&step);
        trace.steps.push(step);
    }
    Ok(trace)
}

fn propose(
    config: &BoConfig,
    bounds: &Bounds,
    data: &EvaluationSet,
    grid: &[KernelSpec],
    kernel: &mut Option<KernelSpec>,
    incumbent: &f64,
    iter: usize,
) -> Result<Vec<f64>> {
    let n = data.len();
    let reselect = kernel.is_none() || n <= REFIT_ALWAYS_UNTIL || n.is_multiple_of(REFIT_EVERY);
    let model = if reselect && n >= 2 {
        let (m, spec) = select_and_fit(data, bounds, grid)?;
        *kernel = Some(spec);
        m
    } else {
        let spec = kernel.clone().unwrap_or_else(|| {
            KernelSpec::isotropic(config.kernel_family, bounds.dim(), 0.2, 1.0).expect("valid default")
        });
        fit_scaled(data, Some(bounds), spec)?
    };
    let spec = AcquisitionSpec {
        kind: config.acquisition,
        beta: config.beta.unwrap_or_else(|| ucb_beta_schedule(n)),
        incumbent: *incumbent,
        search: config.search.clone(),
    };
    maximize_acquisition(&spec, &model, bounds, derive_seed(config.seed, STREAM_AF, iter as u64))
}

/// Uniform random search with `total` evaluations, recorded as a trace.
pub fn random_search(objective: &mut dyn Objective, total: usize, seed: u64) -> std::result::Result<RunTrace, RunError> {
    let bounds = objective.bounds().clone();
    let mut trace = RunTrace::new(
        seed,
        json!({"mode": "random_search", "objective": objective.descriptor(), "budget": total}),
    );
    let mut incumbent = f64::NEG_INFINITY;
    for (iter, point) in uniform_design(&bounds, total, derive_seed(seed, STREAM_INIT, 1)).into_iter().enumerate() {
        let value = objective
            .evaluate(&point, derive_seed(seed, STREAM_EVAL, iter as u64))
            .map_err(|e| RunError::new(e, trace.clone()))?;
        incumbent = incumbent.max(value);
        trace.steps.push(TraceStep {
            iter,
            point,
            value,
            incumbent,
            af: None,
            elapsed_ms: 0,
            detail: StepDetail::Plain {},
        });
    }
    Ok(trace)
}
