//! Executes a validated [`RunConfig`] against the core engines.

use std::path::Path;
use std::time::Duration;

use serde_json::{json, Value};

use querykernel_core::bo::{bo_run_observed, BoConfig, Objective, RunError};
use querykernel_core::fairness::audit;
use querykernel_core::federated::{federated_bo_run_observed, FederatedConfig};
use querykernel_core::mobo::{mobo_run_observed, MoboConfig, LinearTradeoff, TwoBowls, VectorObjective, WeightBounds};
use querykernel_core::objectives::{Branin, NoisyQuadratic, Sphere1D};
use querykernel_core::preferential::{preferential_run_observed, PreferenceOracle, PreferentialConfig, SimulatedOracle};
use querykernel_core::prompt::{
    instructzero_run_observed, Evaluator, ExemplarSet, InstructZeroConfig, InstructionGenerator, PlantedTask, ValidationSet,
};
use querykernel_core::subspace::{tokenize, SimilarityKind};
use querykernel_core::trace::{RunTrace, TraceStep};
use querykernel_core::Bounds;

use crate::audit::read_audit_csv;
use crate::config::{Example, Mode, ObjectiveConfig, ObjectiveName, OracleChoice, RunConfig, TaskKind};
use crate::remote::{HttpOptions, RemoteEndpoint, RemoteEvaluator, RemoteGenerator};

/// Result of a finished run: the summary document and extra files to write
/// next to it.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: Value,
    pub artifacts: Vec<(String, String)>,
}

/// A failed run. Steps recorded before the failure were already delivered to
/// the observer.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub message: String,
    pub steps: usize,
}

impl From<RunError> for RunFailure {
    fn from(e: RunError) -> Self {
        Self {
            message: e.error.to_string(),
            steps: e.partial.len(),
        }
    }
}

fn setup_failure(message: impl ToString) -> RunFailure {
    RunFailure {
        message: message.to_string(),
        steps: 0,
    }
}

fn scalar_objective(o: &ObjectiveConfig, seed: u64) -> Box<dyn Objective> {
    match o.name {
        ObjectiveName::Branin => {
            let mut b = Branin::default();
            b.noise_std = o.noise_std;
            Box::new(b)
        }
        ObjectiveName::Sphere1d => {
            let mut s = Sphere1D::default();
            s.noise_std = o.noise_std;
            Box::new(s)
        }
        ObjectiveName::NoisyQuadratic => Box::new(NoisyQuadratic::new(o.dim.unwrap_or(1), o.noise_std, seed)),
        ObjectiveName::TwoBowls | ObjectiveName::LinearTradeoff => unreachable!("validated as scalar"),
    }
}

fn vector_objective(o: &ObjectiveConfig) -> Box<dyn VectorObjective> {
    match o.name {
        ObjectiveName::TwoBowls => Box::new(TwoBowls::default()),
        ObjectiveName::LinearTradeoff => Box::new(LinearTradeoff::default()),
        _ => unreachable!("validated as multi-objective"),
    }
}

fn best_of(trace: &RunTrace) -> Value {
    match trace.best_step() {
        Some(s) => json!({"iter": s.iter, "point": s.point, "value": s.value}),
        None => Value::Null,
    }
}

fn pairs(examples: &[Example]) -> Vec<(Vec<String>, Vec<String>)> {
    examples.iter().map(|e| (tokenize(&e.input), tokenize(&e.output))).collect()
}

/// Run `config`. `base` resolves relative paths; `interactive` is required
/// when the preferential oracle is interactive.
pub fn execute(
    config: &RunConfig,
    base: &Path,
    observer: &mut dyn FnMut(&TraceStep),
    interactive: Option<&mut dyn PreferenceOracle>,
) -> Result<RunOutput, RunFailure> {
    let seed = config.seed;
    let head = |trace: &RunTrace| json!({"mode": config.mode.name(), "seed": seed, "config": trace.config, "steps": trace.len()});
    match config.mode {
        Mode::Bo => {
            let section = config.bo.as_ref().expect("validated");
            let mut objective = scalar_objective(config.objective.as_ref().expect("validated"), seed);
            let mut cfg = BoConfig::new(objective.dim(), section.budget, seed);
            if let Some(n) = section.init_count {
                cfg.init_count = n;
            }
            cfg.acquisition = section.acquisition;
            cfg.beta = section.beta;
            cfg.kernel_family = section.kernel;
            cfg.noise_var = section.noise_var;
            cfg.record_timing = config.record_timing;
            let trace = bo_run_observed(objective.as_mut(), &cfg, observer)?;
            let mut summary = head(&trace);
            summary["best"] = best_of(&trace);
            Ok(RunOutput {
                summary,
                artifacts: vec![],
            })
        }
        Mode::Mobo => {
            let section = config.mobo.as_ref().expect("validated");
            let mut objective = vector_objective(config.objective.as_ref().expect("validated"));
            let mut cfg = MoboConfig::new(section.budget, seed);
            cfg.init_count = section.init_count;
            cfg.kernel_family = section.kernel;
            cfg.weight_bounds = section.weight_bounds.clone().map(WeightBounds);
            cfg.noise_var = section.noise_var;
            cfg.record_timing = config.record_timing;
            let out = mobo_run_observed(objective.as_mut(), &cfg, observer)?;
            let mut summary = head(&out.trace);
            summary["pareto_front"] = out
                .archive
                .entries()
                .iter()
                .map(|e| json!({"iter": e.iter, "point": e.point, "objectives": e.objectives}))
                .collect();
            Ok(RunOutput {
                summary,
                artifacts: vec![("pareto.csv".into(), out.archive.to_csv())],
            })
        }
        Mode::Preferential => {
            let p = config.preferential.as_ref().expect("validated");
            let bounds = Bounds::new(&p.bounds).map_err(setup_failure)?;
            let mut cfg = PreferentialConfig::new(bounds, p.duel_budget, seed);
            if let Some(v) = p.sigma_p {
                cfg.sigma_p = v;
            }
            if let Some(v) = p.lengthscale {
                cfg.lengthscale = v;
            }
            if let Some(v) = p.beta {
                cfg.policy.beta = v;
            }
            if let Some(v) = p.bracket {
                cfg.policy.bracket = v;
            }
            cfg.record_timing = config.record_timing;
            let out = match (p.oracle, interactive) {
                (OracleChoice::Simulated, _) => {
                    let optimum = p.optimum.clone().expect("validated");
                    let mut oracle = SimulatedOracle {
                        utility: move |x: &[f64]| -x.iter().zip(&optimum).map(|(a, c)| (a - c).powi(2)).sum::<f64>(),
                        sigma_noise: p.sigma_noise,
                        seed,
                    };
                    preferential_run_observed(&mut oracle, &cfg, observer)?
                }
                (OracleChoice::Interactive, Some(oracle)) => preferential_run_observed(oracle, &cfg, observer)?,
                (OracleChoice::Interactive, None) => {
                    return Err(setup_failure("interactive oracle requested without a running service"))
                }
            };
            let mut summary = head(&out.trace);
            summary["oracle"] = json!(p.oracle);
            summary["recommendation"] = json!(out.recommendation);
            Ok(RunOutput {
                summary,
                artifacts: vec![],
            })
        }
        Mode::Federated => {
            let f = config.federated.as_ref().expect("validated");
            let mut objective = scalar_objective(config.objective.as_ref().expect("validated"), seed);
            let mut cfg = FederatedConfig::new(f.agents, f.rounds, f.per_round_evals, f.threshold, seed);
            if let Some(v) = f.features {
                cfg.features = v;
            }
            if let Some(v) = f.lengthscale {
                cfg.lengthscale = v;
            }
            if let Some(v) = f.noise_var {
                cfg.noise_var = v;
            }
            if let Some(v) = f.prior_precision {
                cfg.prior_precision = v;
            }
            if let Some(v) = f.candidates {
                cfg.candidates = v;
            }
            cfg.record_timing = config.record_timing;
            let out = federated_bo_run_observed(objective.as_mut(), &cfg, observer)?;
            let mut summary = head(&out.trace);
            summary["best"] = json!({"point": out.best_point, "value": out.best_value});
            summary["messages"] = json!({
                "uploads": out.log.uploads().count(),
                "downloads": out.log.downloads().count(),
                "uploads_after_round0": out.log.uploads_after_round0(),
                "total_bytes": out.log.total_bytes(),
            });
            Ok(RunOutput {
                summary,
                artifacts: vec![("messages.csv".into(), out.log.to_csv())],
            })
        }
        Mode::Instructzero => {
            let z = config.instructzero.as_ref().expect("validated");
            let mut cfg = InstructZeroConfig::new(z.d, z.d_prime, z.budget, seed);
            cfg.init_count = z.init_count;
            if let Some(v) = z.projection {
                cfg.projection = v;
            }
            if let Some(v) = &z.lengthscales {
                cfg.lengthscales = v.clone();
            }
            if let Some(v) = z.residual_weight {
                cfg.residual_weight = v;
            }
            if let Some(v) = z.noise_repeats {
                cfg.noise_repeats = v;
            }
            cfg.record_timing = config.record_timing;
            let (mut generator, mut evaluator, val, exemplars, planted): (
                Box<dyn InstructionGenerator>,
                Box<dyn Evaluator>,
                ValidationSet,
                ExemplarSet,
                Option<String>,
            ) = match z.task {
                TaskKind::Planted => {
                    let task = PlantedTask::new(&cfg).map_err(setup_failure)?;
                    (
                        Box::new(task.generator),
                        Box::new(task.evaluator),
                        task.validation,
                        task.exemplars,
                        Some(task.oracle_instruction.join(" ")),
                    )
                }
                TaskKind::Remote => {
                    let r = z.remote.as_ref().expect("validated");
                    let options = HttpOptions {
                        timeout: Duration::from_secs_f64(r.timeout_s),
                        retries: r.retries,
                        min_interval: r.rate_limit.map(|per_s| Duration::from_secs_f64(1.0 / per_s)),
                        ..HttpOptions::default()
                    };
                    let generator = RemoteEndpoint::from_env(&r.generator_url, options.clone()).map_err(setup_failure)?;
                    let evaluator = RemoteEndpoint::from_env(&r.evaluator_url, options).map_err(setup_failure)?;
                    let kind = z.similarity.unwrap_or(SimilarityKind::TokenF1);
                    let val = ValidationSet::new(pairs(z.validation.as_deref().unwrap_or_default()), kind)
                        .map_err(setup_failure)?;
                    let exemplars =
                        ExemplarSet::new(pairs(z.exemplars.as_deref().unwrap_or_default())).map_err(setup_failure)?;
                    (Box::new(RemoteGenerator(generator)), Box::new(RemoteEvaluator(evaluator)), val, exemplars, None)
                }
            };
            let out = instructzero_run_observed(generator.as_mut(), evaluator.as_mut(), &val, &exemplars, &cfg, observer)?;
            let mut summary = head(&out.trace);
            summary["task"] = json!(z.task);
            summary["best"] = json!({
                "instruction": out.best_instruction.join(" "),
                "score": out.best_score,
                "soft_prompt": out.best_soft_prompt,
            });
            summary["evaluator_calls"] = json!(out.evaluator_calls);
            summary["noise_var"] = json!(out.noise_var);
            if let Some(p) = planted {
                summary["planted_instruction"] = json!(p);
            }
            Ok(RunOutput {
                summary,
                artifacts: vec![],
            })
        }
        Mode::Audit => {
            let a = config.audit.as_ref().expect("validated");
            let path = if a.csv.is_absolute() { a.csv.clone() } else { base.join(&a.csv) };
            let table = read_audit_csv(&path).map_err(setup_failure)?;
            let report = audit(&table).map_err(setup_failure)?;
            Ok(RunOutput {
                summary: json!({"mode": "audit", "rows": table.len(), "report": report}),
                artifacts: vec![],
            })
        }
    }
}
