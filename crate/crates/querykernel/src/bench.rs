//! Named, seeded benchmark studies. Each writes `<name>.json` (the full
//! report) and `<name>.csv` (one row per seed and setting) to the output
//! directory. Thresholds come from the acceptance criteria.

use std::fs;
use std::io;
use std::path::Path;
use std::thread;

use serde::Serialize;
use serde_json::{json, Value};

use querykernel_core::bo::{bo_run, random_search, BoConfig};
use querykernel_core::federated::{FederatedConfig, RandomFeatureMap};
use querykernel_core::mobo::{hypervolume_2d, mobo_run, pareto_front, MoboConfig, TwoBowls, VectorObjective};
use querykernel_core::objectives::{Branin, Sphere1D};
use querykernel_core::space::{derive_seed, uniform_design};
use querykernel_core::{Bounds, Kernel, KernelFamily, KernelSpec};

pub const BENCHMARKS: [&str; 4] = ["bo_vs_random", "rf_approx", "mobo_hypervolume", "federated_tradeoff"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub name: String,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
    /// One row per seed (and setting); the first column is always the seed.
    pub rows: Vec<Vec<Value>>,
    pub aggregate: Value,
    pub thresholds: Value,
    pub pass: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("unknown benchmark {0:?}; known: {known}", known = BENCHMARKS.join(", "))]
    Unknown(String),
    #[error("seed count must be at least 1")]
    NoSeeds,
    #[error("seed {seed}: {message}")]
    Run { seed: u64, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Map `f` over seeds on up to `available_parallelism` threads. Results are
/// stored by seed position, so the output does not depend on scheduling.
fn par_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T, String> + Sync) -> Result<Vec<T>, BenchError> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len()).max(1);
    let mut slots: Vec<Option<Result<T, String>>> = (0..seeds.len()).map(|_| None).collect();
    thread::scope(|s| {
        for (w, chunk) in slots.chunks_mut(seeds.len().div_ceil(workers)).enumerate() {
            let f = &f;
            let base = w * seeds.len().div_ceil(workers);
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(seeds[base + i]));
                }
            });
        }
    });
    slots
        .into_iter()
        .zip(seeds)
        .map(|(r, &seed)| r.expect("every slot filled").map_err(|message| BenchError::Run { seed, message }))
        .collect()
}

fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Linear-interpolation quantile.
fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn stats(xs: &[f64]) -> Value {
    json!({
        "median": median(xs),
        "q1": quantile(xs, 0.25),
        "q3": quantile(xs, 0.75),
        "iqr": quantile(xs, 0.75) - quantile(xs, 0.25),
        "mean": xs.iter().sum::<f64>() / xs.len() as f64,
    })
}

fn column(rows: &[Vec<Value>], i: usize) -> Vec<f64> {
    rows.iter().filter_map(|r| r[i].as_f64()).collect()
}

pub fn run_benchmark(name: &str, seed_count: u64) -> Result<BenchmarkReport, BenchError> {
    if seed_count == 0 {
        return Err(BenchError::NoSeeds);
    }
    let seeds: Vec<u64> = (0..seed_count).collect();
    match name {
        "bo_vs_random" => bo_vs_random(seeds),
        "rf_approx" => rf_approx(seeds),
        "mobo_hypervolume" => mobo_hypervolume(seeds),
        "federated_tradeoff" => federated_tradeoff(seeds),
        other => Err(BenchError::Unknown(other.to_owned())),
    }
}

/// Write `<name>.json` and `<name>.csv` into `dir`.
pub fn write_report(report: &BenchmarkReport, dir: &Path) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(report).map_err(io::Error::from)?;
    text.push('\n');
    fs::write(dir.join(format!("{}.json", report.name)), text)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", report.name))).map_err(io::Error::from)?;
    w.write_record(&report.columns).map_err(io::Error::from)?;
    for row in &report.rows {
        let cells: Vec<String> = row
            .iter()
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect();
        w.write_record(&cells).map_err(io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

const TOTAL_EVALS: usize = 30;

fn bo_vs_random(seeds: Vec<u64>) -> Result<BenchmarkReport, BenchError> {
    let rows = par_seeds(&seeds, |seed| {
        let err = |e: querykernel_core::bo::RunError| e.to_string();
        let init = BoConfig::new(2, 0, seed).init_count;
        let cfg = BoConfig {
            budget: TOTAL_EVALS - init,
            ..BoConfig::new(2, 0, seed)
        };
        let bo = bo_run(&mut Branin::default(), &cfg).map_err(err)?;
        let rs = random_search(&mut Branin::default(), TOTAL_EVALS, seed).map_err(err)?;
        let init = BoConfig::new(1, 0, seed).init_count;
        let cfg = BoConfig {
            budget: TOTAL_EVALS - init,
            ..BoConfig::new(1, 0, seed)
        };
        let sphere = bo_run(&mut Sphere1D::default(), &cfg).map_err(err)?;
        let best = |t: &querykernel_core::trace::RunTrace| t.best_step().expect("non-empty").clone();
        Ok(vec![
            json!(seed),
            json!(best(&bo).value),
            json!(best(&rs).value),
            json!((best(&sphere).point[0] - 0.3).abs()),
        ])
    })?;
    let (bo, rs, gap) = (column(&rows, 1), column(&rows, 2), column(&rows, 3));
    let pass = median(&bo) > median(&rs) && median(&gap) < 0.05;
    Ok(BenchmarkReport {
        name: "bo_vs_random".into(),
        seeds,
        columns: ["seed", "branin_bo_best", "branin_random_best", "sphere_argbest_gap"].map(String::from).to_vec(),
        rows,
        aggregate: json!({"branin_bo_best": stats(&bo), "branin_random_best": stats(&rs), "sphere_argbest_gap": stats(&gap)}),
        thresholds: json!({
            "evaluations": TOTAL_EVALS,
            "rule": "median BO best > median random best on Branin; median sphere |argbest − 0.3| < 0.05",
            "sphere_gap_max": 0.05,
        }),
        pass,
    })
}

const RF_FEATURES: [usize; 3] = [250, 1000, 4000];

fn rf_approx(seeds: Vec<u64>) -> Result<BenchmarkReport, BenchError> {
    let per_seed = par_seeds(&seeds, |seed| {
        let exact = KernelSpec::isotropic(KernelFamily::SquaredExponential, 3, 1.0, 1.0).map_err(|e| e.to_string())?;
        let pts = uniform_design(&Bounds::unit(3), 200, derive_seed(seed, 40, 0));
        let mut rows = Vec::new();
        for d in RF_FEATURES {
            let map = RandomFeatureMap::new(3, d, 1.0, 1.0, seed).map_err(|e| e.to_string())?;
            let mut errs = Vec::with_capacity(100);
            for pair in pts.chunks(2) {
                let approx = map.approx_kernel(&pair[0], &pair[1]).map_err(|e| e.to_string())?;
                errs.push((approx - exact.covariance(&pair[0], &pair[1])).abs());
            }
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let max = errs.iter().cloned().fold(0.0, f64::max);
            rows.push(vec![json!(seed), json!(d), json!(mean), json!(max)]);
        }
        Ok(rows)
    })?;
    let rows: Vec<Vec<Value>> = per_seed.into_iter().flatten().collect();
    let mut aggregate = serde_json::Map::new();
    let mut means = Vec::new();
    for d in RF_FEATURES {
        let sub: Vec<Vec<Value>> = rows.iter().filter(|r| r[1] == json!(d)).cloned().collect();
        let m = column(&sub, 2);
        means.push(m.iter().sum::<f64>() / m.len() as f64);
        aggregate.insert(format!("D={d}"), json!({"mean_abs_error": stats(&m), "max_abs_error": stats(&column(&sub, 3))}));
    }
    let pass = means.windows(2).all(|w| w[1] < w[0]);
    Ok(BenchmarkReport {
        name: "rf_approx".into(),
        seeds,
        columns: ["seed", "features", "mean_abs_error", "max_abs_error"].map(String::from).to_vec(),
        rows,
        aggregate: Value::Object(aggregate),
        thresholds: json!({
            "kernel": "squared exponential, lengthscale 1, signal variance 1, 100 pairs in [0,1]^3",
            "rule": "mean absolute error decreases over D = 250, 1000, 4000 in aggregate",
        }),
        pass,
    })
}

const HV_REFERENCE: [f64; 2] = [-1.0, -1.0];

fn mobo_hypervolume(seeds: Vec<u64>) -> Result<BenchmarkReport, BenchError> {
    let rows = par_seeds(&seeds, |seed| {
        let err = |e: querykernel_core::Error| e.to_string();
        let out = mobo_run(&mut TwoBowls::default(), &MoboConfig::new(TOTAL_EVALS, seed)).map_err(|e| e.to_string())?;
        let hv_mobo = hypervolume_2d(&out.archive.objective_vectors(), HV_REFERENCE).map_err(err)?;
        let mut problem = TwoBowls::default();
        let mut random = Vec::with_capacity(TOTAL_EVALS);
        for p in uniform_design(problem.bounds(), TOTAL_EVALS, derive_seed(seed, 41, 0)) {
            random.push(problem.evaluate(&p, 0).map_err(err)?);
        }
        let front: Vec<Vec<f64>> = pareto_front(&random).map_err(err)?.into_iter().map(|i| random[i].clone()).collect();
        let hv_random = hypervolume_2d(&front, HV_REFERENCE).map_err(err)?;
        Ok(vec![json!(seed), json!(hv_mobo), json!(hv_random), json!(out.archive.len()), json!(front.len())])
    })?;
    let (m, r) = (column(&rows, 1), column(&rows, 2));
    Ok(BenchmarkReport {
        name: "mobo_hypervolume".into(),
        seeds,
        columns: ["seed", "hv_mobo", "hv_random", "front_size_mobo", "front_size_random"].map(String::from).to_vec(),
        pass: median(&m) > median(&r),
        rows,
        aggregate: json!({"hv_mobo": stats(&m), "hv_random": stats(&r)}),
        thresholds: json!({
            "problem": "two_bowls",
            "evaluations": TOTAL_EVALS,
            "reference": HV_REFERENCE,
            "rule": "median MOBO hypervolume > median random-search hypervolume",
        }),
    })
}

const FED_THRESHOLDS: [f64; 5] = [0.0, 0.5, 1.5, 4.0, f64::INFINITY];

fn threshold_label(t: f64) -> Value {
    if t.is_finite() {
        json!(t)
    } else {
        json!("inf")
    }
}

fn federated_tradeoff(seeds: Vec<u64>) -> Result<BenchmarkReport, BenchError> {
    let per_seed = par_seeds(&seeds, |seed| {
        let mut rows = Vec::new();
        for t in FED_THRESHOLDS {
            let cfg = FederatedConfig::new(3, 8, 2, t, seed);
            let out = querykernel_core::federated::federated_bo_run(&mut Sphere1D::default(), &cfg).map_err(|e| e.to_string())?;
            rows.push(vec![
                json!(seed),
                threshold_label(t),
                json!(out.log.uploads().count()),
                json!(out.log.uploads_after_round0()),
                json!(out.log.total_bytes()),
                json!(out.best_value),
                json!((out.best_point[0] - 0.3).abs()),
            ]);
        }
        Ok(rows)
    })?;
    let rows: Vec<Vec<Value>> = per_seed.into_iter().flatten().collect();
    let mut aggregate = serde_json::Map::new();
    let mut upload_medians = Vec::new();
    let mut silent_late = 0.0;
    for t in FED_THRESHOLDS {
        let sub: Vec<Vec<Value>> = rows.iter().filter(|r| r[1] == threshold_label(t)).cloned().collect();
        let uploads = column(&sub, 2);
        upload_medians.push(median(&uploads));
        if t.is_infinite() {
            silent_late = column(&sub, 3).iter().sum();
        }
        aggregate.insert(
            format!("threshold={}", threshold_label(t).to_string().trim_matches('"')),
            json!({
                "uploads": stats(&uploads),
                "bytes": stats(&column(&sub, 4)),
                "best_value": stats(&column(&sub, 5)),
                "argbest_gap": stats(&column(&sub, 6)),
            }),
        );
    }
    let pass = upload_medians.windows(2).all(|w| w[1] <= w[0]) && silent_late == 0.0;
    Ok(BenchmarkReport {
        name: "federated_tradeoff".into(),
        seeds,
        columns: ["seed", "threshold", "uploads", "uploads_after_round0", "bytes", "best_value", "argbest_gap"]
            .map(String::from)
            .to_vec(),
        rows,
        aggregate: Value::Object(aggregate),
        thresholds: json!({
            "problem": "sphere1d, 3 agents, 8 rounds, 2 evaluations per round",
            "rule": "median uploads non-increasing in the threshold; no uploads after round 0 at threshold inf",
        }),
        pass,
    })
}
