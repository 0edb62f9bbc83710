//! Subcommand bodies. Each returns the process exit code: 0 success, 1 run
//! failure, 2 invalid input.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use querykernel_core::fairness::audit;
use querykernel_core::preferential::PreferenceOracle;

use crate::audit::read_audit_csv;
use crate::bench::{run_benchmark, write_report, BenchError};
use crate::config::{OracleChoice, RunConfig};
use crate::output::{write_json, TraceWriter, SUMMARY_FILE};
use crate::registry::{InteractiveOracle, RunRegistry};
use crate::runner::execute;
use crate::service::spawn_service;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

fn base_dir(config_path: &Path) -> PathBuf {
    match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Execute one validated config, optionally mirrored into `registry` as run
/// `id`. Writes the trace as it goes and the summary at the end.
pub fn run_loaded(config: &RunConfig, base: &Path, registry: Option<(&Arc<RunRegistry>, &str)>) -> i32 {
    let out_dir = config.output_dir_from(base);
    let fail = |msg: String| {
        if let Some((reg, id)) = registry {
            reg.fail(id, msg.clone());
        }
        eprintln!("error: {msg}");
        EXIT_RUN_FAILED
    };
    let mut writer = match TraceWriter::create(&out_dir) {
        Ok(w) => w,
        Err(e) => return fail(format!("cannot create trace in {}: {e}", out_dir.display())),
    };
    if let Some((reg, id)) = registry {
        reg.start(id);
    }
    let mut oracle = match (config.preferential.as_ref().map(|p| p.oracle), registry) {
        (Some(OracleChoice::Interactive), Some((reg, id))) => Some(InteractiveOracle {
            registry: reg.clone(),
            run_id: id.to_owned(),
            timeout: config
                .preferential
                .as_ref()
                .and_then(|p| p.timeout_s)
                .map(Duration::from_secs_f64),
        }),
        _ => None,
    };
    let mut io_error = None;
    let result = {
        let mut observer = |step: &querykernel_core::trace::TraceStep| {
            if let Err(e) = writer.append(step) {
                io_error.get_or_insert(e);
            }
            if let Some((reg, id)) = registry {
                reg.push_step(id, step);
            }
        };
        execute(
            config,
            base,
            &mut observer,
            oracle.as_mut().map(|o| o as &mut dyn PreferenceOracle),
        )
    };
    if let Some(e) = io_error {
        return fail(format!("writing {}: {e}", writer.path().display()));
    }
    let summary_path = out_dir.join(SUMMARY_FILE);
    match result {
        Ok(out) => {
            let mut summary = json!({"status": "done"});
            if let (Value::Object(dst), Value::Object(src)) = (&mut summary, out.summary) {
                dst.extend(src);
            }
            for (name, contents) in &out.artifacts {
                if let Err(e) = std::fs::write(out_dir.join(name), contents) {
                    return fail(format!("writing {name}: {e}"));
                }
            }
            if let Err(e) = write_json(&summary_path, &summary) {
                return fail(format!("writing {}: {e}", summary_path.display()));
            }
            if let Some((reg, id)) = registry {
                reg.finish(id, summary);
            }
            eprintln!("done: {} steps, outputs in {}", writer.lines(), out_dir.display());
            EXIT_OK
        }
        Err(f) => {
            let summary = json!({
                "status": "failed",
                "mode": config.mode.name(),
                "seed": config.seed,
                "steps": writer.lines(),
                "error": f.message,
            });
            // the trace prefix is already on disk; the summary is best effort
            let _ = write_json(&summary_path, &summary);
            fail(format!("run failed after {} steps: {}", writer.lines(), f.message))
        }
    }
}

/// `querykernel run <config>`.
pub fn run_command(path: &Path) -> i32 {
    let config = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let base = base_dir(path);
    if !config.serve {
        return run_loaded(&config, &base, None);
    }
    let registry = RunRegistry::new();
    let service = match spawn_service(registry.clone(), "127.0.0.1", config.port) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot serve on port {}: {e}", config.port);
            return EXIT_RUN_FAILED;
        }
    };
    let id = registry.create(config.mode.name());
    eprintln!("serving run {id} on http://{}", service.addr);
    let code = run_loaded(&config, &base, Some((&registry, &id)));
    let _ = service.stop();
    code
}

/// `querykernel serve --port N [config ...]`: serve until killed, running
/// each config as a registered run.
pub fn serve_command(host: &str, port: u16, configs: &[PathBuf]) -> i32 {
    let mut loaded = Vec::new();
    for path in configs {
        match RunConfig::load(path) {
            Ok(c) => loaded.push((c, base_dir(path))),
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_INVALID;
            }
        }
    }
    let registry = RunRegistry::new();
    let service = match spawn_service(registry.clone(), host, port) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot serve on {host}:{port}: {e}");
            return EXIT_RUN_FAILED;
        }
    };
    eprintln!("listening on http://{}", service.addr);
    for (config, base) in loaded {
        let id = registry.create(config.mode.name());
        eprintln!("run {id}: {}", config.mode.name());
        let reg = registry.clone();
        thread::spawn(move || run_loaded(&config, &base, Some((&reg, &id))));
    }
    match service.wait() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: service stopped: {e}");
            EXIT_RUN_FAILED
        }
    }
}

/// `querykernel audit <csv>`: prints the report as JSON.
pub fn audit_command(path: &Path) -> i32 {
    let table = match read_audit_csv(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    match audit(&table) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUN_FAILED
        }
    }
}

/// `querykernel bench <name> --seeds N`: exit 0 only if the thresholds pass.
pub fn bench_command(name: &str, seeds: u64, out: &Path) -> i32 {
    let report = match run_benchmark(name, seeds) {
        Ok(r) => r,
        Err(e @ (BenchError::Unknown(_) | BenchError::NoSeeds)) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUN_FAILED;
        }
    };
    if let Err(e) = write_report(&report, out) {
        eprintln!("error: {e}");
        return EXIT_RUN_FAILED;
    }
    println!(
        "{}: {} ({} seeds, report {})",
        report.name,
        if report.pass { "PASS" } else { "FAIL" },
        seeds,
        out.join(format!("{}.json", report.name)).display()
    );
    if report.pass {
        EXIT_OK
    } else {
        EXIT_RUN_FAILED
    }
}
