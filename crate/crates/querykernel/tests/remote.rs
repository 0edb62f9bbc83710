use std::net::SocketAddr;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use querykernel::output::read_trace;
use querykernel::remote::{HttpOptions, RemoteEndpoint, TOKEN_ENV};

const TOKEN: &str = "tok-3f9a1c77e2";

#[derive(Default)]
struct Mock {
    /// Fail the first `flaky` evaluator calls with 503.
    flaky: usize,
    /// Answer evaluator calls past this count with 400.
    eval_limit: Option<usize>,
    eval_calls: AtomicUsize,
    gen_calls: AtomicUsize,
    auth: Mutex<Vec<Option<String>>>,
    bodies: Mutex<Vec<Value>>,
}

fn authorized(mock: &Mock, headers: &HeaderMap) -> bool {
    let auth = headers.get("authorization").and_then(|v| v.to_str().ok()).map(str::to_owned);
    let ok = auth.as_deref() == Some(&format!("Bearer {TOKEN}"));
    mock.auth.lock().unwrap().push(auth);
    ok
}

async fn evaluate(State(m): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    if !authorized(&m, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let n = m.eval_calls.fetch_add(1, Ordering::SeqCst);
    m.bodies.lock().unwrap().push(body.clone());
    if n < m.flaky {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    if m.eval_limit.is_some_and(|l| n >= l) {
        return (StatusCode::BAD_REQUEST, "quota exhausted").into_response();
    }
    let instruction = body["instruction"].as_str().unwrap_or_default();
    let input = body["input"].as_str().unwrap_or_default();
    let output = if instruction.contains("repeat") { input.to_owned() } else { "no idea".to_owned() };
    Json(json!({"output": output})).into_response()
}

async fn generate(State(m): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    if !authorized(&m, &headers) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    // a fresh instruction per call, so the evaluator cache never hides a call
    let n = m.gen_calls.fetch_add(1, Ordering::SeqCst);
    let first: f64 = body["instruction"]
        .as_str()
        .and_then(|s| s.split(' ').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    let text = if first > 0.0 { "repeat the input" } else { "say something" };
    Json(json!({"output": format!("{text} v{n}")})).into_response()
}

fn serve(mock: Arc<Mock>) -> SocketAddr {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = Router::new()
                .route("/evaluate", post(evaluate))
                .route("/generate", post(generate))
                .with_state(mock);
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    addr
}

fn quick() -> HttpOptions {
    HttpOptions {
        timeout: Duration::from_secs(10),
        retries: 3,
        backoff: Duration::from_millis(10),
        min_interval: None,
    }
}

#[test]
fn retries_transient_failures_with_bearer_auth() {
    let mock = Arc::new(Mock {
        flaky: 2,
        ..Mock::default()
    });
    let addr = serve(mock.clone());
    let mut ep = RemoteEndpoint::new(&format!("http://{addr}/evaluate"), Some(TOKEN.into()), quick()).unwrap();
    let out = ep.call("please repeat", "a b c").unwrap();
    assert_eq!(out, "a b c");
    assert_eq!(mock.eval_calls.load(Ordering::SeqCst), 3);
    let auth = mock.auth.lock().unwrap();
    assert!(auth.iter().all(|a| a.as_deref() == Some(&format!("Bearer {TOKEN}") as &str)));
    assert_eq!(mock.bodies.lock().unwrap()[2], json!({"instruction": "please repeat", "input": "a b c"}));

    let shown = format!("{ep:?}");
    assert!(!shown.contains(TOKEN), "{shown}");
    assert!(shown.contains("redacted"));
}

#[test]
fn gives_up_after_the_retry_budget() {
    let mock = Arc::new(Mock {
        flaky: 100,
        ..Mock::default()
    });
    let addr = serve(mock.clone());
    let mut ep = RemoteEndpoint::new(&format!("http://{addr}/evaluate"), Some(TOKEN.into()), quick()).unwrap();
    let err = ep.call("x", "y").unwrap_err().to_string();
    assert_eq!(mock.eval_calls.load(Ordering::SeqCst), 4);
    assert!(err.contains("503") && err.contains("3 retries"), "{err}");
    assert!(!err.contains(TOKEN));
}

#[test]
fn client_errors_are_not_retried_and_hide_the_token() {
    let mock = Arc::new(Mock::default());
    let addr = serve(mock.clone());
    let mut ep = RemoteEndpoint::new(&format!("http://{addr}/evaluate"), Some("wrong-token".into()), quick()).unwrap();
    let err = ep.call("x", "y").unwrap_err().to_string();
    assert!(err.contains("401"), "{err}");
    assert!(!err.contains("wrong-token"));
    assert_eq!(mock.auth.lock().unwrap().len(), 1);

    // nothing listening: transport errors are retried, then reported
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut ep = RemoteEndpoint::new(&format!("http://{closed}/evaluate"), Some(TOKEN.into()), quick()).unwrap();
    let err = ep.call("x", "y").unwrap_err().to_string();
    assert!(err.contains("failed") && !err.contains(TOKEN), "{err}");
}

fn remote_config(dir: &std::path::Path, addr: SocketAddr, budget: usize) -> std::path::PathBuf {
    let text = format!(
        r#"mode = "instructzero"
seed = 3

[instructzero]
task = "remote"
d = 6
d_prime = 2
budget = {budget}
init_count = 3
validation = [{{ input = "red green", output = "red green" }}, {{ input = "one two three", output = "one two three" }}]
exemplars = [{{ input = "a b", output = "a b" }}]

[instructzero.remote]
evaluator_url = "http://{addr}/evaluate"
generator_url = "http://{addr}/generate"
timeout_s = 10
retries = 0
"#
    );
    let path = dir.join("remote.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_cli(config: &std::path::Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_querykernel"))
        .arg("run")
        .arg(config)
        .env(TOKEN_ENV, TOKEN)
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    (out.status.code().unwrap_or(-1), stderr)
}

#[test]
fn remote_instructzero_run_end_to_end() {
    let mock = Arc::new(Mock::default());
    let addr = serve(mock.clone());
    let dir = tempfile::tempdir().unwrap();
    let (code, stderr) = run_cli(&remote_config(dir.path(), addr, 6));
    assert_eq!(code, 0, "{stderr}");
    assert!(!stderr.contains(TOKEN));

    let trace = read_trace(&dir.path().join("out/trace.jsonl")).unwrap();
    assert_eq!(trace.len(), 6);
    assert_eq!(mock.gen_calls.load(Ordering::SeqCst), 6);
    // two validation calls per step plus two noise repeats of the first
    assert_eq!(mock.eval_calls.load(Ordering::SeqCst), 2 * 6 + 2 * 2);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "done");
    assert_eq!(summary["task"], "remote");
    assert!(!summary.to_string().contains(TOKEN));
    assert!(mock.auth.lock().unwrap().iter().all(|a| a.as_deref() == Some(&format!("Bearer {TOKEN}") as &str)));
}

#[test]
fn remote_failure_mid_run_keeps_the_trace_prefix() {
    let mock = Arc::new(Mock {
        eval_limit: Some(8),
        ..Mock::default()
    });
    let addr = serve(mock.clone());
    let dir = tempfile::tempdir().unwrap();
    let (code, stderr) = run_cli(&remote_config(dir.path(), addr, 10));
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("400"), "{stderr}");
    assert!(!stderr.contains(TOKEN));

    let trace_text = std::fs::read_to_string(dir.path().join("out/trace.jsonl")).unwrap();
    let trace = read_trace(&dir.path().join("out/trace.jsonl")).unwrap();
    // step 0 costs 6 calls (noise repeats included), step 1 two more, call 9 fails step 2
    assert_eq!(trace.len(), 2);
    assert_eq!(trace_text.lines().count(), trace.len(), "every line parses");
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "failed");
    assert_eq!(summary["steps"], json!(trace.len()));
}
