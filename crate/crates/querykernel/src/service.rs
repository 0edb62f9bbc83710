//! HTTP service over a [`RunRegistry`].
//!
//! * `GET /runs`: run list.
//! * `GET /runs/{id}?tail=N`: status, last `N` trace steps (default 20),
//!   pending duel and judgment history.
//! * `POST /runs/{id}/preference` with `{"winner": "left" | "right"}` and
//!   optional `duel` and `idempotency_key`: 200 on success, 400 for a
//!   malformed body, 404 for an unknown run, 409 when no duel is pending.
//! * `GET /runs/{id}/events?from=K`: server-sent events. `step` events carry
//!   trace lines (event id = iteration index, so `Last-Event-ID` resumes),
//!   `status` events carry status changes, `end` closes the stream.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{oneshot, watch};

use querykernel_core::trace::TraceStep;

use crate::registry::{PostError, PreferenceBody, RunRegistry, RunStatus};

type Shared = State<Arc<RunRegistry>>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": message.into()}))).into_response()
}

pub fn router(registry: Arc<RunRegistry>) -> Router {
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/preference", post(post_preference))
        .route("/runs/{id}/events", get(events))
        .with_state(registry)
}

async fn list_runs(State(reg): Shared) -> Response {
    Json(reg.list()).into_response()
}

#[derive(Deserialize)]
struct TailQuery {
    tail: Option<usize>,
}

async fn get_run(State(reg): Shared, Path(id): Path<String>, Query(q): Query<TailQuery>) -> Response {
    match reg.view(&id, q.tail.unwrap_or(20)) {
        Some(v) => Json(v).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown run {id}")),
    }
}

async fn post_preference(State(reg): Shared, Path(id): Path<String>, body: Bytes) -> Response {
    if reg.status(&id).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown run {id}"));
    }
    let body: PreferenceBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed judgment: {e}")),
    };
    match reg.post_preference(&id, body) {
        Ok(j) => Json(json!({"run": id, "duel": j.index, "winner": j.winner})).into_response(),
        Err(PostError::NotFound) => error(StatusCode::NOT_FOUND, format!("unknown run {id}")),
        Err(PostError::Conflict(msg)) => error(StatusCode::CONFLICT, msg),
    }
}

#[derive(Deserialize)]
struct FromQuery {
    from: Option<usize>,
}

struct Cursor {
    reg: Arc<RunRegistry>,
    id: String,
    next: usize,
    buffer: VecDeque<TraceStep>,
    last_status: Option<RunStatus>,
    rx: watch::Receiver<u64>,
    ended: bool,
}

fn step_event(index: usize, step: &TraceStep) -> Event {
    Event::default()
        .event("step")
        .id(index.to_string())
        .data(serde_json::to_string(step).expect("trace steps serialize"))
}

fn event_stream(cursor: Cursor) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(cursor, |mut c| async move {
        if c.ended {
            return None;
        }
        loop {
            if let Some(step) = c.buffer.pop_front() {
                let ev = step_event(c.next, &step);
                c.next += 1;
                return Some((Ok(ev), c));
            }
            // mark the version seen before reading, so no change is missed
            c.rx.borrow_and_update();
            let (steps, status) = c.reg.steps_since(&c.id, c.next)?;
            if !steps.is_empty() {
                c.buffer.extend(steps);
                continue;
            }
            if c.last_status != Some(status) {
                c.last_status = Some(status);
                let ev = Event::default()
                    .event("status")
                    .data(json!({"status": status, "steps": c.next}).to_string());
                return Some((Ok(ev), c));
            }
            if status.is_terminal() {
                c.ended = true;
                return Some((Ok(Event::default().event("end").data(json!({"status": status}).to_string())), c));
            }
            if c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn events(State(reg): Shared, Path(id): Path<String>, Query(q): Query<FromQuery>, headers: HeaderMap) -> Response {
    if reg.status(&id).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown run {id}"));
    }
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map(|i| i + 1);
    let cursor = Cursor {
        rx: reg.subscribe(),
        reg,
        id,
        next: resume.or(q.from).unwrap_or(0),
        buffer: VecDeque::new(),
        last_status: None,
        ended: false,
    };
    Sse::new(event_stream(cursor)).keep_alive(KeepAlive::default()).into_response()
}

/// A service running on its own thread and runtime.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<io::Result<()>>>,
}

impl ServiceHandle {
    /// Stop accepting connections and wait for the server thread.
    pub fn stop(mut self) -> io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("service thread panicked"))),
            None => Ok(()),
        }
    }

    /// Block until the server exits on its own (it normally never does).
    pub fn wait(mut self) -> io::Result<()> {
        self.shutdown.take();
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("service thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}

/// Bind `127.0.0.1:port` (0 picks a free port) and serve on a background thread.
pub fn spawn_service(registry: Arc<RunRegistry>, host: &str, port: u16) -> io::Result<ServiceHandle> {
    let listener = std::net::TcpListener::bind((host, port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = thread::Builder::new().name("querykernel-service".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, router(registry))
                .with_graceful_shutdown(async move {
                    // a dropped sender (from `wait`) means serve forever
                    if rx.await.is_err() {
                        futures::future::pending::<()>().await;
                    }
                })
                .await
        })
    })?;
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
