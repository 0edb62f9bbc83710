//! Shared run state read by the HTTP service and written by run threads.
//!
//! Every run lives behind one mutex; readers get a consistent snapshot. An
//! interactive preference oracle parks its duel here and waits on a condvar,
//! which blocks only the run's own thread.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use querykernel_core::preferential::{OracleKind, PreferenceOracle};
use querykernel_core::trace::{TraceStep, Winner};
use querykernel_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    AwaitingPreference,
    Done,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Done | RunStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DuelOption {
    pub label: String,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingDuel {
    pub index: usize,
    pub left: DuelOption,
    pub right: DuelOption,
    /// Milliseconds since the Unix epoch.
    pub issued_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Judgment {
    pub index: usize,
    pub winner: Winner,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug)]
struct RunState {
    mode: String,
    status: RunStatus,
    trace: Vec<TraceStep>,
    pending: Option<PendingDuel>,
    /// Set by a POST, taken by the waiting oracle.
    decided: Option<Winner>,
    judgments: Vec<Judgment>,
    summary: Option<Value>,
    error: Option<String>,
}

/// Body of `POST /runs/{id}/preference`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceBody {
    pub winner: Winner,
    /// Duel index the judgment is for; rejected with 409 if stale.
    pub duel: Option<usize>,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PostError {
    NotFound,
    Conflict(String),
}

/// Label a point for display: coordinates to 4 significant digits.
pub fn display_point(point: &[f64]) -> String {
    let parts: Vec<String> = point
        .iter()
        .map(|&v| {
            if v == 0.0 || !v.is_finite() {
                return format!("{v}");
            }
            let digits = 3 - v.abs().log10().floor() as i32;
            if (0..=15).contains(&digits) {
                format!("{v:.*}", digits as usize)
            } else {
                format!("{v:.3e}")
            }
        })
        .collect();
    format!("({})", parts.join(", "))
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub struct RunRegistry {
    runs: Mutex<BTreeMap<String, RunState>>,
    next_id: Mutex<u64>,
    judged: Condvar,
    /// Bumped on every change; SSE streams wait on it.
    version: watch::Sender<u64>,
}

impl Default for RunRegistry {
    fn default() -> Self {
        Self {
            runs: Mutex::new(BTreeMap::new()),
            next_id: Mutex::new(1),
            judged: Condvar::new(),
            version: watch::channel(0).0,
        }
    }
}

impl RunRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, RunState>> {
        self.runs.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn bump(&self) {
        self.version.send_modify(|v| *v += 1);
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.version.subscribe()
    }

    /// Register a run in `pending` state and return its id.
    pub fn create(&self, mode: &str) -> String {
        let id = {
            let mut next = self.next_id.lock().unwrap_or_else(|p| p.into_inner());
            let id = format!("run-{:04}", *next);
            *next += 1;
            id
        };
        self.lock().insert(
            id.clone(),
            RunState {
                mode: mode.to_owned(),
                status: RunStatus::Pending,
                trace: Vec::new(),
                pending: None,
                decided: None,
                judgments: Vec::new(),
                summary: None,
                error: None,
            },
        );
        self.bump();
        id
    }

    /// Apply `f` to a live run. Done and failed runs are never touched.
    fn update(&self, id: &str, f: impl FnOnce(&mut RunState)) {
        let changed = {
            let mut runs = self.lock();
            match runs.get_mut(id) {
                Some(run) if !run.status.is_terminal() => {
                    f(run);
                    true
                }
                _ => false,
            }
        };
        if changed {
            self.judged.notify_all();
            self.bump();
        }
    }

    pub fn start(&self, id: &str) {
        self.update(id, |r| {
            if r.status == RunStatus::Pending {
                r.status = RunStatus::Running;
            }
        });
    }

    pub fn push_step(&self, id: &str, step: &TraceStep) {
        self.update(id, |r| r.trace.push(step.clone()));
    }

    pub fn finish(&self, id: &str, summary: Value) {
        self.update(id, |r| {
            r.status = RunStatus::Done;
            r.pending = None;
            r.summary = Some(summary);
        });
    }

    pub fn fail(&self, id: &str, error: String) {
        self.update(id, |r| {
            r.status = RunStatus::Failed;
            r.pending = None;
            r.error = Some(error);
        });
    }

    pub fn status(&self, id: &str) -> Option<RunStatus> {
        self.lock().get(id).map(|r| r.status)
    }

    pub fn trace_len(&self, id: &str) -> Option<usize> {
        self.lock().get(id).map(|r| r.trace.len())
    }

    /// Steps from `from` on, plus the status, in one consistent read.
    pub fn steps_since(&self, id: &str, from: usize) -> Option<(Vec<TraceStep>, RunStatus)> {
        self.lock()
            .get(id)
            .map(|r| (r.trace.get(from..).map(<[_]>::to_vec).unwrap_or_default(), r.status))
    }

    pub fn list(&self) -> Value {
        let runs = self.lock();
        Value::Array(
            runs.iter()
                .map(|(id, r)| {
                    json!({
                        "id": id,
                        "mode": r.mode,
                        "status": r.status,
                        "steps": r.trace.len(),
                        "incumbent": r.trace.last().map(|s| s.incumbent),
                    })
                })
                .collect(),
        )
    }

    /// Status, last `tail` trace steps, pending duel and judgment history.
    pub fn view(&self, id: &str, tail: usize) -> Option<Value> {
        let runs = self.lock();
        let r = runs.get(id)?;
        let start = r.trace.len().saturating_sub(tail);
        Some(json!({
            "id": id,
            "mode": r.mode,
            "status": r.status,
            "steps": r.trace.len(),
            "trace_tail": &r.trace[start..],
            "pending_duel": r.pending,
            "judgments": r.judgments,
            "summary": r.summary,
            "error": r.error,
        }))
    }

    /// Record a judgment for the pending duel.
    pub fn post_preference(&self, id: &str, body: PreferenceBody) -> std::result::Result<Judgment, PostError> {
        let judgment = {
            let mut runs = self.lock();
            let run = runs.get_mut(id).ok_or(PostError::NotFound)?;
            if let Some(key) = &body.idempotency_key {
                if let Some(j) = run.judgments.iter().find(|j| j.idempotency_key.as_ref() == Some(key)) {
                    return Err(PostError::Conflict(format!("duel {} was already judged with this key", j.index)));
                }
            }
            let pending = match (&run.pending, run.status) {
                (Some(p), RunStatus::AwaitingPreference) => p,
                _ if run.status.is_terminal() => return Err(PostError::Conflict("run is complete".into())),
                _ => return Err(PostError::Conflict("no duel is pending".into())),
            };
            if let Some(d) = body.duel {
                if d != pending.index {
                    return Err(PostError::Conflict(format!("duel {d} is not pending (pending: {})", pending.index)));
                }
            }
            let judgment = Judgment {
                index: pending.index,
                winner: body.winner,
                idempotency_key: body.idempotency_key,
            };
            // clear the duel now so a racing POST sees 409, not a second pending duel
            run.pending = None;
            run.decided = Some(body.winner);
            run.status = RunStatus::Running;
            run.judgments.push(judgment.clone());
            judgment
        };
        self.judged.notify_all();
        self.bump();
        Ok(judgment)
    }

    /// Park a duel and block until it is judged or `timeout` passes.
    pub fn await_judgment(
        &self,
        id: &str,
        index: usize,
        left: &[f64],
        right: &[f64],
        timeout: Option<Duration>,
    ) -> Result<Winner> {
        let mut runs = self.lock();
        {
            let run = runs.get_mut(id).ok_or_else(|| Error::Oracle(format!("unknown run {id}")))?;
            if run.status.is_terminal() {
                return Err(Error::Oracle(format!("run {id} is no longer live")));
            }
            run.decided = None;
            run.pending = Some(PendingDuel {
                index,
                left: DuelOption {
                    label: format!("A {}", display_point(left)),
                    point: left.to_vec(),
                },
                right: DuelOption {
                    label: format!("B {}", display_point(right)),
                    point: right.to_vec(),
                },
                issued_at: now_ms(),
            });
            run.status = RunStatus::AwaitingPreference;
        }
        self.bump();
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let run = runs.get_mut(id).expect("runs are never removed");
            if let Some(w) = run.decided.take() {
                return Ok(w);
            }
            if run.status.is_terminal() {
                return Err(Error::Oracle(format!("run {id} ended while a duel was pending")));
            }
            runs = match deadline {
                None => self.judged.wait(runs).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        let run = runs.get_mut(id).expect("runs are never removed");
                        run.pending = None;
                        run.status = RunStatus::Running;
                        drop(runs);
                        self.bump();
                        return Err(Error::Oracle(format!(
                            "no judgment for duel {index} within {:.1} s",
                            timeout.unwrap_or_default().as_secs_f64()
                        )));
                    }
                    self.judged.wait_timeout(runs, left).unwrap_or_else(|p| p.into_inner()).0
                }
            };
        }
    }
}

/// A preference oracle answered through the service.
pub struct InteractiveOracle {
    pub registry: Arc<RunRegistry>,
    pub run_id: String,
    pub timeout: Option<Duration>,
}

impl PreferenceOracle for InteractiveOracle {
    fn judge(&mut self, left: &[f64], right: &[f64], duel_index: usize) -> Result<Winner> {
        self.registry
            .await_judgment(&self.run_id, duel_index, left, right, self.timeout)
    }

    fn kind(&self) -> OracleKind {
        OracleKind::Interactive
    }
}
