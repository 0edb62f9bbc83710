//! JSON-over-HTTP generator and evaluator handles.
//!
//! Both speak the same wire format: `POST {"instruction": s, "input": s}`
//! answered by `{"output": s}`. The evaluator sends the instruction and one
//! validation input. The generator sends the soft prompt `ξ` as
//! space-separated numbers in `instruction` and the exemplars, one
//! `input => output` pair per line, in `input`; its `output` is the
//! instruction text.
//!
//! The bearer token comes from `QUERYKERNEL_API_TOKEN` and is never logged
//! or echoed in errors.

use std::fmt;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use querykernel_core::prompt::{Evaluator, ExemplarSet, HandleKind, InstructionGenerator, Tokens};
use querykernel_core::subspace::tokenize;
use querykernel_core::{Error, Result};

pub const TOKEN_ENV: &str = "QUERYKERNEL_API_TOKEN";

#[derive(Serialize)]
struct Request<'a> {
    instruction: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct Response {
    output: String,
}

#[derive(Clone)]
pub struct HttpOptions {
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub retries: u32,
    /// First backoff; doubles on every retry.
    pub backoff: Duration,
    /// Minimum spacing between requests.
    pub min_interval: Option<Duration>,
}

impl Default for HttpOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_millis(500),
            min_interval: None,
        }
    }
}

/// One endpoint plus retry policy. `Debug` redacts the token.
pub struct RemoteEndpoint {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
    options: HttpOptions,
    last_call: Option<Instant>,
}

impl fmt::Debug for RemoteEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteEndpoint")
            .field("url", &self.url)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.options.timeout)
            .field("retries", &self.options.retries)
            .finish()
    }
}

fn failure(message: String, retriable: bool) -> Error {
    Error::Evaluator {
        message,
        retriable,
        completed: 0,
    }
}

impl RemoteEndpoint {
    pub fn new(url: &str, token: Option<String>, options: HttpOptions) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(options.timeout)
            .build()
            .map_err(|e| failure(format!("cannot build HTTP client: {e}"), false))?;
        Ok(Self {
            client,
            url: url.to_owned(),
            token: token.filter(|t| !t.is_empty()),
            options,
            last_call: None,
        })
    }

    /// As [`RemoteEndpoint::new`] with the token read from [`TOKEN_ENV`].
    pub fn from_env(url: &str, options: HttpOptions) -> Result<Self> {
        Self::new(url, std::env::var(TOKEN_ENV).ok(), options)
    }

    fn pace(&mut self) {
        if let (Some(gap), Some(last)) = (self.options.min_interval, self.last_call) {
            let since = last.elapsed();
            if since < gap {
                thread::sleep(gap - since);
            }
        }
        self.last_call = Some(Instant::now());
    }

    fn attempt(&mut self, instruction: &str, input: &str) -> std::result::Result<String, (String, bool)> {
        self.pace();
        let mut req = self.client.post(&self.url).json(&Request { instruction, input });
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        // reqwest errors carry the URL but never headers
        let resp = req.send().map_err(|e| (format!("request to {} failed: {}", self.url, e.without_url()), true))?;
        let status = resp.status();
        if !status.is_success() {
            let retriable = status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS;
            return Err((format!("{} answered HTTP {status}", self.url), retriable));
        }
        let body: Response = resp
            .json()
            .map_err(|e| (format!("{} sent a malformed body: {}", self.url, e.without_url()), false))?;
        Ok(body.output)
    }

    /// POST with exponential backoff on transport errors, 5xx and 429.
    pub fn call(&mut self, instruction: &str, input: &str) -> Result<String> {
        let mut delay = self.options.backoff;
        let mut tries = 0;
        loop {
            match self.attempt(instruction, input) {
                Ok(out) => return Ok(out),
                Err((_, true)) if tries < self.options.retries => {
                    tries += 1;
                    thread::sleep(delay);
                    delay *= 2;
                }
                Err((msg, retriable)) => {
                    let msg = if tries > 0 { format!("{msg} (after {tries} retries)") } else { msg };
                    return Err(failure(msg, retriable));
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct RemoteEvaluator(pub RemoteEndpoint);

impl Evaluator for RemoteEvaluator {
    fn answer(&mut self, instruction: &[String], input: &[String]) -> Result<Tokens> {
        self.0.call(&instruction.join(" "), &input.join(" ")).map(|s| tokenize(&s))
    }

    fn kind(&self) -> HandleKind {
        HandleKind::Remote
    }
}

#[derive(Debug)]
pub struct RemoteGenerator(pub RemoteEndpoint);

/// The generator request's `input`: one `x => y` line per exemplar.
pub fn render_exemplars(exemplars: &ExemplarSet) -> String {
    exemplars
        .exemplars()
        .iter()
        .map(|(x, y)| format!("{} => {}", x.join(" "), y.join(" ")))
        .collect::<Vec<_>>()
        .join("\n")
}

impl InstructionGenerator for RemoteGenerator {
    fn generate(&mut self, soft_prompt: &[f64], exemplars: &ExemplarSet) -> Result<Tokens> {
        let xi: Vec<String> = soft_prompt.iter().map(|v| v.to_string()).collect();
        let text = self.0.call(&xi.join(" "), &render_exemplars(exemplars))?;
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return Err(failure(format!("{} returned an empty instruction", self.0.url), false));
        }
        Ok(tokens)
    }

    fn kind(&self) -> HandleKind {
        HandleKind::Remote
    }
}
