//! Federated BO: agents fit a Bayesian linear model on shared random Fourier
//! features and exchange only sufficient statistics with a server.
//!
//! Features approximate an SE kernel on the unit cube:
//! `z(θ) = √(2σ_f²/D)·cos(ωθ + b)` with `ω ~ N(0, ℓ⁻² I)`, `b ~ U[0, 2π)`.
//! An agent's statistics are `Λ = Σ z zᵀ/σ_ε²` and `η = Σ z·y/σ_ε²`, both
//! additive over data, so the server posterior `N(Λ_glob⁻¹ Σ η, Λ_glob⁻¹)` with
//! `Λ_glob = λI + Σ Λ_q` equals the pooled single-agent posterior.
//!
//! Messages cross the agent/server boundary as bytes in the wire format
//! described in `docs/federated-wire-format.md`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acquisition::AcquisitionKind;
use crate::bo::{Objective, RunError, StepClock, STREAM_AF, STREAM_EVAL, STREAM_INIT};
use crate::error::{Error, Result};
use crate::gp::cholesky_with_jitter;
use crate::space::{derive_seed, quasi_random_design, Bounds};
use crate::trace::{RunTrace, StepDetail, TraceStep};

const STREAM_FEATURES: u64 = 15;
const STREAM_THOMPSON: u64 = 16;

pub const WIRE_VERSION: u16 = 1;
pub const UPLOAD_MAGIC: &[u8; 4] = b"QKUP";
pub const DOWNLOAD_MAGIC: &[u8; 4] = b"QKDN";

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureMap {
    id: u64,
    omega: DMatrix<f64>,
    phases: DVector<f64>,
    lengthscale: f64,
    signal_var: f64,
}

impl RandomFeatureMap {
    pub fn new(dim: usize, features: usize, lengthscale: f64, signal_var: f64, seed: u64) -> Result<Self> {
        if dim == 0 || features == 0 {
            return Err(Error::InvalidArgument("feature map needs dim ≥ 1 and D ≥ 1".into()));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) || !(signal_var > 0.0 && signal_var.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "lengthscale {lengthscale} and signal variance {signal_var} must be positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_FEATURES, 0));
        let omega = DMatrix::from_fn(features, dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / lengthscale
        });
        let phases = DVector::from_fn(features, |_, _| rng.random::<f64>() * std::f64::consts::TAU);
        let id = derive_seed(
            derive_seed(seed, features as u64, dim as u64),
            lengthscale.to_bits(),
            signal_var.to_bits(),
        );
        Ok(Self {
            id,
            omega,
            phases,
            lengthscale,
            signal_var,
        })
    }

    /// Identity shared by every party using this map.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn features(&self) -> usize {
        self.omega.nrows()
    }

    pub fn dim(&self) -> usize {
        self.omega.ncols()
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    /// `√(2σ_f²/D)`, the bound on every feature.
    pub fn amplitude(&self) -> f64 {
        (2.0 * self.signal_var / self.features() as f64).sqrt()
    }

    pub fn feature_map(&self, theta: &[f64]) -> Result<DVector<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: theta.len(),
            });
        }
        let a = self.amplitude();
        Ok(DVector::from_fn(self.features(), |i, _| {
            let wx: f64 = (0..self.dim()).map(|j| self.omega[(i, j)] * theta[j]).sum();
            a * (wx + self.phases[i]).cos()
        }))
    }

    /// `z(a)ᵀz(b)`, the approximation of `κ_SE(a, b)`.
    pub fn approx_kernel(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(self.feature_map(a)?.dot(&self.feature_map(b)?))
    }
}

pub fn feature_map(map: &RandomFeatureMap, theta: &[f64]) -> Result<DVector<f64>> {
    map.feature_map(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentStatistics {
    pub map_id: u64,
    pub info_matrix: DMatrix<f64>,
    pub info_vector: DVector<f64>,
    pub count: usize,
    /// Round of the last upload.
    pub round: usize,
    /// `logdet(λI + Λ)` at the last upload; `None` before the first.
    pub last_sync_logdet: Option<f64>,
}

impl AgentStatistics {
    pub fn new(map: &RandomFeatureMap) -> Self {
        let d = map.features();
        Self {
            map_id: map.id(),
            info_matrix: DMatrix::zeros(d, d),
            info_vector: DVector::zeros(d),
            count: 0,
            round: 0,
            last_sync_logdet: None,
        }
    }

    pub fn features(&self) -> usize {
        self.info_vector.len()
    }

    /// Add one feature vector and observation.
    pub fn absorb(&mut self, z: &DVector<f64>, y: f64, noise_var: f64) -> Result<()> {
        if z.len() != self.features() {
            return Err(Error::DimensionMismatch {
                expected: self.features(),
                found: z.len(),
            });
        }
        if !(noise_var > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("noise variance {noise_var} must be positive")));
        }
        // symmetric by construction, entry by entry
        let d = z.len();
        for j in 0..d {
            for i in j..d {
                let v = z[i] * z[j] / noise_var;
                self.info_matrix[(i, j)] += v;
                if i != j {
                    self.info_matrix[(j, i)] += v;
                }
            }
        }
        self.info_vector.axpy(y / noise_var, z, 1.0);
        self.count += 1;
        Ok(())
    }

    /// Record an upload at `round`.
    pub fn mark_synced(&mut self, round: usize, prior_precision: f64) -> Result<()> {
        self.last_sync_logdet = Some(regularized_logdet(&self.info_matrix, prior_precision)?);
        self.round = round;
        Ok(())
    }

    /// `logdet(λI + Λ) − last_sync_logdet`; the baseline before any upload is
    /// the prior `D·ln λ`.
    pub fn information_gain(&self, prior_precision: f64) -> Result<f64> {
        let now = regularized_logdet(&self.info_matrix, prior_precision)?;
        let base = self
            .last_sync_logdet
            .unwrap_or(self.features() as f64 * prior_precision.ln());
        Ok(now - base)
    }
}

fn regularized_logdet(info: &DMatrix<f64>, prior_precision: f64) -> Result<f64> {
    if !(prior_precision > 0.0 && prior_precision.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "prior precision {prior_precision} must be positive"
        )));
    }
    let m = info + DMatrix::identity(info.nrows(), info.nrows()) * prior_precision;
    let chol = m
        .cholesky()
        .ok_or(Error::FactorizationFailed { max_jitter: 0.0 })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn local_update(
    stats: &AgentStatistics,
    map: &RandomFeatureMap,
    theta: &[f64],
    z_obs: f64,
    noise_var: f64,
) -> Result<AgentStatistics> {
    if stats.map_id != map.id() {
        return Err(Error::ProtocolViolation("statistics belong to a different feature map".into()));
    }
    let mut out = stats.clone();
    out.absorb(&map.feature_map(theta)?, z_obs, noise_var)?;
    Ok(out)
}

pub fn should_communicate(stats: &AgentStatistics, threshold: f64, prior_precision: f64) -> Result<bool> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be ≥ 0")));
    }
    Ok(stats.information_gain(prior_precision)? > threshold)
}

/// Weight posterior `N(mean, precision⁻¹)`; `chol` is the lower Cholesky
/// factor of the precision.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPosterior {
    pub map_id: u64,
    pub precision: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub chol: DMatrix<f64>,
}

impl GlobalPosterior {
    fn from_precision(map_id: u64, precision: DMatrix<f64>, eta: &DVector<f64>) -> Result<Self> {
        let chol = cholesky_with_jitter(&precision)?.0;
        let y = chol.solve_lower_triangular(eta).expect("triangular");
        let mean = chol.transpose().solve_upper_triangular(&y).expect("triangular");
        Ok(Self {
            map_id,
            precision,
            mean,
            chol,
        })
    }

    /// `Λ·mean`, the information vector that produced this posterior.
    pub fn info_vector(&self) -> DVector<f64> {
        &self.precision * &self.mean
    }

    /// Mean and variance of `zᵀw`.
    pub fn predict(&self, z: &DVector<f64>) -> (f64, f64) {
        let v = self.chol.solve_lower_triangular(z).expect("triangular");
        (z.dot(&self.mean), v.norm_squared())
    }

    /// One posterior draw `mean + L⁻ᵀ ξ`.
    pub fn sample_weights(&self, rng: &mut impl Rng) -> DVector<f64> {
        let xi = DVector::from_fn(self.mean.len(), |_, _| StandardNormal.sample(rng));
        let v = self.chol.transpose().solve_upper_triangular(&xi).expect("triangular");
        &self.mean + v
    }
}

/// `Λ_glob = λI + Σ Λ_q`, `mean = Λ_glob⁻¹ Σ η_q`. Statistics are summed in a
/// canonical content order, so any permutation gives a bit-identical result.
pub fn aggregate(stats: &[AgentStatistics], prior_precision: f64) -> Result<GlobalPosterior> {
    let first = stats.first().ok_or(Error::EmptyInput("agent statistics"))?;
    if !(prior_precision > 0.0 && prior_precision.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!(
            "prior precision {prior_precision} must be positive"
        )));
    }
    let d = first.features();
    let mut precision = DMatrix::identity(d, d) * prior_precision;
    let mut eta = DVector::zeros(d);
    if stats.iter().any(|s| s.map_id != first.map_id || s.features() != d) {
        return Err(Error::ProtocolViolation("statistics from different feature maps".into()));
    }
    let key = |s: &AgentStatistics| -> Vec<u64> {
        let mut k = vec![s.count as u64];
        k.extend(s.info_vector.iter().chain(s.info_matrix.iter()).map(|v| v.to_bits()));
        k
    };
    let mut ordered: Vec<&AgentStatistics> = stats.iter().collect();
    ordered.sort_by_cached_key(|s| key(s));
    for s in ordered {
        precision += &s.info_matrix;
        eta += &s.info_vector;
    }
    GlobalPosterior::from_precision(first.map_id, precision, &eta)
}

/// Agent → server. Carries statistics only, never evaluation records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UploadPayload {
    pub version: u16,
    pub agent_id: u32,
    pub round: u32,
    pub features: u32,
    pub map_id: u64,
    pub count: u64,
    /// Row-major `D×D`.
    pub info_matrix: Vec<f64>,
    pub info_vector: Vec<f64>,
}

/// Server → agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownloadPayload {
    pub version: u16,
    pub round: u32,
    pub features: u32,
    pub map_id: u64,
    /// Row-major `D×D`, prior included.
    pub precision: Vec<f64>,
    pub mean: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn check_block(name: &str, values: &[f64], expected: usize) -> Result<()> {
    if values.len() != expected {
        return Err(Error::ProtocolViolation(format!(
            "{name} has {} entries, expected {expected}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::ProtocolViolation(format!("{name} contains a non-finite value")));
    }
    Ok(())
}

fn check_symmetric(name: &str, m: &[f64], d: usize) -> Result<()> {
    for i in 0..d {
        for j in 0..i {
            if m[i * d + j] != m[j * d + i] {
                return Err(Error::ProtocolViolation(format!("{name} is not symmetric")));
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::ProtocolViolation("payload truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::ProtocolViolation("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::ProtocolViolation("bad magic".into()));
        }
        let v = self.u16()?;
        if v != WIRE_VERSION {
            return Err(Error::ProtocolViolation(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::ProtocolViolation(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn put_floats(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl UploadPayload {
    pub fn from_statistics(agent_id: u32, round: u32, stats: &AgentStatistics) -> Self {
        Self {
            version: WIRE_VERSION,
            agent_id,
            round,
            features: stats.features() as u32,
            map_id: stats.map_id,
            count: stats.count as u64,
            info_matrix: row_major(&stats.info_matrix),
            info_vector: stats.info_vector.as_slice().to_vec(),
        }
    }

    /// Statistics as seen by the server; sync bookkeeping stays with the agent.
    pub fn to_statistics(&self) -> AgentStatistics {
        let d = self.features as usize;
        AgentStatistics {
            map_id: self.map_id,
            info_matrix: DMatrix::from_row_slice(d, d, &self.info_matrix),
            info_vector: DVector::from_row_slice(&self.info_vector),
            count: self.count as usize,
            round: self.round as usize,
            last_sync_logdet: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != WIRE_VERSION {
            return Err(Error::ProtocolViolation(format!("unsupported version {}", self.version)));
        }
        let d = self.features as usize;
        if d == 0 {
            return Err(Error::ProtocolViolation("zero features".into()));
        }
        check_block("info_matrix", &self.info_matrix, d * d)?;
        check_block("info_vector", &self.info_vector, d)?;
        check_symmetric("info_matrix", &self.info_matrix, d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.features as usize;
        let mut out = Vec::with_capacity(34 + 8 * (d * d + d));
        out.extend_from_slice(UPLOAD_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.agent_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.features.to_le_bytes());
        out.extend_from_slice(&self.map_id.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        put_floats(&mut out, &self.info_matrix);
        put_floats(&mut out, &self.info_vector);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        r.header(UPLOAD_MAGIC)?;
        let agent_id = r.u32()?;
        let round = r.u32()?;
        let features = r.u32()?;
        let map_id = r.u64()?;
        let count = r.u64()?;
        let d = features as usize;
        let info_matrix = r.floats(d.checked_mul(d).ok_or_else(|| Error::ProtocolViolation("size overflow".into()))?)?;
        let info_vector = r.floats(d)?;
        r.finish()?;
        let p = Self {
            version: WIRE_VERSION,
            agent_id,
            round,
            features,
            map_id,
            count,
            info_matrix,
            info_vector,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::ProtocolViolation(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

impl DownloadPayload {
    pub fn from_posterior(round: u32, post: &GlobalPosterior) -> Self {
        Self {
            version: WIRE_VERSION,
            round,
            features: post.mean.len() as u32,
            map_id: post.map_id,
            precision: row_major(&post.precision),
            mean: post.mean.as_slice().to_vec(),
        }
    }

    pub fn to_posterior(&self) -> Result<GlobalPosterior> {
        let d = self.features as usize;
        let precision = DMatrix::from_row_slice(d, d, &self.precision);
        let chol = cholesky_with_jitter(&precision)?.0;
        Ok(GlobalPosterior {
            map_id: self.map_id,
            precision,
            mean: DVector::from_row_slice(&self.mean),
            chol,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != WIRE_VERSION {
            return Err(Error::ProtocolViolation(format!("unsupported version {}", self.version)));
        }
        let d = self.features as usize;
        if d == 0 {
            return Err(Error::ProtocolViolation("zero features".into()));
        }
        check_block("precision", &self.precision, d * d)?;
        check_block("mean", &self.mean, d)?;
        check_symmetric("precision", &self.precision, d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.features as usize;
        let mut out = Vec::with_capacity(22 + 8 * (d * d + d));
        out.extend_from_slice(DOWNLOAD_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.features.to_le_bytes());
        out.extend_from_slice(&self.map_id.to_le_bytes());
        put_floats(&mut out, &self.precision);
        put_floats(&mut out, &self.mean);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        r.header(DOWNLOAD_MAGIC)?;
        let round = r.u32()?;
        let features = r.u32()?;
        let map_id = r.u64()?;
        let d = features as usize;
        let precision = r.floats(d.checked_mul(d).ok_or_else(|| Error::ProtocolViolation("size overflow".into()))?)?;
        let mean = r.floats(d)?;
        r.finish()?;
        let p = Self {
            version: WIRE_VERSION,
            round,
            features,
            map_id,
            precision,
            mean,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::ProtocolViolation(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// Schema check for an upload in either encoding (binary if it starts with the
/// magic, JSON otherwise). Anything beyond `(Λ, η, count, round)` and the
/// routing header is rejected.
pub fn validate_upload(bytes: &[u8]) -> Result<UploadPayload> {
    if bytes.starts_with(UPLOAD_MAGIC) {
        UploadPayload::from_bytes(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::ProtocolViolation("payload is not UTF-8 JSON".into()))?;
        UploadPayload::from_json(text)
    }
}

pub fn validate_download(bytes: &[u8]) -> Result<DownloadPayload> {
    if bytes.starts_with(DOWNLOAD_MAGIC) {
        DownloadPayload::from_bytes(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::ProtocolViolation("payload is not UTF-8 JSON".into()))?;
        DownloadPayload::from_json(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

/// One exchange, or one trigger check that did not fire (`triggered = false`,
/// no payload).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: usize,
    pub agent: usize,
    pub direction: Direction,
    pub bytes: usize,
    pub triggered: bool,
    #[serde(skip)]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageLog {
    records: Vec<MessageRecord>,
}

impl MessageLog {
    pub fn push(&mut self, record: MessageRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[MessageRecord] {
        &self.records
    }

    pub fn uploads(&self) -> impl Iterator<Item = &MessageRecord> {
        self.records
            .iter()
            .filter(|r| r.direction == Direction::Up && r.triggered)
    }

    pub fn downloads(&self) -> impl Iterator<Item = &MessageRecord> {
        self.records.iter().filter(|r| r.direction == Direction::Down)
    }

    pub fn uploads_after_round0(&self) -> usize {
        self.uploads().filter(|r| r.round > 0).count()
    }

    pub fn total_bytes(&self) -> usize {
        self.records.iter().map(|r| r.bytes).sum()
    }

    /// Run the schema validator over every payload.
    pub fn validate_all(&self) -> Result<()> {
        for r in self.records.iter().filter(|r| !r.payload.is_empty()) {
            match r.direction {
                Direction::Up => validate_upload(&r.payload).map(|_| ())?,
                Direction::Down => validate_download(&r.payload).map(|_| ())?,
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,agent,direction,bytes,triggered\n");
        for r in &self.records {
            let dir = match r.direction {
                Direction::Up => "up",
                Direction::Down => "down",
            };
            out.push_str(&format!("{},{},{},{},{}\n", r.round, r.agent, dir, r.bytes, r.triggered));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedConfig {
    pub agents: usize,
    /// Rounds including the initial round 0.
    pub rounds: usize,
    pub per_round_evals: usize,
    /// Log-det information gain that triggers an upload; `∞` never fires.
    pub threshold: f64,
    pub seed: u64,
    pub features: usize,
    /// SE lengthscale on the unit cube.
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
    pub prior_precision: f64,
    pub candidates: usize,
    pub record_timing: bool,
}

impl FederatedConfig {
    pub fn new(agents: usize, rounds: usize, per_round_evals: usize, threshold: f64, seed: u64) -> Self {
        Self {
            agents,
            rounds,
            per_round_evals,
            threshold,
            seed,
            features: 100,
            lengthscale: 0.2,
            signal_var: 1.0,
            noise_var: 1e-3,
            prior_precision: 1.0,
            candidates: 1024,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 agents, got {}", self.agents)));
        }
        if self.rounds == 0 || self.per_round_evals == 0 || self.candidates == 0 {
            return Err(Error::InvalidArgument("rounds, per-round evaluations and candidates must be ≥ 1".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::InvalidArgument(format!("threshold {} must be ≥ 0", self.threshold)));
        }
        if !(self.noise_var > 0.0) || !(self.prior_precision > 0.0) {
            return Err(Error::InvalidHyperparameter("noise variance and prior precision must be positive".into()));
        }
        Ok(())
    }

    /// The feature map every party derives from the round-0 broadcast seed.
    pub fn feature_map(&self, dim: usize) -> Result<RandomFeatureMap> {
        RandomFeatureMap::new(dim, self.features, self.lengthscale, self.signal_var, self.seed)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        json!({
            "mode": "federated",
            "agents": self.agents,
            "rounds": self.rounds,
            "per_round_evals": self.per_round_evals,
            "threshold": if self.threshold.is_finite() { json!(self.threshold) } else { json!("inf") },
            "features": self.features,
            "lengthscale": self.lengthscale,
            "signal_var": self.signal_var,
            "noise_var": self.noise_var,
            "prior_precision": self.prior_precision,
            "candidates": self.candidates,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FederatedOutcome {
    pub best_point: Vec<f64>,
    pub best_value: f64,
    pub trace: RunTrace,
    pub log: MessageLog,
    /// The server's aggregate after the last broadcast.
    pub global: GlobalPosterior,
    pub map: RandomFeatureMap,
}

struct Agent {
    stats: AgentStatistics,
    /// Statistics as of the last upload.
    uploaded: AgentStatistics,
    /// Last downloaded aggregate.
    global: Option<GlobalPosterior>,
}

impl Agent {
    /// Downloaded aggregate plus local data not yet uploaded.
    fn working_posterior(&self, prior_precision: f64) -> Result<GlobalPosterior> {
        let delta_p = &self.stats.info_matrix - &self.uploaded.info_matrix;
        let delta_e = &self.stats.info_vector - &self.uploaded.info_vector;
        match &self.global {
            Some(g) => GlobalPosterior::from_precision(g.map_id, &g.precision + delta_p, &(g.info_vector() + delta_e)),
            None => aggregate(std::slice::from_ref(&self.stats), prior_precision),
        }
    }
}

pub fn federated_bo_run(
    objective: &mut dyn Objective,
    config: &FederatedConfig,
) -> std::result::Result<FederatedOutcome, RunError> {
    federated_bo_run_observed(objective, config, &mut |_| {})
}

/// Round 0: every agent evaluates quasi-random points and uploads. Later
/// rounds: each evaluation is the Thompson-sample argmax over `candidates`
/// quasi-random points of the agent's working posterior; agents upload when
/// [`should_communicate`] fires and the server re-broadcasts after any upload.
pub fn federated_bo_run_observed(
    objective: &mut dyn Objective,
    config: &FederatedConfig,
    observer: &mut dyn FnMut(&TraceStep),
) -> std::result::Result<FederatedOutcome, RunError> {
    let mut trace = RunTrace::new(config.seed, config.snapshot());
    if let Err(e) = config.validate() {
        return Err(RunError::new(e, trace));
    }
    let bounds = objective.bounds().clone();
    let map = match config.feature_map(bounds.dim()) {
        Ok(m) => m,
        Err(e) => return Err(RunError::new(e, trace)),
    };
    let clock = StepClock::new(config.record_timing);
    let unit = Bounds::unit(bounds.dim());
    let empty = AgentStatistics::new(&map);
    let mut agents: Vec<Agent> = (0..config.agents)
        .map(|_| Agent {
            stats: empty.clone(),
            uploaded: empty.clone(),
            global: None,
        })
        .collect();
    // server state: latest statistics per agent
    let mut server: Vec<AgentStatistics> = vec![empty.clone(); config.agents];
    let mut log = MessageLog::default();
    let mut global: Option<GlobalPosterior> = None;
    let init = quasi_random_design(
        &unit,
        config.agents * config.per_round_evals,
        derive_seed(config.seed, STREAM_INIT, 0),
    );
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iter = 0usize;

    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(RunError::new(e, trace)),
            }
        };
    }

    for round in 0..config.rounds {
        for (q, agent) in agents.iter_mut().enumerate() {
            for k in 0..config.per_round_evals {
                let u = if round == 0 {
                    init[q * config.per_round_evals + k].clone()
                } else {
                    let post = bail!(agent.working_posterior(config.prior_precision));
                    let cands = quasi_random_design(&unit, config.candidates, derive_seed(config.seed, STREAM_AF, iter as u64));
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_THOMPSON, iter as u64));
                    let w = post.sample_weights(&mut rng);
                    let mut top: Option<(usize, f64)> = None;
                    for (i, c) in cands.iter().enumerate() {
                        let v = bail!(map.feature_map(c)).dot(&w);
                        if top.is_none_or(|(_, b)| v > b) {
                            top = Some((i, v));
                        }
                    }
                    cands[top.expect("candidates non-empty").0].clone()
                };
                let x = bounds.from_unit(&u);
                let y = bail!(objective.evaluate(&x, derive_seed(config.seed, STREAM_EVAL, iter as u64)));
                if !y.is_finite() {
                    bail!(Err(Error::Objective(format!("non-finite value {y} at {x:?}"))));
                }
                bail!(agent.stats.absorb(&bail!(map.feature_map(&u)), y, config.noise_var));
                if best.as_ref().is_none_or(|(_, b)| y > *b) {
                    best = Some((x.clone(), y));
                }
                let step = TraceStep {
                    iter,
                    point: x,
                    value: y,
                    incumbent: best.as_ref().expect("just set").1,
                    af: (round > 0).then_some(AcquisitionKind::Thompson),
                    elapsed_ms: clock.elapsed_ms(),
                    detail: StepDetail::Federated { agent: q, round },
                };
                observer(&step);
                trace.steps.push(step);
                iter += 1;
            }
        }

        let mut any_upload = false;
        for (q, agent) in agents.iter_mut().enumerate() {
            let fire = round == 0 || bail!(should_communicate(&agent.stats, config.threshold, config.prior_precision));
            if !fire {
                log.push(MessageRecord {
                    round,
                    agent: q,
                    direction: Direction::Up,
                    bytes: 0,
                    triggered: false,
                    payload: Vec::new(),
                });
                continue;
            }
            let bytes = UploadPayload::from_statistics(q as u32, round as u32, &agent.stats).to_bytes();
            let received = bail!(validate_upload(&bytes));
            server[received.agent_id as usize] = received.to_statistics();
            bail!(agent.stats.mark_synced(round, config.prior_precision));
            agent.uploaded = agent.stats.clone();
            log.push(MessageRecord {
                round,
                agent: q,
                direction: Direction::Up,
                bytes: bytes.len(),
                triggered: true,
                payload: bytes,
            });
            any_upload = true;
        }
        if any_upload {
            let post = bail!(aggregate(&server, config.prior_precision));
            let bytes = DownloadPayload::from_posterior(round as u32, &post).to_bytes();
            for (q, agent) in agents.iter_mut().enumerate() {
                let received = bail!(validate_download(&bytes));
                agent.global = Some(bail!(received.to_posterior()));
                // local data since the last upload stays in the working copy
                log.push(MessageRecord {
                    round,
                    agent: q,
                    direction: Direction::Down,
                    bytes: bytes.len(),
                    triggered: true,
                    payload: bytes.clone(),
                });
            }
            global = Some(post);
        }
    }
    let (best_point, best_value) = best.expect("at least one evaluation");
    Ok(FederatedOutcome {
        best_point,
        best_value,
        trace,
        log,
        global: global.expect("round 0 always uploads"),
        map,
    })
}
