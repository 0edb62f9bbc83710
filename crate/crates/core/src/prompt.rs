//! Black-box instruction search through a low-dimensional soft prompt.
//!
//! Each evaluation maps a soft prompt `φ ∈ [−1, 1]^{d′}` through a random
//! projection `ξ = Rφ`, asks an instruction generator for an instruction
//! `θ = g(ξ, E)`, runs the black-box model `f(θ, x_t)` on every validation input
//! and scores the outputs against the ground truth. The surrogate over `φ` uses
//! the instruction-coupled kernel from [`crate::subspace`].

use std::collections::HashMap;

use serde_json::json;

use crate::acquisition::{maximize_acquisition, AcquisitionKind, AcquisitionSpec, CandidateSearch};
use crate::bo::{default_init_count, RunError, StepClock, STREAM_AF, STREAM_INIT};
use crate::error::{Error, Result};
use crate::gp::{fit_gp, EvaluationSet, GpModel};
use crate::kernel::{KernelFamily, KernelSpec};
use crate::space::{derive_seed, quasi_random_design, Bounds};
use crate::subspace::{
    project, sample_projection, score_correlation_matrix, similarity, EntryDistribution,
    InstructionKernelState, ProjectionMatrix, SimilarityKind,
};
use crate::surrogate::{normalize, Scaled};
use crate::trace::{RunTrace, StepDetail, TraceStep};

pub type Tokens = Vec<String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandleKind {
    Simulated,
    Remote,
}

/// In-context exemplars `{(x_s, y_s)}` handed to the instruction generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    exemplars: Vec<(Tokens, Tokens)>,
}

impl ExemplarSet {
    pub fn new(exemplars: Vec<(Tokens, Tokens)>) -> Result<Self> {
        if exemplars.is_empty() {
            return Err(Error::EmptyInput("exemplar set"));
        }
        for (i, (x, _)) in exemplars.iter().enumerate() {
            if exemplars[..i].iter().any(|(y, _)| y == x) {
                return Err(Error::InvalidArgument(format!("duplicate exemplar input {:?}", x.join(" "))));
            }
        }
        Ok(Self { exemplars })
    }

    pub fn exemplars(&self) -> &[(Tokens, Tokens)] {
        &self.exemplars
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

/// Held-out `(x_t, y_t)` pairs and the score used to compare outputs with `y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pairs: Vec<(Tokens, Tokens)>,
    score_kind: SimilarityKind,
}

impl ValidationSet {
    pub fn new(pairs: Vec<(Tokens, Tokens)>, score_kind: SimilarityKind) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("validation set"));
        }
        Ok(Self { pairs, score_kind })
    }

    pub fn pairs(&self) -> &[(Tokens, Tokens)] {
        &self.pairs
    }

    pub fn score_kind(&self) -> SimilarityKind {
        self.score_kind
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `g(ξ, E)`: turns a soft prompt into a human-readable instruction.
pub trait InstructionGenerator {
    fn generate(&mut self, soft_prompt: &[f64], exemplars: &ExemplarSet) -> Result<Tokens>;

    fn kind(&self) -> HandleKind;
}

/// `f(θ, x)`: the black-box model answering input `x` under instruction `θ`.
pub trait Evaluator {
    fn answer(&mut self, instruction: &[String], input: &[String]) -> Result<Tokens>;

    fn kind(&self) -> HandleKind;
}

impl<E: Evaluator + ?Sized> Evaluator for &mut E {
    fn answer(&mut self, instruction: &[String], input: &[String]) -> Result<Tokens> {
        (**self).answer(instruction, input)
    }

    fn kind(&self) -> HandleKind {
        (**self).kind()
    }
}

impl<G: InstructionGenerator + ?Sized> InstructionGenerator for &mut G {
    fn generate(&mut self, soft_prompt: &[f64], exemplars: &ExemplarSet) -> Result<Tokens> {
        (**self).generate(soft_prompt, exemplars)
    }

    fn kind(&self) -> HandleKind {
        (**self).kind()
    }
}

/// Memoizes answers per `(instruction, input)` and counts calls that reach the
/// wrapped evaluator.
#[derive(Debug)]
pub struct CachedEvaluator<E> {
    inner: E,
    cache: HashMap<(Tokens, Tokens), Tokens>,
    calls: usize,
}

impl<E: Evaluator> CachedEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
            calls: 0,
        }
    }

    /// Calls forwarded to the wrapped evaluator so far.
    pub fn inner_calls(&self) -> usize {
        self.calls
    }

    pub fn into_inner(self) -> E {
        self.inner
    }

    /// Score `instruction` `times` times, bypassing the cache.
    pub fn fresh_scores(&mut self, instruction: &[String], val: &ValidationSet, times: usize) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(times);
        for _ in 0..times {
            self.calls += val.len();
            let outputs = answer_all(&mut self.inner, instruction, val)?;
            scores.push(score_outputs(&outputs, val));
        }
        Ok(scores)
    }
}

impl<E: Evaluator> Evaluator for CachedEvaluator<E> {
    fn answer(&mut self, instruction: &[String], input: &[String]) -> Result<Tokens> {
        let key = (instruction.to_vec(), input.to_vec());
        if let Some(out) = self.cache.get(&key) {
            return Ok(out.clone());
        }
        self.calls += 1;
        let out = self.inner.answer(instruction, input)?;
        self.cache.insert(key, out.clone());
        Ok(out)
    }

    fn kind(&self) -> HandleKind {
        self.inner.kind()
    }
}

/// Outputs of `f(θ, x_t)` for every validation input, in order.
pub fn answer_all(f: &mut dyn Evaluator, instruction: &[String], val: &ValidationSet) -> Result<Vec<Tokens>> {
    let mut outputs = Vec::with_capacity(val.len());
    for (completed, (x, _)) in val.pairs().iter().enumerate() {
        match f.answer(instruction, x) {
            Ok(out) => outputs.push(out),
            Err(Error::Evaluator { message, retriable, .. }) => {
                return Err(Error::Evaluator {
                    message,
                    retriable,
                    completed,
                })
            }
            Err(e) => {
                return Err(Error::Evaluator {
                    message: e.to_string(),
                    retriable: false,
                    completed,
                })
            }
        }
    }
    Ok(outputs)
}

/// Mean score of already computed outputs against the validation targets.
pub fn score_outputs(outputs: &[Tokens], val: &ValidationSet) -> f64 {
    // sorted before summing so the mean does not depend on the order of val
    let mut sims: Vec<f64> = outputs
        .iter()
        .zip(val.pairs())
        .map(|(out, (_, y))| similarity(val.score_kind(), out, y))
        .collect();
    sims.sort_by(f64::total_cmp);
    sims.iter().sum::<f64>() / val.len() as f64
}

/// `r(θ) = mean_t s(f(θ, x_t), y_t)`, in `[0, 1]`.
pub fn evaluate_prompt(f: &mut dyn Evaluator, instruction: &[String], val: &ValidationSet) -> Result<f64> {
    let outputs = answer_all(f, instruction, val)?;
    Ok(score_outputs(&outputs, val))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructZeroConfig {
    /// Soft-prompt dimension fed to the generator.
    pub d: usize,
    /// Searched dimension.
    pub d_prime: usize,
    /// Total evaluations, initial design included.
    pub budget: usize,
    pub seed: u64,
    pub projection: EntryDistribution,
    /// Defaults to `max(4, 2d′)`, capped at `budget`.
    pub init_count: Option<usize>,
    pub base_family: KernelFamily,
    /// Candidate lengthscales of the base kernel over `φ`, selected by evidence.
    pub lengthscales: Vec<f64>,
    /// Weight of the base-kernel residual added to the Nyström kernel.
    pub residual_weight: f64,
    /// Extra scorings of the first instruction used to estimate `σ_ε²` when
    /// the evaluator is remote. Simulated evaluators are noise-free.
    pub noise_repeats: usize,
    pub search: CandidateSearch,
    pub record_timing: bool,
}

impl InstructZeroConfig {
    pub fn new(d: usize, d_prime: usize, budget: usize, seed: u64) -> Self {
        Self {
            d,
            d_prime,
            budget,
            seed,
            projection: EntryDistribution::Normal,
            init_count: None,
            base_family: KernelFamily::Matern52,
            lengthscales: vec![0.5, 1.0, 2.0, 4.0],
            residual_weight: 1.0,
            noise_repeats: 2,
            search: CandidateSearch::default(),
            record_timing: false,
        }
    }

    fn snapshot(&self) -> serde_json::Value {
        json!({
            "mode": "instructzero",
            "d": self.d,
            "d_prime": self.d_prime,
            "budget": self.budget,
            "projection": self.projection,
            "kernel": self.base_family,
            "lengthscales": self.lengthscales,
            "residual_weight": self.residual_weight,
            "noise_repeats": self.noise_repeats,
        })
    }
}

/// One evaluated soft prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub soft_prompt: Vec<f64>,
    pub instruction: Tokens,
    pub outputs: Vec<Tokens>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct InstructZeroOutcome {
    pub best_instruction: Tokens,
    pub best_score: f64,
    pub best_soft_prompt: Vec<f64>,
    pub trace: RunTrace,
    pub records: Vec<PromptRecord>,
    pub projection: ProjectionMatrix,
    /// Kernel state over all evaluated prompts.
    pub kernel_state: InstructionKernelState,
    /// Calls that reached the evaluator (cache misses and noise repeats).
    pub evaluator_calls: usize,
    /// Score noise used by the surrogate: 0 for simulated evaluators, the
    /// sample variance of repeated scorings for remote ones.
    pub noise_var: f64,
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Build the instruction-coupled kernel state over `records`.
pub fn kernel_state_for(
    records: &[PromptRecord],
    base: KernelSpec,
    kind: SimilarityKind,
    residual_weight: f64,
) -> Result<InstructionKernelState> {
    let outputs: Vec<Vec<Tokens>> = records.iter().map(|r| r.outputs.clone()).collect();
    let scores = score_correlation_matrix(&outputs, kind)?;
    let prompts = records.iter().map(|r| r.soft_prompt.clone()).collect();
    Ok(InstructionKernelState::new(base, prompts, scores)?.with_residual(residual_weight))
}

fn fit_instruction_surrogate(
    records: &[PromptRecord],
    config: &InstructZeroConfig,
    kind: SimilarityKind,
    noise_var: f64,
) -> Result<Scaled<GpModel<InstructionKernelState>>> {
    let points: Vec<Vec<f64>> = records.iter().map(|r| r.soft_prompt.clone()).collect();
    let values: Vec<f64> = records.iter().map(|r| r.score).collect();
    let data = EvaluationSet::from_records(points, values, noise_var)?;
    let (normalized, scaling) = normalize(&data, None)?;
    let mut best: Option<(f64, GpModel<InstructionKernelState>)> = None;
    let mut last_err = None;
    for &l in &config.lengthscales {
        let base = KernelSpec::isotropic(config.base_family, config.d_prime, l, 1.0)?;
        let fitted = kernel_state_for(records, base, kind, config.residual_weight)
            .and_then(|state| fit_gp(&normalized, state))
            .and_then(|m| m.log_marginal_likelihood().map(|lml| (lml, m)));
        match fitted {
            Ok((lml, m)) if lml.is_finite() => {
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, m));
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let (_, model) = best.ok_or_else(|| last_err.unwrap_or(Error::FactorizationFailed { max_jitter: 0.0 }))?;
    Ok(Scaled::new(model, None, scaling))
}

/// Bayesian optimization over soft prompts with the instruction-coupled kernel.
pub fn instructzero_run(
    generator: &mut dyn InstructionGenerator,
    evaluator: &mut dyn Evaluator,
    val: &ValidationSet,
    exemplars: &ExemplarSet,
    config: &InstructZeroConfig,
) -> std::result::Result<InstructZeroOutcome, RunError> {
    instructzero_run_observed(generator, evaluator, val, exemplars, config, &mut |_| {})
}

pub fn instructzero_run_observed(
    generator: &mut dyn InstructionGenerator,
    evaluator: &mut dyn Evaluator,
    val: &ValidationSet,
    exemplars: &ExemplarSet,
    config: &InstructZeroConfig,
    observer: &mut dyn FnMut(&TraceStep),
) -> std::result::Result<InstructZeroOutcome, RunError> {
    let mut trace = RunTrace::new(config.seed, config.snapshot());
    if config.budget == 0 {
        return Err(RunError::new(Error::InvalidArgument("budget must be at least 1".into()), trace));
    }
    if config.lengthscales.is_empty() {
        return Err(RunError::new(Error::EmptyInput("base lengthscale grid"), trace));
    }
    let projection = match run_projection(config) {
        Ok(p) => p,
        Err(e) => return Err(RunError::new(e, trace)),
    };
    let bounds = Bounds::uniform(config.d_prime, -1.0, 1.0);
    let init_count = config
        .init_count
        .unwrap_or_else(|| default_init_count(config.d_prime))
        .clamp(1, config.budget);
    let init = quasi_random_design(&bounds, init_count, derive_seed(config.seed, STREAM_INIT, 0));
    let mut cached = CachedEvaluator::new(evaluator);
    let clock = StepClock::new(config.record_timing);
    let mut records: Vec<PromptRecord> = Vec::with_capacity(config.budget);
    let mut incumbent = f64::NEG_INFINITY;
    let mut noise_var = 0.0;

    for iter in 0..config.budget {
        let (phi, af) = if iter < init.len() {
            (init[iter].clone(), None)
        } else {
            let proposal = fit_instruction_surrogate(&records, config, val.score_kind(), noise_var).and_then(|model| {
                let spec = AcquisitionSpec::expected_improvement(incumbent).with_search(config.search.clone());
                maximize_acquisition(&spec, &model, &bounds, derive_seed(config.seed, STREAM_AF, iter as u64))
            });
            match proposal {
                Ok(p) => (p, Some(AcquisitionKind::ExpectedImprovement)),
                Err(e) => return Err(RunError::new(e, trace)),
            }
        };
        let evaluated = project(&projection, &phi)
            .and_then(|xi| generator.generate(&xi, exemplars))
            .and_then(|instruction| {
                let outputs = answer_all(&mut cached, &instruction, val)?;
                Ok((instruction, outputs))
            });
        let (instruction, outputs) = match evaluated {
            Ok(v) => v,
            Err(e) => return Err(RunError::new(e, trace)),
        };
        let score = score_outputs(&outputs, val);
        if iter == 0 && cached.kind() == HandleKind::Remote && config.noise_repeats > 0 {
            match cached.fresh_scores(&instruction, val, config.noise_repeats) {
                Ok(mut repeats) => {
                    repeats.push(score);
                    noise_var = sample_variance(&repeats);
                }
                Err(e) => return Err(RunError::new(e, trace)),
            }
        }
        incumbent = incumbent.max(score);
        let step = TraceStep {
            iter,
            point: phi.clone(),
            value: score,
            incumbent,
            af,
            elapsed_ms: clock.elapsed_ms(),
            detail: StepDetail::Instruction {
                instruction: instruction.join(" "),
            },
        };
        observer(&step);
        trace.steps.push(step);
        records.push(PromptRecord {
            soft_prompt: phi,
            instruction,
            outputs,
            score,
        });
    }

    let best = records
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.score > records[b].score { i } else { b });
    let base = KernelSpec::isotropic(config.base_family, config.d_prime, config.lengthscales[0], 1.0)
        .map_err(|e| RunError::new(e, trace.clone()))?;
    let kernel_state = kernel_state_for(&records, base, val.score_kind(), config.residual_weight)
        .map_err(|e| RunError::new(e, trace.clone()))?;
    Ok(InstructZeroOutcome {
        best_instruction: records[best].instruction.clone(),
        best_score: records[best].score,
        best_soft_prompt: records[best].soft_prompt.clone(),
        trace,
        evaluator_calls: cached.inner_calls(),
        noise_var,
        records,
        projection,
        kernel_state,
    })
}

/// 64-bit FNV-1a, used for stable pseudo-random choices in the simulated handles.
fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

const SLOT_WORDS: [[&str; 4]; 4] = [
    ["summarize", "copy", "sort", "reverse"],
    ["words", "letters", "lines", "numbers"],
    ["carefully", "quickly", "briefly", "exactly"],
    ["please", "now", "again", "today"],
];

/// Simulated white-box generator: splits `ξ` into one block per template slot
/// and picks each slot's word by bucketing the block's normalized sum at the
/// quartiles of `N(0, scale²)`.
#[derive(Debug, Clone)]
pub struct SlotGenerator {
    pub scale: f64,
}

impl SlotGenerator {
    pub const SLOTS: usize = 4;

    /// Bucket index per slot for a soft prompt `ξ`.
    pub fn buckets(&self, xi: &[f64]) -> [usize; Self::SLOTS] {
        const Q: f64 = 0.674_489_750_196_081_7;
        let block = (xi.len() / Self::SLOTS).max(1);
        let mut out = [0; Self::SLOTS];
        for (s, slot) in out.iter_mut().enumerate() {
            let lo = (s * block).min(xi.len());
            let hi = if s + 1 == Self::SLOTS { xi.len() } else { ((s + 1) * block).min(xi.len()) };
            let chunk = &xi[lo..hi];
            let v = if chunk.is_empty() {
                0.0
            } else {
                chunk.iter().sum::<f64>() / (chunk.len() as f64).sqrt()
            };
            let t = v / self.scale;
            *slot = if t < -Q {
                0
            } else if t < 0.0 {
                1
            } else if t < Q {
                2
            } else {
                3
            };
        }
        out
    }
}

impl InstructionGenerator for SlotGenerator {
    fn generate(&mut self, soft_prompt: &[f64], _exemplars: &ExemplarSet) -> Result<Tokens> {
        let b = self.buckets(soft_prompt);
        Ok(vec![
            SLOT_WORDS[0][b[0]].to_owned(),
            "the".to_owned(),
            SLOT_WORDS[1][b[1]].to_owned(),
            SLOT_WORDS[2][b[2]].to_owned(),
            SLOT_WORDS[3][b[3]].to_owned(),
        ])
    }

    fn kind(&self) -> HandleKind {
        HandleKind::Simulated
    }
}

/// One planted key: a slot vocabulary in bucket order and the key's index.
#[derive(Debug, Clone)]
pub struct KeySlot {
    pub words: Vec<String>,
    pub key: usize,
}

/// Simulated black-box model: the target is the reversed input.
///
/// A key earns credit `1 − |b − key| / (len − 1)` where `b` is the first word of
/// its slot vocabulary found in the instruction, zero if none is. With mean
/// credit `c` the first `round(L · c)` output tokens are right and the rest are
/// corrupted in an instruction-dependent way, so the answer is exact iff every
/// key word appears.
#[derive(Debug, Clone)]
pub struct KeywordEvaluator {
    pub keys: Vec<KeySlot>,
}

impl KeywordEvaluator {
    pub fn credit(&self, instruction: &[String]) -> f64 {
        if self.keys.is_empty() {
            return 1.0;
        }
        let total: f64 = self
            .keys
            .iter()
            .map(|slot| {
                let far = (slot.words.len().max(2) - 1) as f64;
                slot.words
                    .iter()
                    .position(|w| instruction.contains(w))
                    .map_or(0.0, |b| 1.0 - b.abs_diff(slot.key) as f64 / far)
            })
            .sum();
        total / self.keys.len() as f64
    }
}

impl Evaluator for KeywordEvaluator {
    fn answer(&mut self, instruction: &[String], input: &[String]) -> Result<Tokens> {
        let target: Vec<&String> = input.iter().rev().collect();
        let correct = (target.len() as f64 * self.credit(instruction)).round() as usize;
        let tag = instruction.join(" ");
        Ok(target
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                if i < correct {
                    (*tok).clone()
                } else {
                    format!("~{}{}", tok, fnv1a(&[&tag, tok]) % 5)
                }
            })
            .collect())
    }

    fn kind(&self) -> HandleKind {
        HandleKind::Simulated
    }
}

/// Projection used by [`instructzero_run`] for `config`.
pub fn run_projection(config: &InstructZeroConfig) -> Result<ProjectionMatrix> {
    sample_projection(config.d, config.d_prime, config.projection, derive_seed(config.seed, 20, 0))
}

/// A closed-loop task with a planted optimal instruction. The optimum is planted
/// by drawing a soft prompt `φ*` in the box and taking the slot-0 and slot-1
/// words of `g(Rφ*)` as keys, with `R` the projection the run will use, so it
/// is reachable by construction. Score 1.0 is attained by any instruction
/// containing both key words.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub generator: SlotGenerator,
    pub evaluator: KeywordEvaluator,
    pub validation: ValidationSet,
    pub exemplars: ExemplarSet,
    pub planted_soft_prompt: Vec<f64>,
    pub oracle_instruction: Tokens,
}

impl PlantedTask {
    pub fn new(config: &InstructZeroConfig) -> Result<Self> {
        const NOUNS: [&str; 12] = [
            "filter", "signal", "noise", "phase", "sample", "window", "pole", "zero", "gain", "delay", "energy",
            "spectrum",
        ];
        let seed = config.seed;
        let pick = |i: u64, j: u64| NOUNS[(fnv1a(&[&seed.to_string(), &i.to_string(), &j.to_string()]) % 12) as usize];
        let make = |offset: u64, count: u64| -> Vec<(Tokens, Tokens)> {
            (0..count)
                .map(|i| {
                    let x: Tokens = (0..6).map(|j| pick(offset + i, j).to_owned()).collect();
                    let y: Tokens = x.iter().rev().cloned().collect();
                    (x, y)
                })
                .collect()
        };
        let mut ex = make(1000, 3);
        ex.dedup_by(|a, b| a.0 == b.0);
        let exemplars = ExemplarSet::new(ex)?;
        let mut generator = SlotGenerator {
            scale: (config.d_prime as f64 / (3.0 * config.d as f64)).sqrt(),
        };
        let box_ = Bounds::uniform(config.d_prime, -1.0, 1.0);
        let planted = crate::space::uniform_design(&box_, 1, derive_seed(seed, 30, 0)).remove(0);
        let xi = project(&run_projection(config)?, &planted)?;
        let buckets = generator.buckets(&xi);
        let oracle_instruction = generator.generate(&xi, &exemplars)?;
        let keys = (0..2)
            .map(|s| KeySlot {
                words: SLOT_WORDS[s].iter().map(|w| w.to_string()).collect(),
                key: buckets[s],
            })
            .collect();
        Ok(Self {
            generator,
            evaluator: KeywordEvaluator { keys },
            validation: ValidationSet::new(make(0, 5), SimilarityKind::TokenF1)?,
            exemplars,
            planted_soft_prompt: planted,
            oracle_instruction,
        })
    }
}
