//! Run configuration: a TOML file (or JSON, detected by a leading `{`),
//! validated in full before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use querykernel_core::acquisition::AcquisitionKind;
use querykernel_core::subspace::{EntryDistribution, SimilarityKind};
use querykernel_core::KernelFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Bo,
    Instructzero,
    Mobo,
    Preferential,
    Federated,
    Audit,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Bo => "bo",
            Mode::Instructzero => "instructzero",
            Mode::Mobo => "mobo",
            Mode::Preferential => "preferential",
            Mode::Federated => "federated",
            Mode::Audit => "audit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub record_timing: bool,
    /// Expose the run through the HTTP service while it executes.
    #[serde(default)]
    pub serve: bool,
    #[serde(default = "default_port")]
    pub port: u16,
    pub objective: Option<ObjectiveConfig>,
    pub bo: Option<BoSection>,
    pub mobo: Option<MoboSection>,
    pub preferential: Option<PreferentialSection>,
    pub federated: Option<FederatedSection>,
    pub instructzero: Option<InstructZeroSection>,
    pub audit: Option<AuditSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_port() -> u16 {
    8750
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveName {
    Branin,
    Sphere1d,
    NoisyQuadratic,
    TwoBowls,
    LinearTradeoff,
}

impl ObjectiveName {
    pub fn is_vector(self) -> bool {
        matches!(self, ObjectiveName::TwoBowls | ObjectiveName::LinearTradeoff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub name: ObjectiveName,
    /// Dimension, `noisy_quadratic` only.
    pub dim: Option<usize>,
    #[serde(default)]
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoSection {
    /// Acquisition-driven evaluations after the initial design.
    pub budget: usize,
    pub init_count: Option<usize>,
    #[serde(default = "default_af")]
    pub acquisition: AcquisitionKind,
    pub beta: Option<f64>,
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    #[serde(default)]
    pub noise_var: f64,
}

fn default_af() -> AcquisitionKind {
    AcquisitionKind::ExpectedImprovement
}

fn default_kernel() -> KernelFamily {
    KernelFamily::Matern52
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoboSection {
    /// Total evaluations, initial design included.
    pub budget: usize,
    pub init_count: Option<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: KernelFamily,
    pub weight_bounds: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    /// Probit judgments from `u(θ) = −‖θ − optimum‖²`.
    Simulated,
    /// Judgments posted to the HTTP service.
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferentialSection {
    pub duel_budget: usize,
    pub bounds: Vec<(f64, f64)>,
    #[serde(default = "default_oracle")]
    pub oracle: OracleChoice,
    pub optimum: Option<Vec<f64>>,
    #[serde(default = "default_sigma_noise")]
    pub sigma_noise: f64,
    pub sigma_p: Option<f64>,
    pub lengthscale: Option<f64>,
    pub beta: Option<f64>,
    pub bracket: Option<f64>,
    /// Seconds to wait for an interactive judgment; absent waits forever.
    pub timeout_s: Option<f64>,
}

fn default_oracle() -> OracleChoice {
    OracleChoice::Simulated
}

fn default_sigma_noise() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedSection {
    pub agents: usize,
    pub rounds: usize,
    pub per_round_evals: usize,
    /// Number, or `inf` / `"inf"` to never trigger.
    #[serde(deserialize_with = "threshold")]
    pub threshold: f64,
    pub features: Option<usize>,
    pub lengthscale: Option<f64>,
    pub noise_var: Option<f64>,
    pub prior_precision: Option<f64>,
    pub candidates: Option<usize>,
}

fn threshold<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum T {
        Num(f64),
        Text(String),
    }
    match T::deserialize(d)? {
        T::Num(v) => Ok(v),
        T::Text(s) if matches!(s.as_str(), "inf" | "infinity" | "never") => Ok(f64::INFINITY),
        T::Text(s) => Err(serde::de::Error::custom(format!("threshold must be a number or \"inf\", got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Simulated task with a planted optimal instruction.
    Planted,
    /// Remote generator and evaluator over HTTP.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub evaluator_url: String,
    pub generator_url: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Minimum spacing between calls, in calls per second.
    pub rate_limit: Option<f64>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructZeroSection {
    #[serde(default = "default_task")]
    pub task: TaskKind,
    pub d: usize,
    pub d_prime: usize,
    /// Total evaluations, initial design included.
    pub budget: usize,
    pub init_count: Option<usize>,
    pub projection: Option<EntryDistribution>,
    pub lengthscales: Option<Vec<f64>>,
    pub residual_weight: Option<f64>,
    pub noise_repeats: Option<usize>,
    pub similarity: Option<SimilarityKind>,
    pub validation: Option<Vec<Example>>,
    pub exemplars: Option<Vec<Example>>,
    pub remote: Option<RemoteSection>,
}

fn default_task() -> TaskKind {
    TaskKind::Planted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    pub csv: PathBuf,
}

/// A rejected config, located in the source text.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}:{line}:{column}: {message}", path.display())]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
    (line, column)
}

fn is_json(text: &str) -> bool {
    text.trim_start().starts_with('{')
}

/// Byte offset of `key` in the section `section` (top level if `None`).
/// Used to place semantic errors, which serde cannot locate.
fn locate(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let json = is_json(text);
    let mut offset = 0;
    let mut in_section = section.is_none();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        let indent = line.len() - trimmed.len();
        if json {
            if let Some(sec) = section {
                if trimmed.starts_with(&format!("\"{sec}\"")) {
                    in_section = true;
                }
            }
            if in_section && trimmed.starts_with(&format!("\"{key}\"")) {
                return Some(offset + indent);
            }
        } else {
            if trimmed.starts_with('[') {
                let name = trimmed.trim_start_matches('[').split(']').next().unwrap_or("").trim();
                in_section = section == Some(name) || section.is_some_and(|s| name.starts_with(&format!("{s}.")));
                if section.is_none() {
                    in_section = false;
                }
                if in_section && key.is_empty() {
                    return Some(offset + indent);
                }
            } else if in_section {
                let name = trimmed.split('=').next().unwrap_or("").trim();
                if name == key {
                    return Some(offset + indent);
                }
            }
        }
        offset += line.len();
    }
    None
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: 0,
            column: 0,
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse(&text, path)
    }

    /// Parse and validate. `path` only labels messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let err = |offset: Option<usize>, message: String| {
            let (line, column) = offset.map_or((1, 1), |o| line_col(text, o));
            ConfigError {
                path: path.to_path_buf(),
                line,
                column,
                message,
            }
        };
        let config: RunConfig = if is_json(text) {
            serde_json::from_str(text).map_err(|e| ConfigError {
                path: path.to_path_buf(),
                line: e.line(),
                column: e.column(),
                message: e.to_string().split(" at line ").next().unwrap_or_default().to_owned(),
            })?
        } else {
            toml::from_str(text).map_err(|e| err(e.span().map(|s| s.start), e.message().to_owned()))?
        };
        config
            .validate()
            .map_err(|(section, key, message)| err(locate(text, section, key).or_else(|| locate(text, section, "")), message))?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), (Option<&'static str>, &'static str, String)> {
        let present: [(&'static str, bool); 6] = [
            ("bo", self.bo.is_some()),
            ("mobo", self.mobo.is_some()),
            ("preferential", self.preferential.is_some()),
            ("federated", self.federated.is_some()),
            ("instructzero", self.instructzero.is_some()),
            ("audit", self.audit.is_some()),
        ];
        let mode = self.mode.name();
        for (name, there) in present {
            if there && name != mode {
                return Err((Some(name), "", format!("section `{name}` does not apply to mode `{mode}`")));
            }
        }
        let top = |key: &'static str, msg: String| Err((None, key, msg));
        let sec = |s: &'static str, key: &'static str, msg: String| Err((Some(s), key, msg));
        let needs_objective = matches!(self.mode, Mode::Bo | Mode::Mobo | Mode::Federated);
        match (&self.objective, needs_objective) {
            (None, true) => return top("mode", format!("mode `{mode}` needs an `objective` section")),
            (Some(_), false) => return sec("objective", "", format!("mode `{mode}` takes no `objective` section")),
            _ => {}
        }
        if let Some(o) = &self.objective {
            if o.name.is_vector() != (self.mode == Mode::Mobo) {
                let kind = if self.mode == Mode::Mobo { "a multi-objective" } else { "a scalar" };
                return sec("objective", "name", format!("mode `{mode}` needs {kind} objective"));
            }
            match (o.name, o.dim) {
                (ObjectiveName::NoisyQuadratic, None | Some(0)) => {
                    return sec("objective", "dim", "noisy_quadratic needs `dim` ≥ 1".into())
                }
                (ObjectiveName::NoisyQuadratic, _) => {}
                (_, Some(_)) => return sec("objective", "dim", "`dim` applies to noisy_quadratic only".into()),
                _ => {}
            }
            if !(o.noise_std >= 0.0 && o.noise_std.is_finite()) {
                return sec("objective", "noise_std", "noise_std must be finite and ≥ 0".into());
            }
            if o.noise_std > 0.0 && o.name.is_vector() {
                return sec("objective", "noise_std", "multi-objective test problems are noise-free".into());
            }
        }
        if self.serve && self.port == 0 {
            return top("port", "port must be non-zero when serve = true".into());
        }
        match self.mode {
            Mode::Bo => {
                let b = self.bo.as_ref().ok_or((None, "mode", "mode `bo` needs a `bo` section".to_owned()))?;
                if b.init_count == Some(0) {
                    return sec("bo", "init_count", "init_count must be ≥ 1".into());
                }
                if let Some(beta) = b.beta {
                    if !(beta > 0.0 && beta.is_finite()) {
                        return sec("bo", "beta", "beta must be positive".into());
                    }
                }
                if !(b.noise_var >= 0.0 && b.noise_var.is_finite()) {
                    return sec("bo", "noise_var", "noise_var must be finite and ≥ 0".into());
                }
            }
            Mode::Mobo => {
                let m = self.mobo.as_ref().ok_or((None, "mode", "mode `mobo` needs a `mobo` section".to_owned()))?;
                if m.budget == 0 {
                    return sec("mobo", "budget", "budget must be ≥ 1".into());
                }
                if m.init_count == Some(0) {
                    return sec("mobo", "init_count", "init_count must be ≥ 1".into());
                }
                if let Some(wb) = &m.weight_bounds {
                    if wb.len() != 2 {
                        return sec("mobo", "weight_bounds", format!("need 2 weight intervals, got {}", wb.len()));
                    }
                }
            }
            Mode::Preferential => {
                let p = self
                    .preferential
                    .as_ref()
                    .ok_or((None, "mode", "mode `preferential` needs a `preferential` section".to_owned()))?;
                if p.duel_budget == 0 {
                    return sec("preferential", "duel_budget", "duel_budget must be ≥ 1".into());
                }
                if p.bounds.is_empty() || p.bounds.iter().any(|&(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
                    return sec("preferential", "bounds", "bounds must be non-empty finite intervals with lo < hi".into());
                }
                match (p.oracle, &p.optimum) {
                    (OracleChoice::Simulated, None) => {
                        return sec("preferential", "oracle", "a simulated oracle needs `optimum`".into())
                    }
                    (OracleChoice::Simulated, Some(o)) if o.len() != p.bounds.len() => {
                        return sec(
                            "preferential",
                            "optimum",
                            format!("optimum has {} coordinates, bounds have {}", o.len(), p.bounds.len()),
                        )
                    }
                    (OracleChoice::Interactive, _) if !self.serve => {
                        return sec("preferential", "oracle", "an interactive oracle needs serve = true".into())
                    }
                    (OracleChoice::Interactive, Some(_)) => {
                        return sec("preferential", "optimum", "`optimum` applies to the simulated oracle only".into())
                    }
                    _ => {}
                }
                if !(p.sigma_noise >= 0.0 && p.sigma_noise.is_finite()) {
                    return sec("preferential", "sigma_noise", "sigma_noise must be finite and ≥ 0".into());
                }
                for (key, v) in [("sigma_p", p.sigma_p), ("lengthscale", p.lengthscale), ("beta", p.beta)] {
                    if let Some(v) = v {
                        if !(v > 0.0 && v.is_finite()) {
                            return sec("preferential", key, format!("{key} must be positive"));
                        }
                    }
                }
                if let Some(b) = p.bracket {
                    if !(0.0..=1.0).contains(&b) {
                        return sec("preferential", "bracket", "bracket must lie in [0, 1]".into());
                    }
                }
                if let Some(t) = p.timeout_s {
                    if !(t > 0.0 && t.is_finite()) {
                        return sec("preferential", "timeout_s", "timeout_s must be positive".into());
                    }
                }
            }
            Mode::Federated => {
                let f = self
                    .federated
                    .as_ref()
                    .ok_or((None, "mode", "mode `federated` needs a `federated` section".to_owned()))?;
                if f.agents < 2 {
                    return sec("federated", "agents", format!("need at least 2 agents, got {}", f.agents));
                }
                if f.rounds == 0 {
                    return sec("federated", "rounds", "rounds must be ≥ 1".into());
                }
                if f.per_round_evals == 0 {
                    return sec("federated", "per_round_evals", "per_round_evals must be ≥ 1".into());
                }
                if !(f.threshold >= 0.0) {
                    return sec("federated", "threshold", "threshold must be ≥ 0".into());
                }
            }
            Mode::Instructzero => {
                let z = self
                    .instructzero
                    .as_ref()
                    .ok_or((None, "mode", "mode `instructzero` needs an `instructzero` section".to_owned()))?;
                if z.budget == 0 {
                    return sec("instructzero", "budget", "budget must be ≥ 1".into());
                }
                if z.d_prime == 0 || z.d_prime > z.d {
                    return sec("instructzero", "d_prime", format!("need 1 ≤ d_prime ≤ d, got d_prime = {}", z.d_prime));
                }
                if z.lengthscales.as_ref().is_some_and(|l| l.is_empty() || l.iter().any(|&v| !(v > 0.0))) {
                    return sec("instructzero", "lengthscales", "lengthscales must be a non-empty list of positive numbers".into());
                }
                match z.task {
                    TaskKind::Planted => {
                        for (key, there) in [
                            ("remote", z.remote.is_some()),
                            ("validation", z.validation.is_some()),
                            ("exemplars", z.exemplars.is_some()),
                            ("similarity", z.similarity.is_some()),
                        ] {
                            if there {
                                return sec("instructzero", key, format!("`{key}` applies to task = \"remote\" only"));
                            }
                        }
                    }
                    TaskKind::Remote => {
                        if z.remote.is_none() {
                            return sec("instructzero", "task", "task = \"remote\" needs an `instructzero.remote` section".into());
                        }
                        if z.validation.as_ref().is_none_or(|v| v.is_empty()) {
                            return sec("instructzero", "validation", "task = \"remote\" needs a non-empty `validation` list".into());
                        }
                        if z.exemplars.as_ref().is_none_or(|v| v.is_empty()) {
                            return sec("instructzero", "exemplars", "task = \"remote\" needs a non-empty `exemplars` list".into());
                        }
                        let r = z.remote.as_ref().expect("checked");
                        if !(r.timeout_s > 0.0 && r.timeout_s.is_finite()) {
                            return sec("instructzero.remote", "timeout_s", "timeout_s must be positive".into());
                        }
                        if r.rate_limit.is_some_and(|v| !(v > 0.0)) {
                            return sec("instructzero.remote", "rate_limit", "rate_limit must be positive".into());
                        }
                    }
                }
            }
            Mode::Audit => {
                if self.audit.is_none() {
                    return top("mode", "mode `audit` needs an `audit` section with `csv`".into());
                }
            }
        }
        Ok(())
    }

    /// Output directory, resolved against `base` when relative.
    pub fn output_dir_from(&self, base: &Path) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            base.join(&self.output_dir)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("c.toml"))
    }

    const BO: &str = "mode = \"bo\"\nseed = 3\n\n[objective]\nname = \"branin\"\n\n[bo]\nbudget = 10\n";

    #[test]
    fn minimal_bo() {
        let c = parse(BO).unwrap();
        assert_eq!(c.mode, Mode::Bo);
        assert_eq!(c.bo.unwrap().acquisition, AcquisitionKind::ExpectedImprovement);
    }

    #[test]
    fn unknown_key_is_located() {
        let e = parse(&BO.replace("budget = 10", "budget = 10\nbugdet = 3")).unwrap_err();
        assert_eq!(e.line, 9, "{e}");
        assert!(e.message.contains("bugdet"), "{e}");
        let e = parse(&format!("colour = 1\n{BO}")).unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("colour"));
    }

    #[test]
    fn json_accepted() {
        let c = RunConfig::parse(
            r#"{"mode": "bo", "objective": {"name": "sphere1d"}, "bo": {"budget": 3}}"#,
            Path::new("c.json"),
        )
        .unwrap();
        assert_eq!(c.objective.unwrap().name, ObjectiveName::Sphere1d);
        let e = RunConfig::parse("{\"mode\": \"bo\",\n \"extra\": 1}", Path::new("c.json")).unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.message.contains("extra"), "{e}");
    }

    #[test]
    fn semantic_errors_point_at_key() {
        let e = parse(&BO.replace("name = \"branin\"", "name = \"two_bowls\"")).unwrap_err();
        assert_eq!(e.line, 5, "{e}");
        let text = "mode = \"federated\"\n[objective]\nname = \"sphere1d\"\n[federated]\nagents = 1\nrounds = 2\nper_round_evals = 1\nthreshold = 0.5\n";
        let e = parse(text).unwrap_err();
        assert_eq!(e.line, 5, "{e}");
        let e = parse(&format!("{BO}\n[mobo]\nbudget = 3\n")).unwrap_err();
        assert_eq!(e.line, 10, "{e}");
    }

    #[test]
    fn infinite_threshold() {
        let t = "mode = \"federated\"\n[objective]\nname = \"sphere1d\"\n[federated]\nagents = 2\nrounds = 2\nper_round_evals = 1\nthreshold = inf\n";
        assert!(parse(t).unwrap().federated.unwrap().threshold.is_infinite());
        let t = t.replace("inf", "\"inf\"");
        assert!(parse(&t).unwrap().federated.unwrap().threshold.is_infinite());
    }

    #[test]
    fn interactive_needs_serve() {
        let t = "mode = \"preferential\"\n[preferential]\nduel_budget = 3\nbounds = [[0.0, 1.0]]\noracle = \"interactive\"\n";
        let e = parse(t).unwrap_err();
        assert_eq!(e.line, 5, "{e}");
        assert!(parse(&format!("serve = true\n{t}")).is_ok());
    }
}
