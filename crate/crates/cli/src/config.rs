use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use epitwin::agentloop::{EvolveConfig, LlmConfig, Mode, MAX_HIDDEN};
use epitwin::calib::{NetConfig, TrainConfig};
use epitwin::evalharness::{EvalConfig, ScenarioConfig};
use epitwin::mechdsl::{Channel, VerifyConfig};
use serde::{Deserialize, Serialize};

/// A problem with the configuration, attributed to one key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub msg: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at `{}`: {}", self.key, self.msg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    /// Directory holding `meta.json` and `data.csv`.
    pub path: Option<PathBuf>,
    /// Name of a bundled scenario.
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBlock {
    pub lr: f64,
    pub iterations: usize,
    pub weight_decay: f64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            iterations: t.iterations,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateBlock {
    /// Steps to run; the parameter source decides when absent.
    pub steps: Option<usize>,
    /// Constant per-channel values.
    pub params: BTreeMap<Channel, f64>,
    /// Network checkpoint whose predictions drive the run.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateBlock {
    /// Trailing steps withheld from training and scored afterwards.
    pub holdout: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecasterKind {
    #[default]
    Mechanistic,
    Oracle,
    Persistence,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateBlock {
    pub forecaster: ForecasterKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    #[default]
    Mutation,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveBlock {
    pub generations: usize,
    pub k: usize,
    pub mode: Mode,
    pub generator: GeneratorKind,
    pub holdout: Option<usize>,
    pub snippets: usize,
    pub snippet_dir: Option<PathBuf>,
    pub target_loss: Option<f64>,
    pub endpoint: Option<LlmConfig>,
    /// Route warning-bearing programs through the endpoint for review.
    pub judge: bool,
    /// Write reflections with the endpoint.
    pub reflect: bool,
    /// Summarize the data with the endpoint.
    pub insights: bool,
}

impl Default for EvolveBlock {
    fn default() -> Self {
        let e = EvolveConfig::default();
        Self {
            generations: e.generations,
            k: e.k,
            mode: e.mode,
            generator: GeneratorKind::Mutation,
            holdout: None,
            snippets: e.snippets,
            snippet_dir: None,
            target_loss: None,
            endpoint: None,
            judge: false,
            reflect: false,
            insights: false,
        }
    }
}

impl EvolveBlock {
    pub fn uses_endpoint(&self) -> bool {
        self.generator == GeneratorKind::Llm || self.judge || self.reflect || self.insights
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterveneBlock {
    /// First intervened step; 80% of the run when absent.
    pub start: Option<usize>,
    pub deltas: Vec<f64>,
    pub channels: Vec<Channel>,
    /// Intervened locations; all when absent.
    pub patches: Option<Vec<usize>>,
}

impl Default for InterveneBlock {
    fn default() -> Self {
        Self {
            start: None,
            deltas: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            channels: vec![Channel::Beta],
            patches: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Model program; the scenario's generating program or the canonical
    /// SEIRM program when absent.
    pub spec: Option<PathBuf>,
    pub data: DataBlock,
    /// Inline synthetic scenario.
    pub scenario: Option<ScenarioConfig>,
    pub net: NetConfig,
    pub train: TrainBlock,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    pub simulate: SimulateBlock,
    pub calibrate: CalibrateBlock,
    pub evaluate: EvaluateBlock,
    pub evolve: EvolveBlock,
    pub intervene: InterveneBlock,
}

impl RunConfig {
    /// Parses TOML text. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = match unknown_field(e.message()) {
                Some(field) => match e.span().and_then(|sp| table_at(text, sp.start)) {
                    Some(table) => format!("{table}.{field}"),
                    None => field,
                },
                None => "(file)".to_string(),
            };
            ConfigError::new(key, e.to_string().trim_end())
        })?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.spec);
        fix(&mut self.data.path);
        fix(&mut self.simulate.checkpoint);
        fix(&mut self.evolve.snippet_dir);
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            iterations: self.train.iterations,
            seed: self.seed,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn evolve_config(&self) -> EvolveConfig {
        EvolveConfig {
            generations: self.evolve.generations,
            k: self.evolve.k,
            seed: self.seed,
            mode: self.evolve.mode,
            holdout: self.evolve.holdout,
            snippets: self.evolve.snippets,
            target_loss: self.evolve.target_loss,
            eval: self.eval.clone(),
            train: self.train_config(),
            verify: self.verify.clone(),
        }
    }

    /// Range and existence checks shared by every subcommand.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let sources = [self.data.path.is_some(), self.data.scenario.is_some(), self.scenario.is_some()];
        if sources.iter().filter(|s| **s).count() > 1 {
            return Err(ConfigError::new(
                "data",
                "set only one of data.path, data.scenario and [scenario]",
            ));
        }
        exists("spec", self.spec.as_deref())?;
        exists("data.path", self.data.path.as_deref())?;
        exists("simulate.checkpoint", self.simulate.checkpoint.as_deref())?;
        exists("evolve.snippet_dir", self.evolve.snippet_dir.as_deref())?;
        if let Some(name) = &self.data.scenario {
            if epitwin::evalharness::scenarios::by_name(name).is_none() {
                let names: Vec<String> = epitwin::evalharness::scenarios::bundled()
                    .into_iter()
                    .map(|s| s.name)
                    .collect();
                return Err(ConfigError::new(
                    "data.scenario",
                    format!("unknown scenario `{name}`, expected one of {}", names.join(", ")),
                ));
            }
        }
        if !(1..=MAX_HIDDEN).contains(&self.net.hidden) {
            return Err(ConfigError::new("net.hidden", format!("must be in 1..={MAX_HIDDEN}")));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(ConfigError::new("train.lr", "must be positive"));
        }
        if self.train.iterations == 0 {
            return Err(ConfigError::new("train.iterations", "must be at least 1"));
        }
        if !(self.train.weight_decay >= 0.0 && self.train.weight_decay.is_finite()) {
            return Err(ConfigError::new("train.weight_decay", "must be non-negative"));
        }
        if self.eval.horizon == Some(0) {
            return Err(ConfigError::new("eval.horizon", "must be at least 1"));
        }
        if self.eval.shifts.is_empty() {
            return Err(ConfigError::new("eval.shifts", "must not be empty"));
        }
        if matches!(self.eval.train_len, Some(n) if n < 2) {
            return Err(ConfigError::new("eval.train_len", "must be at least 2"));
        }
        if self.simulate.steps == Some(0) {
            return Err(ConfigError::new("simulate.steps", "must be at least 1"));
        }
        for (c, v) in &self.simulate.params {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(ConfigError::new(format!("simulate.params.{c}"), "must be finite and non-negative"));
            }
        }
        if self.evolve.generations == 0 {
            return Err(ConfigError::new("evolve.generations", "must be at least 1"));
        }
        if self.evolve.k == 0 {
            return Err(ConfigError::new("evolve.k", "must be at least 1"));
        }
        if matches!(self.evolve.target_loss, Some(t) if t.is_nan() || t <= 0.0) {
            return Err(ConfigError::new("evolve.target_loss", "must be positive"));
        }
        if self.evolve.uses_endpoint() && self.evolve.endpoint.is_none() {
            return Err(ConfigError::new(
                "evolve.endpoint",
                "required when generator = \"llm\" or judge, reflect or insights is enabled",
            ));
        }
        if self.intervene.deltas.is_empty() {
            return Err(ConfigError::new("intervene.deltas", "must not be empty"));
        }
        if let Some(d) = self.intervene.deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(ConfigError::new("intervene.deltas", format!("{d} outside [0, 1]")));
        }
        if self.intervene.channels.is_empty() {
            return Err(ConfigError::new("intervene.channels", "must not be empty"));
        }
        Ok(())
    }
}

fn exists(key: &str, path: Option<&Path>) -> Result<(), ConfigError> {
    match path {
        Some(p) if !p.exists() => Err(ConfigError::new(key, format!("{} does not exist", p.display()))),
        _ => Ok(()),
    }
}

/// Pulls the offending name out of serde's "unknown field `x`" message.
fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

/// Header of the table enclosing byte offset `pos`, if any.
fn table_at(text: &str, pos: usize) -> Option<String> {
    text[..pos.min(text.len())]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

/// The subcommand a help text is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Synth,
    Simulate,
    Calibrate,
    Evaluate,
    Evolve,
    Intervene,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) if !t.is_empty() => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("  {prefix} = {other}")),
    }
}

fn block<T: Serialize>(name: &str, value: &T, unset: &[(&str, &str)], out: &mut Vec<String>) {
    let v = toml::Value::try_from(value).expect("defaults serialize");
    flatten(name, &v, out);
    for (k, note) in unset {
        out.push(format!("  {name}.{k} = <unset: {note}>"));
    }
}

/// Every config key the subcommand reads, with its default.
pub fn keys_help(section: Section) -> String {
    let mut out = vec![
        "Config keys (TOML, passed with --config) and their defaults:".to_string(),
        format!("  seed = {}", RunConfig::default().seed),
        "  spec = <unset: generating program of the scenario, else canonical SEIRM>".to_string(),
        "  data.path = <unset: directory with meta.json and data.csv>".to_string(),
        "  data.scenario = <unset: recovery | canonical | daily>".to_string(),
    ];
    let mut scenario = toml::Value::try_from(ScenarioConfig::default()).expect("defaults serialize");
    if let toml::Value::Table(t) = &mut scenario {
        t.remove("spec");
    }
    flatten("scenario", &scenario, &mut out);
    out.push("  scenario.spec = <program text of the recovery scenario>".to_string());
    out.push("  (exactly one of data.path, data.scenario or a [scenario] table is required)".to_string());
    if matches!(section, Section::Calibrate | Section::Evaluate | Section::Evolve) {
        block("net", &NetConfig::default(), &[], &mut out);
        block("train", &TrainBlock::default(), &[], &mut out);
    }
    if matches!(section, Section::Calibrate | Section::Evaluate | Section::Evolve) {
        block(
            "eval",
            &EvalConfig::default(),
            &[
                ("horizon", "8 for weekly data, 28 for daily"),
                ("train_len", "T - max(shifts) - horizon"),
            ],
            &mut out,
        );
    }
    match section {
        Section::Synth => {}
        Section::Simulate | Section::Intervene => {
            block(
                "simulate",
                &SimulateBlock::default(),
                &[
                    ("steps", "length of the parameter source"),
                    ("checkpoint", "network checkpoint driving the run"),
                ],
                &mut out,
            );
            out.push("  (parameters come from simulate.checkpoint, else constant simulate.params such as { beta = 0.5 }, else the scenario truth)".to_string());
            if section == Section::Intervene {
                block(
                    "intervene",
                    &InterveneBlock::default(),
                    &[("start", "80% of the run"), ("patches", "all locations")],
                    &mut out,
                );
            }
        }
        Section::Calibrate => block("calibrate", &CalibrateBlock::default(), &[], &mut out),
        Section::Evaluate => block("evaluate", &EvaluateBlock::default(), &[], &mut out),
        Section::Evolve => {
            block(
                "evolve",
                &EvolveBlock::default(),
                &[
                    ("holdout", "eval horizon"),
                    ("snippet_dir", "bundled snippets"),
                    ("target_loss", "5% of the target peak"),
                    ("endpoint", "required by generator = \"llm\", judge, reflect, insights"),
                ],
                &mut out,
            );
            block("evolve.endpoint", &LlmConfig::default(), &[], &mut out);
            out.push(format!(
                "  (endpoint credentials: {}, {}, {})",
                epitwin::agentloop::ENV_BASE_URL,
                epitwin::agentloop::ENV_MODEL,
                epitwin::agentloop::ENV_API_KEY
            ));
        }
    }
    if section != Section::Synth {
        block("verify", &VerifyConfig::default(), &[], &mut out);
    }
    out.join("\n")
}
