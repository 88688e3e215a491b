use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use super::candidate::Candidate;
use super::gate::{verify_candidate, Verdict};
use super::generator::CandidateGenerator;
use super::llm::ChatBackend;
use super::memory::{ErrorEntry, Member, RunMemory};
use super::prompts::{extract_insights, task_description, PromptBundle};
use super::reflect::{reflect, Outcome, ReflectContext};
use super::retrieval::SnippetStore;
use crate::calib::{NetConfig, TrainConfig};
use crate::error::{Error, Result, Span};
use crate::evalharness::{
    bug_counts_at, realtime_eval, windows, EvalConfig, EvalReport, MechanisticForecaster, RunLog, RunRecord,
    SpatioTemporalDataset, Status,
};
use crate::mechdsl::{ModelSpec, VerifyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Only the program changes; the network config is locked to defaults.
    Mechanistic,
    /// The config fence is honoured as well.
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveConfig {
    pub generations: usize,
    pub k: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Trailing steps withheld from the search; the forecast horizon when absent.
    pub holdout: Option<usize>,
    pub snippets: usize,
    /// Goal quoted in reflection prompts; 5% of the target peak when absent.
    pub target_loss: Option<f64>,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub verify: VerifyConfig,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            generations: 40,
            k: 3,
            seed: 0,
            mode: Mode::Hybrid,
            holdout: None,
            snippets: 3,
            target_loss: None,
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

/// Optional chat endpoints for the data, verification and reflection roles.
#[derive(Clone, Copy, Default)]
pub struct Agents<'a> {
    pub insights: Option<&'a dyn ChatBackend>,
    pub judge: Option<&'a dyn ChatBackend>,
    pub reflector: Option<&'a dyn ChatBackend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub g: usize,
    pub spec_text: String,
    pub config: NetConfig,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Mean of every successful score up to each generation.
    pub mean_v: Vec<Option<f64>>,
    /// Best score up to each generation.
    pub best_v: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugBreakdown {
    pub parse_error: usize,
    pub verify_error: usize,
    pub runtime_error: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolveReport {
    pub generations: Vec<RunRecord>,
    pub best: Option<BestRecord>,
    pub bug_counts_at_20: usize,
    pub bug_breakdown_at_20: BugBreakdown,
    pub curve: Curve,
}

impl EvolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    pub best: Option<Member>,
    pub log: RunLog,
    pub report: EvolveReport,
    pub memory: RunMemory,
    /// One line per generation describing how the candidate was produced.
    pub notes: Vec<String>,
}

/// Trains a fresh network per shift and scores the forecasts. Panics inside
/// training or simulation are converted into errors.
pub fn evaluate_candidate(
    spec: &ModelSpec,
    net: NetConfig,
    data: &SpatioTemporalDataset,
    eval: &EvalConfig,
    train: &TrainConfig,
) -> Result<EvalReport> {
    let forecaster = MechanisticForecaster {
        spec: spec.clone(),
        net,
        train: *train,
    };
    let report = catch_unwind(AssertUnwindSafe(|| realtime_eval(&forecaster, data, eval))).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Err(Error::Contract(format!("evaluation panicked: {msg}")))
    })?;
    if !report.mean_rmse.is_finite() {
        return Err(Error::SimDivergence {
            step: 0,
            msg: format!("validation RMSE is {}", report.mean_rmse),
        });
    }
    Ok(report)
}

/// The portion of `data` the search may see.
pub fn validation_split(data: &SpatioTemporalDataset, config: &EvolveConfig) -> Result<SpatioTemporalDataset> {
    let horizon = config.eval.horizon.unwrap_or_else(|| data.cadence.default_horizon());
    let holdout = config.holdout.unwrap_or(horizon);
    let len = data
        .len()
        .checked_sub(holdout)
        .ok_or_else(|| Error::Contract(format!("holdout {holdout} exceeds {} steps", data.len())))?;
    data.window(0, len)
}

struct Loop<'a> {
    memory: RunMemory,
    log: RunLog,
    scores: Vec<f64>,
    curve: Curve,
    notes: Vec<String>,
    config: &'a EvolveConfig,
}

impl Loop<'_> {
    fn fail(&mut self, g: usize, status: Status, code: &str, message: &str, source: &str, span: Option<Span>) -> Outcome {
        self.log.push(RunRecord::failed(g, status, format!("{code}: {message}")));
        self.memory.record_error(ErrorEntry::new(g, code, message, source, span));
        Outcome::Failure {
            g,
            code: code.to_string(),
            message: message.to_string(),
        }
    }

    fn succeed(&mut self, g: usize, candidate: Candidate, v: f64, cached: bool) -> Outcome {
        let previous_best = self.memory.best().map(|m| m.v);
        if !cached {
            self.memory.insert(Member { g, candidate, v }, self.config.k);
        }
        self.log.push(RunRecord::ok(g, v));
        self.scores.push(v);
        Outcome::Success { g, v, previous_best }
    }
}

/// Runs `config.generations` rounds of retrieve, propose, verify, evaluate
/// and reflect. Candidate failures are recorded and never end the run.
pub fn evolve(
    config: &EvolveConfig,
    generator: &mut dyn CandidateGenerator,
    data: &SpatioTemporalDataset,
    store: &SnippetStore,
    agents: Agents,
) -> Result<EvolveOutcome> {
    if config.generations == 0 || config.k == 0 {
        return Err(Error::Contract("generations and k must be positive".into()));
    }
    let validation = validation_split(data, config)?;
    let horizon = windows(&validation, &config.eval)?[0].horizon;
    let bundle = PromptBundle::new(
        extract_insights(&validation, agents.insights),
        task_description(&validation, horizon),
    );
    let peak = validation.target_matrix().data().iter().cloned().fold(0.0, f64::max);
    let ctx = ReflectContext {
        generations: config.generations,
        target_loss: config.target_loss.unwrap_or(0.05 * peak),
    };

    let mut state = Loop {
        memory: RunMemory::default(),
        log: RunLog::default(),
        scores: Vec::new(),
        curve: Curve {
            mean_v: Vec::new(),
            best_v: Vec::new(),
        },
        notes: Vec::new(),
        config,
    };
    let mut last_accepted: Option<Candidate> = None;

    for g in 1..=config.generations {
        let query = if state.memory.reflection.is_empty() {
            bundle.insights.clone()
        } else {
            state.memory.reflection.clone()
        };
        state.memory.snippets = store.retrieve(&query, config.snippets);

        let outcome = match generator.propose(&bundle, &state.memory, g) {
            Err(e) => {
                state.notes.push(format!("g={g} {} failed", generator.name()));
                let status = if e.code() == "FORMAT_ERROR" {
                    Status::ParseError
                } else {
                    Status::RuntimeError
                };
                let msg = e.to_string();
                state.fail(g, status, e.code(), &msg, "", None)
            }
            Ok(proposal) => {
                state.notes.push(format!("g={g} {}", proposal.note));
                match verify_candidate(&proposal.text, &config.verify, agents.judge) {
                    Verdict::Reject(r) => state.fail(g, r.status, &r.code, &r.reason, &r.source, r.span),
                    Verdict::Accept {
                        mut candidate, spec, ..
                    } => {
                        if config.mode == Mode::Mechanistic {
                            candidate.config = NetConfig::default();
                        }
                        if let Some(v) = state.memory.find(&candidate).map(|m| m.v) {
                            log::info!("g={g}: duplicate of a population member, reusing v={v}");
                            state.succeed(g, candidate, v, true)
                        } else {
                            match evaluate_candidate(&spec, candidate.config, &validation, &config.eval, &config.train) {
                                Ok(report) => {
                                    last_accepted = Some(candidate.clone());
                                    state.succeed(g, candidate, report.mean_rmse, false)
                                }
                                Err(e) => {
                                    let msg = e.to_string();
                                    state.fail(g, Status::RuntimeError, e.code(), &msg, &candidate.spec_text, e.span())
                                }
                            }
                        }
                    }
                }
            }
        };
        match &outcome {
            Outcome::Success { v, .. } => log::info!("g={g}: ok v={v}"),
            Outcome::Failure { code, .. } => log::info!("g={g}: {code}"),
        }

        let best = state.memory.best().map(|m| m.v);
        let mean = (!state.scores.is_empty()).then(|| state.scores.iter().sum::<f64>() / state.scores.len() as f64);
        state.curve.mean_v.push(mean);
        state.curve.best_v.push(best);
        state.memory.reflection = reflect(
            &state.memory,
            &outcome,
            last_accepted.as_ref(),
            &state.curve.best_v,
            agents.reflector,
            ctx,
        );
    }

    let counts = state.log.breakdown(20);
    let count = |s: Status| counts.iter().find(|(x, _)| *x == s).map(|(_, n)| *n).unwrap_or(0);
    let best = state.memory.best().cloned();
    let report = EvolveReport {
        generations: state.log.records.clone(),
        best: best.as_ref().map(|m| BestRecord {
            g: m.g,
            spec_text: m.candidate.spec_text.clone(),
            config: m.candidate.config,
            v: m.v,
        }),
        bug_counts_at_20: bug_counts_at(&state.log, 20),
        bug_breakdown_at_20: BugBreakdown {
            parse_error: count(Status::ParseError),
            verify_error: count(Status::VerifyError),
            runtime_error: count(Status::RuntimeError),
        },
        curve: state.curve,
    };
    Ok(EvolveOutcome {
        best,
        log: state.log,
        report,
        memory: state.memory,
        notes: state.notes,
    })
}
