use std::fmt::Write as _;

use epitwin::agentloop::{
    evolve, Agents, CandidateGenerator, ChatBackend, LlmClient, LlmGenerator, Mode, MutationGenerator, SnippetStore,
};
use epitwin::autodiff::Tensor;
use epitwin::calib::{evaluate_loss, forecast, train, CalibNet};
use epitwin::evalharness::{
    realtime_eval, rmse, scenarios, synthesize, HiddenTruth, MechanisticForecaster, OracleForecaster,
    PersistenceForecaster, SpatioTemporalDataset, WindowForecaster,
};
use epitwin::mechdsl::{fixtures::CANONICAL_SEIRM, parse, verify, Channel, ModelSpec, NUM_CHANNELS};
use epitwin::simcore::{initial_state, simulate, ParamField, StateTrajectory};
use serde_json::json;

use crate::config::{ConfigError, ForecasterKind, GeneratorKind, RunConfig};
use crate::output::Artifacts;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<epitwin::Error> for CliError {
    fn from(e: epitwin::Error) -> Self {
        CliError::Runtime(format!("[{}] {e}", e.code()))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(key: &str, msg: impl Into<String>) -> CliError {
    CliError::Config(ConfigError::new(key, msg))
}

fn json_text(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("json serializes") + "\n"
}

/// Dataset, optional generating truth, and the model program.
struct Inputs {
    data: SpatioTemporalDataset,
    truth: Option<HiddenTruth>,
    spec: ModelSpec,
}

fn load_data(cfg: &RunConfig) -> Result<(SpatioTemporalDataset, Option<HiddenTruth>)> {
    if let Some(path) = &cfg.data.path {
        return Ok((SpatioTemporalDataset::ingest(path)?, None));
    }
    let scenario = match (&cfg.scenario, &cfg.data.scenario) {
        (Some(s), _) => s.clone(),
        (None, Some(name)) => scenarios::by_name(name).ok_or_else(|| config_err("data.scenario", "unknown scenario"))?,
        (None, None) => {
            return Err(config_err(
                "data",
                "no dataset: set data.path, data.scenario or a [scenario] table",
            ))
        }
    };
    let (data, truth) = synthesize(&scenario, cfg.seed)?;
    Ok((data, Some(truth)))
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let (data, truth) = load_data(cfg)?;
    let text = match (&cfg.spec, &truth) {
        (Some(path), _) => std::fs::read_to_string(path)
            .map_err(|e| config_err("spec", format!("cannot read {}: {e}", path.display())))?,
        (None, Some(t)) => t.spec_text.clone(),
        (None, None) => CANONICAL_SEIRM.to_string(),
    };
    let spec = parse(&text).map_err(|e| config_err("spec", e.to_string()))?;
    let report = verify(&spec, &cfg.verify);
    if report.has_errors() {
        return Err(config_err("spec", format!("program fails verification: {}", report.to_json())));
    }
    Ok(Inputs { data, truth, spec })
}

fn params_csv(field: &ParamField) -> String {
    let mut out = String::from("patch,t");
    for c in Channel::ALL {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for p in 0..field.num_patches() {
        for t in 0..field.steps() {
            let _ = write!(out, "{p},{t}");
            for c in Channel::ALL {
                let _ = write!(out, ",{}", field.get(p, t, c));
            }
            out.push('\n');
        }
    }
    out
}

/// The first `steps` steps of `field`.
fn truncate(field: &ParamField, steps: usize) -> Result<ParamField> {
    let (l, t) = (field.num_patches(), field.steps());
    let data = field.values().data();
    let mut kept = Vec::with_capacity(l * steps * NUM_CHANNELS);
    for p in 0..l {
        let start = p * t * NUM_CHANNELS;
        kept.extend_from_slice(&data[start..start + steps * NUM_CHANNELS]);
    }
    Ok(ParamField::new(Tensor::new(vec![l, steps, NUM_CHANNELS], kept)?, *field.bounds())?)
}

/// Parameters driving `simulate` and `intervene`: a checkpoint, constant
/// values, or the scenario truth, in that order.
fn param_source(cfg: &RunConfig, inputs: &Inputs) -> Result<(ParamField, &'static str)> {
    let data = &inputs.data;
    let steps = cfg.simulate.steps;
    if let Some(path) = &cfg.simulate.checkpoint {
        let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let net = CalibNet::from_bytes(&bytes)?;
        return Ok((net.predict_params(data, steps.unwrap_or(data.len()))?, "checkpoint"));
    }
    if !cfg.simulate.params.is_empty() {
        let bounds = inputs.spec.channel_bounds();
        let mut values = [0.0; NUM_CHANNELS];
        for (c, v) in &cfg.simulate.params {
            let (lo, hi) = bounds[c.index()];
            if !(lo..=hi).contains(v) {
                return Err(config_err(
                    &format!("simulate.params.{c}"),
                    format!("{v} outside the program's bounds [{lo}, {hi}]"),
                ));
            }
            values[c.index()] = *v;
        }
        let field = ParamField::constant(data.num_locations(), steps.unwrap_or(data.len()), values, bounds)?;
        return Ok((field, "constant"));
    }
    if let Some(truth) = &inputs.truth {
        let available = truth.params.steps();
        let steps = steps.unwrap_or(available);
        if steps > available {
            return Err(config_err(
                "simulate.steps",
                format!("scenario parameters cover {available} steps"),
            ));
        }
        return Ok((truncate(&truth.params, steps)?, "scenario"));
    }
    Err(config_err(
        "simulate.params",
        "no parameter source: set simulate.checkpoint or simulate.params, or use a synthetic scenario",
    ))
}

fn run_simulation(inputs: &Inputs, params: &ParamField) -> Result<StateTrajectory> {
    let ctx = inputs.data.context()?;
    let init = initial_state(&inputs.spec, &ctx)?;
    Ok(simulate(&inputs.spec, &ctx, &init, params, params.steps())?)
}

pub fn synth(cfg: &RunConfig) -> Result<Artifacts> {
    if cfg.data.path.is_some() {
        return Err(config_err("data.path", "synth needs data.scenario or a [scenario] table"));
    }
    let (data, truth) = load_data(cfg)?;
    let truth = truth.expect("synthetic source");
    let (meta, csv) = data.write_files();
    let mut out = Artifacts::default();
    out.add("meta.json", meta);
    out.add("data.csv", csv);
    out.add("truth.nimm", truth.spec_text.clone());
    out.add("truth_params.csv", params_csv(&truth.params));
    out.add("truth_trajectory.csv", truth.trajectory.to_csv());
    Ok(out)
}

pub fn simulate_cmd(cfg: &RunConfig) -> Result<Artifacts> {
    let inputs = load_inputs(cfg)?;
    let (params, source) = param_source(cfg, &inputs)?;
    log::info!("simulating {} steps from {source} parameters", params.steps());
    let traj = run_simulation(&inputs, &params)?;
    let mut out = Artifacts::default();
    out.add("trajectory.csv", traj.to_csv());
    out.add("params.csv", params_csv(&params));
    Ok(out)
}

pub fn calibrate(cfg: &RunConfig) -> Result<Artifacts> {
    let inputs = load_inputs(cfg)?;
    let data = &inputs.data;
    let holdout = cfg.calibrate.holdout;
    if holdout + 2 > data.len() {
        return Err(config_err(
            "calibrate.holdout",
            format!("leaves fewer than 2 of {} steps for training", data.len()),
        ));
    }
    let train_len = data.len() - holdout;
    let train_data = data.window(0, train_len)?;
    let ctx = data.context()?;
    let tcfg = cfg.train_config();
    let net = CalibNet::new(cfg.net, data.num_features(), inputs.spec.channel_bounds(), tcfg.seed)?;
    let outcome = train(&inputs.spec, &ctx, net, &train_data, &tcfg)?;
    let final_loss = evaluate_loss(&inputs.spec, &ctx, &outcome.net, &train_data)?;
    let horizon = if holdout > 0 {
        holdout
    } else {
        cfg.eval.horizon.unwrap_or_else(|| data.cadence.default_horizon())
    };
    let fc = forecast(&inputs.spec, &ctx, &outcome.net, &train_data, horizon)?;
    let holdout_rmse = if holdout > 0 {
        Some(rmse(&fc, &data.window(train_len, holdout)?.target_matrix())?)
    } else {
        None
    };
    let params = outcome.net.predict_params(&train_data, train_len + horizon)?;

    let mut losses = String::from("iteration,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(losses, "{i},{l}");
    }
    let mut fc_csv = String::from("patch,t,yhat,observed\n");
    for p in 0..data.num_locations() {
        for h in 0..horizon {
            let t = train_len + h;
            let observed = if t < data.len() {
                data.get(p, t, data.target).to_string()
            } else {
                String::new()
            };
            let _ = writeln!(fc_csv, "{p},{t},{},{observed}", fc.get(&[h, p]));
        }
    }
    let report = json!({
        "model": inputs.spec.name,
        "train_len": train_len,
        "horizon": horizon,
        "iterations": outcome.losses.len(),
        "initial_loss": outcome.losses.first(),
        "final_loss": final_loss,
        "holdout_rmse": holdout_rmse,
    });
    let mut out = Artifacts::default();
    out.add("checkpoint.bin", outcome.net.to_bytes());
    out.add("losses.csv", losses);
    out.add("params.csv", params_csv(&params));
    out.add("forecast.csv", fc_csv);
    out.add("calibrate_report.json", json_text(&report));
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig) -> Result<Artifacts> {
    let inputs = load_inputs(cfg)?;
    let data = &inputs.data;
    let mechanistic;
    let oracle;
    let forecaster: &dyn WindowForecaster = match cfg.evaluate.forecaster {
        ForecasterKind::Mechanistic => {
            mechanistic = MechanisticForecaster {
                spec: inputs.spec.clone(),
                net: cfg.net,
                train: cfg.train_config(),
            };
            &mechanistic
        }
        ForecasterKind::Oracle => {
            oracle = OracleForecaster { full: data };
            &oracle
        }
        ForecasterKind::Persistence => &PersistenceForecaster,
    };
    let report = realtime_eval(forecaster, data, &cfg.eval)?;
    let value = json!({
        "forecaster": cfg.evaluate.forecaster,
        "per_shift": report.per_shift,
        "mean_rmse": report.mean_rmse,
    });
    let mut out = Artifacts::default();
    out.add("evaluate_report.json", json_text(&value));
    Ok(out)
}

pub fn evolve_cmd(cfg: &RunConfig) -> Result<Artifacts> {
    let (data, _) = load_data(cfg)?;
    let store = match &cfg.evolve.snippet_dir {
        Some(dir) => SnippetStore::from_dir(dir)?,
        None => SnippetStore::bundled(),
    };
    let client = cfg.evolve.endpoint.clone().map(|e| LlmClient::new(e.with_env()));
    let backend = client.as_ref().map(|c| c as &dyn ChatBackend);
    let pick = |on: bool| if on { backend } else { None };
    let agents = Agents {
        insights: pick(cfg.evolve.insights),
        judge: pick(cfg.evolve.judge),
        reflector: pick(cfg.evolve.reflect),
    };
    let hybrid = cfg.evolve.mode == Mode::Hybrid;
    let mut mutation;
    let mut llm;
    let generator: &mut dyn CandidateGenerator = match cfg.evolve.generator {
        GeneratorKind::Mutation => {
            mutation = MutationGenerator::new(cfg.seed, hybrid);
            &mut mutation
        }
        GeneratorKind::Llm => {
            llm = LlmGenerator {
                backend: backend.ok_or_else(|| config_err("evolve.endpoint", "required by generator = \"llm\""))?,
                hybrid,
            };
            &mut llm
        }
    };
    let result = evolve(&cfg.evolve_config(), generator, &data, &store, agents)?;
    let mut out = Artifacts::default();
    out.add("evolve_report.json", result.report.to_json() + "\n");
    if let Some(best) = &result.best {
        out.add("best.nimm", best.candidate.render());
    }
    out.add("evolve_notes.txt", result.notes.join("\n") + "\n");
    Ok(out)
}

pub fn intervene(cfg: &RunConfig) -> Result<Artifacts> {
    let inputs = load_inputs(cfg)?;
    let (params, _) = param_source(cfg, &inputs)?;
    let steps = params.steps();
    let start = cfg.intervene.start.unwrap_or((0.8 * steps as f64).floor() as usize);
    if start > steps {
        return Err(config_err("intervene.start", format!("beyond the {steps}-step run")));
    }
    let l = inputs.data.num_locations();
    if let Some(p) = cfg.intervene.patches.iter().flatten().find(|p| **p >= l) {
        return Err(config_err("intervene.patches", format!("location {p} out of range 0..{l}")));
    }
    let patches = cfg.intervene.patches.as_deref();

    let baseline = run_simulation(&inputs, &params)?;
    let mut runs = vec![("baseline".to_string(), 0.0, baseline)];
    for &d in &cfg.intervene.deltas {
        let field = params.apply_intervention(start, d, &cfg.intervene.channels, patches)?;
        runs.push((format!("delta={d}"), d, run_simulation(&inputs, &field)?));
    }

    let mut csv = String::new();
    let mut summary = Vec::new();
    let base_total: f64 = runs[0].2.yhat.data()[start * l..].iter().sum();
    for (i, (label, d, traj)) in runs.iter().enumerate() {
        let body = traj.to_csv();
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            let _ = writeln!(csv, "run,delta,{header}");
        }
        for line in lines {
            let _ = writeln!(csv, "{label},{d},{line}");
        }
        let after = &traj.yhat.data()[start * l..];
        let total: f64 = after.iter().sum();
        let peak = after.iter().cloned().fold(0.0, f64::max);
        summary.push(json!({
            "run": label,
            "delta": d,
            "observed_after_start": total,
            "peak_after_start": peak,
            "reduction": if base_total > 0.0 { 1.0 - total / base_total } else { 0.0 },
        }));
    }
    let report = json!({
        "start": start,
        "steps": steps,
        "channels": cfg.intervene.channels,
        "patches": cfg.intervene.patches,
        "runs": summary,
    });
    let mut out = Artifacts::default();
    out.add("intervention.csv", csv);
    out.add("intervention_summary.json", json_text(&report));
    Ok(out)
}
