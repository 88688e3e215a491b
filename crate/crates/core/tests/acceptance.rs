//! The eleven acceptance criteria. Each prints one PASS/FAIL line; the test
//! fails if any criterion does.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{seirm_oracle_step, RandomGraph};
use epitwin::agentloop::{
    evolve, Agents, CandidateGenerator, EvolveConfig, MutationGenerator, PromptBundle, Proposal, RunMemory,
    SnippetStore,
};
use epitwin::autodiff::{Tape, Tensor};
use epitwin::calib::{evaluate_loss, forecast, train, CalibNet, NetConfig, TrainConfig};
use epitwin::evalharness::{
    bug_counts_at, realtime_eval, rmse, scenarios, synthesize, EvalConfig, EvalWindow, MechanisticForecaster,
    OracleForecaster, RunLog, RunRecord, SpatioTemporalDataset, Status, WindowForecaster,
};
use epitwin::mechdsl::fixtures::{ABSOLUTE_FLOW, CANONICAL_SEIRM, DUAL_PATHWAY};
use epitwin::mechdsl::sample::sample_program;
use epitwin::mechdsl::{parse, pretty, verify, Channel, ModelSpec, VerifyConfig, NUM_CHANNELS};
use epitwin::rng::{rng_for, stream};
use epitwin::simcore::{initial_state, simulate, simulate_on_tape, step, MetapopContext, ParamField};
use epitwin::{Error, Result};
use rand::Rng;

/// Bypasses the harness's output capture so the lines appear in plain runs.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) {
    assert!(
        elapsed < Duration::from_secs(limit_secs),
        "{what} took {elapsed:?}, limit {limit_secs} s"
    );
}

fn canonical() -> ModelSpec {
    parse(CANONICAL_SEIRM).unwrap()
}

fn c1_autodiff() -> String {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let mut rng = rng_for(seed, stream::FUZZ);
        let graph = RandomGraph::sample(&mut rng, 12);
        assert!(graph.leaves.iter().all(|l| l.numel() <= 16));
        let err = graph.max_gradient_error(1e-5);
        assert!(err <= 1e-5, "graph {seed}: relative error {err}");
        worst = worst.max(err);
    }
    within(start.elapsed(), 10, "200 graphs");
    format!("200 graphs, worst relative error {worst:.2e}, {:?}", start.elapsed())
}

fn c2_hand_step() -> String {
    let spec = canonical();
    let ctx = MetapopContext::identity(vec![1000.0]).unwrap();
    let params = common::channel_row(&[
        (Channel::Beta, 0.3),
        (Channel::Alpha, 0.2),
        (Channel::Gamma, 0.1),
        (Channel::Mor, 0.05),
        (Channel::Delta, 0.0),
    ]);
    let p = Tensor::new(vec![1, NUM_CHANNELS], params.to_vec()).unwrap();
    let s0 = Tensor::new(vec![5, 1], vec![990.0, 0.0, 10.0, 0.0, 0.0]).unwrap();
    let (s1, _) = step(&spec, &ctx, &s0, &p).unwrap();
    let want1 = [987.03, 2.97, 8.5, 1.0, 0.5];
    for (g, w) in s1.data().iter().zip(want1) {
        assert!((g - w).abs() <= 1e-12, "step 1: {g} vs {w}");
    }
    let (s2, _) = step(&spec, &ctx, &s1, &p).unwrap();
    let oracle1 = seirm_oracle_step([990.0, 0.0, 10.0, 0.0, 0.0], 1000.0, 0.3, 0.2, 0.1, 0.05, 0.0);
    let oracle2 = seirm_oracle_step(oracle1, 1000.0, 0.3, 0.2, 0.1, 0.05, 0.0);
    for (g, w) in s2.data().iter().zip(oracle2) {
        assert!((g - w).abs() <= 1e-12, "step 2: {g} vs {w}");
    }
    format!("step 1 {:?}, step 2 {:?}", s1.data(), s2.data())
}

/// Random row-stochastic contact and populations for `l` patches.
fn random_context(rng: &mut impl Rng, l: usize) -> MetapopContext {
    let mut c = Tensor::zeros(&[l, l]);
    for i in 0..l {
        let row: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = row.iter().sum();
        for (j, v) in row.iter().enumerate() {
            c.set(&[i, j], v / total);
        }
    }
    let pop = (0..l).map(|_| rng.random_range(1e3..1e6)).collect();
    MetapopContext::new(c, Tensor::from_vec(pop)).unwrap()
}

/// Every value uniform inside its channel bounds, shrunk by `margin` on each side.
fn random_field(rng: &mut impl Rng, spec: &ModelSpec, l: usize, t: usize, margin: f64) -> ParamField {
    let bounds = spec.channel_bounds();
    let data = (0..l * t * NUM_CHANNELS)
        .map(|i| {
            let (lo, hi) = bounds[i % NUM_CHANNELS];
            let w = hi - lo;
            rng.random_range(lo + margin * w..=hi - margin * w)
        })
        .collect();
    ParamField::new(Tensor::new(vec![l, t, NUM_CHANNELS], data).unwrap(), bounds).unwrap()
}

fn c3_conservation() -> String {
    let start = Instant::now();
    let spec = canonical();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = rng_for(seed, stream::FUZZ);
        let ctx = random_context(&mut rng, 3);
        let params = random_field(&mut rng, &spec, 3, 200, 0.0);
        let init = initial_state(&spec, &ctx).unwrap();
        let traj = simulate(&spec, &ctx, &init, &params, 200).unwrap();
        let n = ctx.population().data();
        for t in 0..=200 {
            for (p, m) in traj.total_mass(t).iter().enumerate() {
                let rel = (m - n[p]).abs() / n[p];
                assert!(rel <= 1e-9, "seed {seed} patch {p} step {t}: relative drift {rel}");
                worst = worst.max(rel);
            }
        }
    }
    within(start.elapsed(), 30, "100 conservation runs");
    format!("100 seeds x 3 patches x 200 steps, worst drift {worst:.2e}, {:?}", start.elapsed())
}

fn sum_observed(spec: &ModelSpec, ctx: &MetapopContext, init: &Tensor, values: &Tensor) -> f64 {
    let tape = Tape::new();
    let p = tape.constant(values.clone());
    simulate_on_tape(&tape, spec, ctx, init, p, 10).unwrap().observed().unwrap().sum().item().unwrap()
}

fn c4_sim_gradient() -> String {
    let spec = canonical();
    let ctx = MetapopContext::new(
        Tensor::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap(),
        Tensor::from_vec(vec![1000.0, 500.0]),
    )
    .unwrap();
    let init = initial_state(&spec, &ctx).unwrap();
    let mut rng = rng_for(7, stream::FUZZ);
    let params = random_field(&mut rng, &spec, 2, 10, 0.1);

    let tape = Tape::new();
    let p = tape.leaf(params.values().clone());
    let root = simulate_on_tape(&tape, &spec, &ctx, &init, p, 10).unwrap().observed().unwrap().sum();
    let ad = root.backward().unwrap().wrt(p);

    let mut worst: f64 = 0.0;
    for k in 0..params.values().numel() {
        let h = 1e-6;
        let mut plus = params.values().clone();
        plus.data_mut()[k] += h;
        let mut minus = params.values().clone();
        minus.data_mut()[k] -= h;
        let fd = (sum_observed(&spec, &ctx, &init, &plus) - sum_observed(&spec, &ctx, &init, &minus)) / (2.0 * h);
        let a = ad.data()[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        assert!(rel <= 1e-4, "entry {k}: autodiff {a} vs finite difference {fd}");
        worst = worst.max(rel);
    }
    format!("{} parameter entries, worst relative error {worst:.2e}", params.values().numel())
}

fn c5_verifier() -> String {
    let cfg = VerifyConfig::default();
    let dual = verify(&parse(DUAL_PATHWAY).unwrap(), &cfg);
    assert!(dual.warnings.iter().any(|f| f.code == "W1"), "{}", dual.to_json());
    let absolute = verify(&parse(ABSOLUTE_FLOW).unwrap(), &cfg);
    assert!(absolute.warnings.iter().any(|f| f.code == "W2"), "{}", absolute.to_json());
    let clean = verify(&canonical(), &cfg);
    assert!(clean.errors.is_empty() && clean.warnings.is_empty(), "{}", clean.to_json());
    for seed in 0..1000 {
        let mut rng = rng_for(seed, stream::FUZZ);
        let text = sample_program(&mut rng);
        let spec = parse(&text).unwrap_or_else(|e| panic!("sample {seed} does not parse: {e}\n{text}"));
        let printed = pretty(&spec);
        assert_eq!(parse(&printed).unwrap(), spec, "sample {seed}");
    }
    "W1 and W2 flagged, canonical clean, 1000 round trips".to_string()
}

fn c6_calibration() -> String {
    let start = Instant::now();
    let (data, truth) = synthesize(&scenarios::recovery(), 0).unwrap();
    let spec = parse(&truth.spec_text).unwrap();
    let ctx = data.context().unwrap();
    let horizon = 8;
    let train_data = data.window(0, data.len() - horizon).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!((cfg.lr, cfg.iterations), (5e-4, 1000));
    let net = CalibNet::new(NetConfig::default(), data.num_features(), spec.channel_bounds(), cfg.seed).unwrap();
    let outcome = train(&spec, &ctx, net, &train_data, &cfg).unwrap();
    let initial = outcome.losses[0];
    let last = evaluate_loss(&spec, &ctx, &outcome.net, &train_data).unwrap();
    let fc = forecast(&spec, &ctx, &outcome.net, &train_data, horizon).unwrap();
    let truth_window = data.window(data.len() - horizon, horizon).unwrap().target_matrix();
    let err = rmse(&fc, &truth_window).unwrap();
    let peak = data.target_matrix().data().iter().cloned().fold(0.0, f64::max);
    assert!(last < 0.1 * initial, "final loss {last} vs initial {initial}");
    assert!(err < 0.1 * peak, "forecast RMSE {err} vs peak {peak}");
    // Pinned from the first run (ratio 0.0023, 1.3% of peak) with headroom.
    assert!(last < 0.01 * initial, "loss ratio {} regressed", last / initial);
    assert!(err < 0.03 * peak, "forecast RMSE {} of peak regressed", err / peak);
    within(start.elapsed(), 300, "calibration");
    format!(
        "loss {initial:.1} -> {last:.3} (ratio {:.4}), H=8 RMSE {err:.1} = {:.2}% of peak {peak:.0}, {:?}",
        last / initial,
        100.0 * err / peak,
        start.elapsed()
    )
}

/// Records the bits of every forecast it makes, keyed by shift.
struct Recorder {
    inner: MechanisticForecaster,
    seen: Mutex<Vec<(usize, Vec<u64>)>>,
}

impl WindowForecaster for Recorder {
    fn forecast(&self, train: &SpatioTemporalDataset, w: &EvalWindow) -> Result<Tensor> {
        let out = self.inner.forecast(train, w)?;
        let bits = out.data().iter().map(|v| v.to_bits()).collect();
        self.seen.lock().unwrap().push((w.shift, bits));
        Ok(out)
    }
}

/// Copy of `data` with every value at or after `from` overwritten.
fn blank_after(data: &SpatioTemporalDataset, from: usize) -> SpatioTemporalDataset {
    let mut values = data.values().clone();
    let (l, t, d) = (data.num_locations(), data.len(), data.num_features());
    for loc in 0..l {
        for s in from..t {
            for f in 0..d {
                values.set(&[loc, s, f], 1e9);
            }
        }
    }
    SpatioTemporalDataset::new(
        values,
        data.feature_names.clone(),
        data.target,
        data.cadence,
        data.population.clone(),
        data.contact.clone(),
    )
    .unwrap()
}

fn c7_realtime() -> String {
    let (canonical_data, _) = synthesize(&scenarios::canonical(), 0).unwrap();
    let eval = EvalConfig::default();
    assert_eq!(eval.shifts, vec![0, 1, 2, 3]);
    let report = realtime_eval(&OracleForecaster { full: &canonical_data }, &canonical_data, &eval).unwrap();
    assert_eq!(report.per_shift.len(), 4);
    assert!(report.per_shift.iter().all(|s| s.rmse == 0.0));
    assert_eq!(report.mean_rmse, 0.0);

    let (data, truth) = synthesize(&scenarios::recovery(), 0).unwrap();
    let recorder = || Recorder {
        inner: MechanisticForecaster {
            spec: parse(&truth.spec_text).unwrap(),
            net: NetConfig::default(),
            train: TrainConfig {
                iterations: 40,
                ..TrainConfig::default()
            },
        },
        seen: Mutex::new(Vec::new()),
    };
    let windows = epitwin::evalharness::windows(&data, &eval).unwrap();
    for w in &windows {
        // One shift at a time, with the training length of the full protocol.
        let single = EvalConfig {
            shifts: vec![w.shift],
            train_len: Some(w.train_len),
            ..eval.clone()
        };
        let full = recorder();
        realtime_eval(&full, &data, &single).unwrap();
        let blanked = recorder();
        realtime_eval(&blanked, &blank_after(&data, w.test_start()), &single).unwrap();
        let again = recorder();
        realtime_eval(&again, &data, &single).unwrap();
        let (a, b, c) = (
            full.seen.into_inner().unwrap(),
            blanked.seen.into_inner().unwrap(),
            again.seen.into_inner().unwrap(),
        );
        assert_eq!(a, b, "shift {}: forecast changed when test-range values were removed", w.shift);
        assert_eq!(a, c, "shift {}: repeated evaluation differs", w.shift);
    }
    format!("oracle mean RMSE 0 over 4 shifts; leakage guard bit-exact on {} shifts", windows.len())
}

fn c8_evolution() -> String {
    let start = Instant::now();
    let (data, _) = synthesize(&scenarios::recovery(), 0).unwrap();
    let cfg = EvolveConfig {
        generations: 40,
        k: 3,
        seed: 0,
        ..EvolveConfig::default()
    };
    let store = SnippetStore::bundled();
    let run = || {
        let mut generator = MutationGenerator::new(0, true);
        evolve(&cfg, &mut generator, &data, &store, Agents::default()).unwrap()
    };
    let first = run();
    let once = start.elapsed();
    let second = run();
    let a = serde_json::to_string(&first.log.records).unwrap();
    let b = serde_json::to_string(&second.log.records).unwrap();
    assert!(a == b, "RunLogs differ between identical runs");

    let zero_shot = first.log.records[0].v.expect("generation 1 succeeds");
    let best = first.best.as_ref().expect("a best program").v;
    assert!(best <= 0.8 * zero_shot, "best {best} vs zero-shot {zero_shot}");
    let curve: Vec<f64> = first.report.curve.best_v.iter().flatten().copied().collect();
    assert_eq!(curve.len(), 40, "best-so-far defined from generation 1");
    assert!(curve.windows(2).all(|w| w[1] <= w[0]), "best-so-far increased: {curve:?}");
    within(once, 1800, "one evolution run");
    format!(
        "zero-shot {zero_shot:.2} -> best {best:.2} ({:.0}% lower), logs identical, {:?} per run",
        100.0 * (1.0 - best / zero_shot),
        once
    )
}

fn log_of(statuses: &[Status]) -> RunLog {
    let mut log = RunLog::default();
    for (i, s) in statuses.iter().enumerate() {
        log.push(match s {
            Status::Ok => RunRecord::ok(i + 1, 1.0),
            other => RunRecord::failed(i + 1, *other, "E"),
        });
    }
    log
}

fn c9_bug_counts() -> String {
    use Status::*;
    let mut twenty = vec![Ok; 20];
    twenty[0] = ParseError;
    twenty[7] = VerifyError;
    twenty[19] = RuntimeError;
    let mut early = vec![RuntimeError; 10];
    early.extend(vec![Ok; 20]);
    let mut boundary = vec![ParseError; 11];
    boundary.extend(vec![Ok; 19]);
    let cases: Vec<(&str, Vec<Status>, usize, usize)> = vec![
        ("20 records, 3 failures", twenty, 20, 3),
        ("empty log", vec![], 20, 0),
        ("30 records, failures in the first 10", early, 20, 0),
        ("only record 11 of 30 in window", boundary, 20, 1),
        ("shorter than the window", vec![ParseError, Ok, VerifyError], 20, 2),
        ("all failures, 25 records", vec![RuntimeError; 25], 20, 20),
        ("window of zero", vec![ParseError; 5], 0, 0),
    ];
    for (name, statuses, window, want) in &cases {
        assert_eq!(bug_counts_at(&log_of(statuses), *window), *want, "{name}");
    }
    let breakdown = log_of(&[ParseError, VerifyError, VerifyError, Ok]).breakdown(20);
    assert!(breakdown.contains(&(VerifyError, 2)) && breakdown.contains(&(ParseError, 1)));
    format!("{} synthetic logs", cases.len())
}

fn c10_intervention() -> String {
    let deltas = [0.0, 0.2, 0.4, 0.6, 0.8];
    let mut lines = Vec::new();
    for scenario in scenarios::bundled() {
        let (data, truth) = synthesize(&scenario, 0).unwrap();
        let spec = parse(&truth.spec_text).unwrap();
        let ctx = data.context().unwrap();
        let init = initial_state(&spec, &ctx).unwrap();
        let t = truth.params.steps();
        let start = (0.8 * t as f64).floor() as usize;
        let baseline = simulate(&spec, &ctx, &init, &truth.params, t).unwrap();
        let mut totals = Vec::new();
        for d in deltas {
            let field = truth.params.apply_intervention(start, d, &[Channel::Beta], None).unwrap();
            let traj = simulate(&spec, &ctx, &init, &field, t).unwrap();
            if d == 0.0 {
                assert!(field == truth.params && traj == baseline, "{}: delta 0 differs", scenario.name);
            }
            totals.push(traj.yhat.data().iter().sum::<f64>());
        }
        assert!(
            totals.windows(2).all(|w| w[1] <= w[0]),
            "{}: cumulative incidence {totals:?}",
            scenario.name
        );
        lines.push(format!("{} {:.0} -> {:.0}", scenario.name, totals[0], totals[4]));
    }
    lines.join(", ")
}

/// Replays a fixed list of generator outputs, one per generation.
struct Scripted {
    script: Vec<std::result::Result<String, Error>>,
}

impl CandidateGenerator for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }

    fn propose(&mut self, _: &PromptBundle, _: &RunMemory, g: usize) -> Result<Proposal> {
        let text = self.script[g - 1].clone()?;
        Ok(Proposal {
            text,
            note: format!("script {g}"),
        })
    }
}

fn c11_faults() -> String {
    let divergent = CANONICAL_SEIRM.replace("flow R -> S", "flow SOURCE -> S : S * S * S * S\nflow R -> S");
    let unguarded = CANONICAL_SEIRM.replace("alpha * E\nflow I", "alpha * E / I\nflow I");
    let undeclared = CANONICAL_SEIRM.replace("gamma * I", "gamma * kappa * I");
    let tweaked = CANONICAL_SEIRM.replace("delta * R", "0.5 * delta * R");
    let script: Vec<std::result::Result<String, Error>> = vec![
        Ok(CANONICAL_SEIRM.to_string()),
        Err(Error::Generator("endpoint unreachable".into())),
        Err(Error::Format("no fenced program".into())),
        Ok("model broken\nflow S -> : beta * S\n".into()),
        Ok(unguarded),
        Ok(undeclared),
        Ok(DUAL_PATHWAY.to_string()),
        Ok(divergent),
        Ok(format!("```nimm\n{CANONICAL_SEIRM}```\n```config\nhidden = 0\n```\n")),
        Ok(CANONICAL_SEIRM.to_string()),
        Ok(tweaked),
    ];
    let expected: &[(Status, &str)] = &[
        (Status::Ok, ""),
        (Status::RuntimeError, "GENERATOR_ERROR"),
        (Status::ParseError, "FORMAT_ERROR"),
        (Status::ParseError, "PARSE_ERROR"),
        (Status::VerifyError, "E2"),
        (Status::VerifyError, "E1"),
        (Status::VerifyError, "JUDGE"),
        (Status::RuntimeError, "SIM_DIVERGENCE"),
        (Status::ParseError, "FORMAT_ERROR"),
        (Status::Ok, ""),
        (Status::Ok, ""),
    ];
    let n = script.len();
    let (data, _) = synthesize(&scenarios::recovery(), 0).unwrap();
    let cfg = EvolveConfig {
        generations: n,
        train: TrainConfig {
            iterations: 30,
            ..TrainConfig::default()
        },
        ..EvolveConfig::default()
    };
    let judge = |_: &str, _: &str| -> Result<String> { Ok("Parallel exits from E.\nVERDICT: reject".into()) };
    let agents = Agents {
        judge: Some(&judge),
        ..Agents::default()
    };
    let mut generator = Scripted { script };
    let out = evolve(&cfg, &mut generator, &data, &SnippetStore::bundled(), agents).unwrap();
    assert_eq!(out.log.len(), n);
    for (r, (status, code)) in out.log.records.iter().zip(expected) {
        assert_eq!(r.status, *status, "g={}: {:?}", r.g, r.error);
        if *status == Status::Ok {
            assert!(r.v.is_some_and(f64::is_finite) && r.error.is_none(), "g={}", r.g);
        } else {
            let err = r.error.as_deref().unwrap_or_default();
            assert!(err.starts_with(&format!("{code}: ")), "g={}: {err}", r.g);
            assert!(r.v.is_none());
        }
    }
    assert_eq!(out.log.records[9].v, out.log.records[0].v, "duplicate reuses the score");
    assert_eq!(out.memory.errors.len(), 8);
    assert_eq!(out.report.bug_counts_at_20, 8);
    format!("{n} generations, 8 contained failures across parse/verify/runtime classes")
}

type Criterion = (&'static str, fn() -> String);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 11] = [
        ("autodiff matches finite differences on 200 random graphs", c1_autodiff),
        ("hand-step SEIRM oracle", c2_hand_step),
        ("per-patch mass conservation", c3_conservation),
        ("simulator gradient matches finite differences", c4_sim_gradient),
        ("verifier fixtures and parser round trip", c5_verifier),
        ("calibration recovers the synthetic scenario", c6_calibration),
        ("real-time protocol: oracle and leakage guard", c7_realtime),
        ("offline evolution improves deterministically", c8_evolution),
        ("Bug Counts@20 semantics", c9_bug_counts),
        ("intervention sweep reduces incidence", c10_intervention),
        ("fault containment in the evolution loop", c11_faults),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        match catch_unwind(AssertUnwindSafe(run)) {
            Ok(detail) => emit(&format!("criterion {n:>2} PASS  {name}: {detail}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                emit(&format!("criterion {n:>2} FAIL  {name}: {msg}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
