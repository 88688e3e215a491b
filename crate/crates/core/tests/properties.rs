mod common;

use common::RandomGraph;
use epitwin::agentloop::{parse_candidate, Candidate, Member, RunMemory};
use epitwin::autodiff::Tensor;
use epitwin::calib::{CellType, NetConfig};
use epitwin::evalharness::{bug_counts_at, rmse, RunLog, RunRecord, Status};
use epitwin::mechdsl::fixtures::CANONICAL_SEIRM;
use epitwin::mechdsl::sample::{sample_program, sample_rate_model};
use epitwin::mechdsl::{parse, pretty, Channel, ModelSpec, NUM_CHANNELS};
use epitwin::rng::{rng_for, stream};
use epitwin::simcore::{initial_state, simulate, MetapopContext, ParamField, StateTrajectory};
use proptest::prelude::*;

fn canonical() -> ModelSpec {
    parse(CANONICAL_SEIRM).unwrap()
}

/// Row-stochastic contact matrix from raw weights.
fn contact(l: usize, raw: &[f64]) -> Tensor {
    let mut c = Tensor::zeros(&[l, l]);
    for i in 0..l {
        let row = &raw[i * l..(i + 1) * l];
        let total: f64 = row.iter().sum();
        for (j, v) in row.iter().enumerate() {
            c.set(&[i, j], v / total);
        }
    }
    c
}

/// Parameter field with every value drawn inside the model's bounds.
fn bounded_field(spec: &ModelSpec, l: usize, t: usize, unit: &[f64]) -> ParamField {
    let bounds = spec.channel_bounds();
    let data = (0..l * t * NUM_CHANNELS)
        .map(|i| {
            let (lo, hi) = bounds[i % NUM_CHANNELS];
            lo + (hi - lo) * unit[i % unit.len()]
        })
        .collect();
    ParamField::new(Tensor::new(vec![l, t, NUM_CHANNELS], data).unwrap(), bounds).unwrap()
}

fn run(spec: &ModelSpec, ctx: &MetapopContext, params: &ParamField) -> StateTrajectory {
    let init = initial_state(spec, ctx).unwrap();
    simulate(spec, ctx, &init, params, params.steps()).unwrap()
}

fn naive_bug_count(statuses: &[Status], window: usize) -> usize {
    let mut count = 0;
    for (i, s) in statuses.iter().enumerate() {
        if i + window >= statuses.len() && *s != Status::Ok {
            count += 1;
        }
    }
    count
}

fn status_strategy() -> impl Strategy<Value = Status> {
    prop_oneof![
        3 => Just(Status::Ok),
        1 => Just(Status::ParseError),
        1 => Just(Status::VerifyError),
        1 => Just(Status::RuntimeError),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn reverse_mode_matches_central_differences(seed in any::<u64>()) {
        let mut rng = rng_for(seed, stream::FUZZ);
        let graph = RandomGraph::sample(&mut rng, 10);
        let err = graph.max_gradient_error(1e-5);
        prop_assert!(err <= 1e-5, "relative error {err} on {graph:?}");
    }

    #[test]
    fn closed_model_conserves_mass_per_patch(
        raw in prop::collection::vec(0.05f64..1.0, 9),
        unit in prop::collection::vec(0.0f64..1.0, 64),
        pop in prop::collection::vec(1e2f64..1e6, 3),
    ) {
        let spec = canonical();
        let ctx = MetapopContext::new(contact(3, &raw), Tensor::from_vec(pop.clone())).unwrap();
        let traj = run(&spec, &ctx, &bounded_field(&spec, 3, 60, &unit));
        for t in 0..=traj.steps() {
            for (p, m) in traj.total_mass(t).iter().enumerate() {
                prop_assert!((m - pop[p]).abs() <= 1e-9 * pop[p], "patch {p} step {t}: {m} vs {}", pop[p]);
            }
        }
        prop_assert!(traj.clamped_mass.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn patch_relabelling_permutes_the_trajectory(
        raw in prop::collection::vec(0.05f64..1.0, 9),
        unit in prop::collection::vec(0.0f64..1.0, 40),
        pop in prop::collection::vec(1e2f64..1e6, 3),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let spec = canonical();
        let ctx = MetapopContext::new(contact(3, &raw), Tensor::from_vec(pop)).unwrap();
        let field = bounded_field(&spec, 3, 20, &unit);
        let mut permuted = Vec::new();
        for &p in &perm {
            let start = p * 20 * NUM_CHANNELS;
            permuted.extend_from_slice(&field.values().data()[start..start + 20 * NUM_CHANNELS]);
        }
        let pfield = ParamField::new(Tensor::new(vec![3, 20, NUM_CHANNELS], permuted).unwrap(), *field.bounds()).unwrap();
        let a = run(&spec, &ctx, &field);
        let b = run(&spec, &ctx.permuted(&perm).unwrap(), &pfield);
        for t in 0..20 {
            for (i, &p) in perm.iter().enumerate() {
                let (x, y) = (a.yhat.get(&[t, p]), b.yhat.get(&[t, i]));
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "t={t} patch {p}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn fuzzed_rate_models_stay_nonnegative(seed in any::<u64>(), unit in prop::collection::vec(0.0f64..1.0, 32)) {
        let mut rng = rng_for(seed, stream::FUZZ);
        let text = sample_rate_model(&mut rng);
        let spec = parse(&text).unwrap();
        let ctx = MetapopContext::identity(vec![5e4, 2e3]).unwrap();
        let init = initial_state(&spec, &ctx).unwrap();
        if let Ok(traj) = simulate(&spec, &ctx, &init, &bounded_field(&spec, 2, 30, &unit), 30) {
            for s in &traj.states {
                prop_assert!(s.data().iter().all(|v| *v >= 0.0 && v.is_finite()), "{text}");
            }
        }
    }

    #[test]
    fn printer_round_trips_sampled_programs(seed in any::<u64>()) {
        let mut rng = rng_for(seed, stream::FUZZ);
        let text = sample_program(&mut rng);
        let spec = parse(&text).unwrap();
        let printed = pretty(&spec);
        prop_assert_eq!(parse(&printed).unwrap(), spec);
        prop_assert_eq!(pretty(&parse(&printed).unwrap()), printed);
    }

    #[test]
    fn rmse_is_a_symmetric_nonnegative_discrepancy(
        a in prop::collection::vec(-1e3f64..1e3, 12),
        b in prop::collection::vec(-1e3f64..1e3, 12),
    ) {
        let x = Tensor::new(vec![3, 4], a).unwrap();
        let y = Tensor::new(vec![3, 4], b).unwrap();
        let d = rmse(&x, &y).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, rmse(&y, &x).unwrap());
        prop_assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        prop_assert_eq!(d == 0.0, x == y);
    }

    #[test]
    fn bug_count_matches_direct_count(
        statuses in prop::collection::vec(status_strategy(), 0..60),
        window in 0usize..30,
    ) {
        let mut log = RunLog::default();
        for (i, s) in statuses.iter().enumerate() {
            log.push(match s {
                Status::Ok => RunRecord::ok(i + 1, 1.0),
                other => RunRecord::failed(i + 1, *other, "x"),
            });
        }
        prop_assert_eq!(bug_counts_at(&log, window), naive_bug_count(&statuses, window));
    }

    #[test]
    fn population_keeps_the_k_best(
        scores in prop::collection::vec(0.0f64..100.0, 1..40),
        k in 1usize..6,
    ) {
        let mut memory = RunMemory::default();
        for (i, v) in scores.iter().enumerate() {
            let text = format!("{CANONICAL_SEIRM}# {i}\n");
            memory.insert(Member { g: i + 1, candidate: Candidate::new(text, NetConfig::default()), v: *v }, k);
            prop_assert!(memory.population.len() <= k);
            prop_assert!(memory.population.windows(2).all(|w| (w[0].v, w[0].g) <= (w[1].v, w[1].g)));
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let kept: Vec<f64> = memory.population.iter().map(|m| m.v).collect();
        prop_assert_eq!(kept, sorted[..k.min(sorted.len())].to_vec());
    }

    #[test]
    fn candidate_render_round_trips(hidden in 1usize..=256, rnn in any::<bool>()) {
        let config = NetConfig { hidden, cell: if rnn { CellType::Rnn } else { CellType::Gru } };
        let c = Candidate::new(CANONICAL_SEIRM, config);
        prop_assert_eq!(parse_candidate(&c.render()).unwrap(), c);
    }

    #[test]
    fn intervention_only_scales_later_steps(
        unit in prop::collection::vec(0.0f64..1.0, 24),
        start in 0usize..=12,
        delta in 0.0f64..=1.0,
    ) {
        let spec = canonical();
        let field = bounded_field(&spec, 2, 12, &unit);
        let out = field.apply_intervention(start, delta, &[Channel::Beta], Some(&[1])).unwrap();
        for p in 0..2 {
            for t in 0..12 {
                for c in Channel::ALL {
                    let (x, y) = (field.get(p, t, c), out.get(p, t, c));
                    if p == 1 && t >= start && c == Channel::Beta {
                        prop_assert_eq!(y, x * (1.0 - delta));
                    } else {
                        prop_assert_eq!(y, x);
                    }
                }
            }
        }
    }
}
