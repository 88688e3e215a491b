//! Seeded program generators for round-trip and interpreter fuzzing.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::ast::*;
use super::pretty::{expr as show, number};

const NAMES: [&str; 12] = ["S", "E", "I", "R", "M", "A", "H", "Q", "V", "D", "C1", "X_2"];

fn literal<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(0..20) as f64,
        1 => rng.random_range(0.0..1.0),
        2 => rng.random_range(0.0..1.0) * 10f64.powi(rng.random_range(-9..9)),
        _ => [1e-8, 0.5, 0.001, 2.5][rng.random_range(0..4)],
    }
}

fn pick_subset<R: Rng>(rng: &mut R, pool: &[&'static str], min: usize) -> Vec<&'static str> {
    let mut v = pool.to_vec();
    v.shuffle(rng);
    let n = rng.random_range(min..=pool.len());
    v.truncate(n);
    v
}

fn random_expr<R: Rng>(rng: &mut R, idents: &[String], depth: u32) -> Expr {
    let leaf = depth == 0 || rng.random_bool(0.3);
    if leaf {
        return if idents.is_empty() || rng.random_bool(0.3) {
            Expr::Num(literal(rng))
        } else {
            Expr::Ident(idents.choose(rng).unwrap().clone())
        };
    }
    match rng.random_range(0..10) {
        0 => Expr::Neg(Box::new(random_expr(rng, idents, depth - 1))),
        1..=5 => {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][rng.random_range(0..4)];
            Expr::bin(op, random_expr(rng, idents, depth - 1), random_expr(rng, idents, depth - 1))
        }
        _ => {
            let b = *Builtin::ALL.choose(rng).unwrap();
            let n = match b {
                Builtin::Foi => rng.random_range(0..=1),
                Builtin::Min | Builtin::Max => 2,
                Builtin::Clamp => 3,
            };
            Expr::Call(b, (0..n).map(|_| random_expr(rng, idents, depth - 1)).collect())
        }
    }
}

/// A syntactically valid program with arbitrary expressions. It need not
/// verify; it exercises the parser and printer.
pub fn sample_program<R: Rng>(rng: &mut R) -> String {
    let compartments = pick_subset(rng, &NAMES, 0);
    let channels: Vec<Channel> = {
        let mut c = Channel::ALL.to_vec();
        c.shuffle(rng);
        c.truncate(rng.random_range(0..=NUM_CHANNELS));
        c
    };
    let mut idents: Vec<String> = compartments.iter().map(|s| s.to_string()).collect();
    idents.extend(channels.iter().map(|c| c.name().to_string()));
    idents.push(POPULATION.to_string());

    let mut out = String::new();
    if rng.random_bool(0.7) {
        out.push_str(&format!("model m{}\n", rng.random_range(0..1000)));
    }
    if !compartments.is_empty() {
        out.push_str(&format!("compartments {}\n", compartments.join(", ")));
    }
    if !channels.is_empty() {
        let decls: Vec<String> = channels
            .iter()
            .map(|c| {
                if rng.random_bool(0.5) {
                    let lo = rng.random_range(0.0..0.5);
                    let hi = lo + rng.random_range(0.01..2.0);
                    format!("{c} in [{}, {}]", number(lo), number(hi))
                } else {
                    c.to_string()
                }
            })
            .collect();
        out.push_str(&format!("params {}\n", decls.join(", ")));
    }
    for c in &compartments {
        if rng.random_bool(0.4) {
            out.push_str(&format!("init {c} = {}\n", show(&random_expr(rng, &idents, 2))));
        }
    }
    let endpoints: Vec<String> = compartments
        .iter()
        .map(|s| s.to_string())
        .chain([SOURCE.to_string(), SINK.to_string()])
        .collect();
    for _ in 0..rng.random_range(0..8) {
        let from = endpoints[..endpoints.len() - 1].choose(rng).unwrap();
        let to = endpoints
            .iter()
            .filter(|e| *e != SOURCE)
            .collect::<Vec<_>>()
            .choose(rng)
            .copied()
            .unwrap();
        out.push_str(&format!("flow {from} -> {to} : {}\n", show(&random_expr(rng, &idents, 4))));
    }
    if rng.random_bool(0.9) {
        out.push_str(&format!("observe {}\n", show(&random_expr(rng, &idents, 3))));
    }
    out
}

fn coefficient<R: Rng>(rng: &mut R, params: &[Channel]) -> Expr {
    if params.is_empty() || rng.random_bool(0.25) {
        Expr::Num((rng.random_range(0.0..1.0f64) * 100.0).round() / 100.0)
    } else {
        let p = params.choose(rng).unwrap();
        let e = Expr::ident(p.name());
        match rng.random_range(0..5) {
            0 => Expr::bin(BinOp::Mul, e, Expr::ident(params.choose(rng).unwrap().name())),
            1 => Expr::bin(BinOp::Sub, Expr::Num(1.0), e),
            2 => Expr::Call(Builtin::Clamp, vec![e, Expr::Num(0.0), Expr::Num(0.9)]),
            _ => e,
        }
    }
}

/// A mass-action style model: every rate is linear in one state (or the
/// population for imports), with coefficients drawn from declared channels,
/// literals in [0, 1], foi() and guarded ratios. These are the programs the
/// interpreter is fuzzed with.
pub fn sample_rate_model<R: Rng>(rng: &mut R) -> String {
    let compartments = {
        let mut c = pick_subset(rng, &NAMES, 1);
        c.truncate(6);
        c
    };
    let mut params: Vec<Channel> = Channel::ALL.to_vec();
    params.shuffle(rng);
    params.truncate(rng.random_range(1..=NUM_CHANNELS));
    let has_foi = compartments.contains(&INFECTIOUS);
    let has_beta = has_foi && params.contains(&Channel::Beta);

    let mut out = format!("model fuzz\ncompartments {}\n", compartments.join(", "));
    let decls: Vec<String> = params
        .iter()
        .map(|c| {
            let hi = [1.0, 0.5, 0.2][rng.random_range(0..3)];
            format!("{c} in [0, {}]", number(hi))
        })
        .collect();
    out.push_str(&format!("params {}\n", decls.join(", ")));

    // Split N across a random subset of compartments with literal fractions.
    let seeded = rng.random_range(1..=compartments.len());
    let mut remaining = 1.0f64;
    for c in &compartments[1..seeded] {
        let frac = (rng.random_range(0.0..remaining * 0.5) * 1000.0).floor() / 1000.0;
        remaining -= frac;
        out.push_str(&format!("init {c} = {} * N\n", number(frac)));
    }
    let assigned = 1.0 - remaining;
    out.push_str(&format!(
        "init {} = N - {} * N\n",
        compartments[0],
        number(assigned)
    ));

    let ends: Vec<&str> = compartments.iter().copied().chain([SOURCE, SINK]).collect();
    for _ in 0..rng.random_range(0..8) {
        let from = *ends[..ends.len() - 1].choose(rng).unwrap();
        let to = *ends.iter().filter(|e| **e != SOURCE && **e != from).collect::<Vec<_>>().choose(rng).unwrap();
        let state = if from == SOURCE {
            Expr::bin(BinOp::Mul, Expr::Num(0.001), Expr::ident(POPULATION))
        } else {
            Expr::ident(from)
        };
        let infected = compartments.choose(rng).unwrap();
        let rate = match rng.random_range(0..6) {
            0 if has_beta => Expr::bin(BinOp::Mul, Expr::Call(Builtin::Foi, vec![]), state),
            1 if has_foi => Expr::bin(
                BinOp::Mul,
                Expr::Call(Builtin::Foi, vec![coefficient(rng, &params)]),
                state,
            ),
            2 => Expr::bin(
                BinOp::Mul,
                Expr::bin(
                    BinOp::Mul,
                    coefficient(rng, &params),
                    Expr::bin(
                        BinOp::Div,
                        Expr::ident(infected),
                        Expr::Call(Builtin::Max, vec![Expr::ident(POPULATION), Expr::Num(1e-8)]),
                    ),
                ),
                state,
            ),
            3 => Expr::bin(
                BinOp::Add,
                Expr::bin(BinOp::Mul, coefficient(rng, &params), state.clone()),
                Expr::bin(BinOp::Mul, coefficient(rng, &params), state),
            ),
            4 => Expr::Call(
                Builtin::Min,
                vec![Expr::bin(BinOp::Mul, coefficient(rng, &params), state.clone()), state],
            ),
            _ => Expr::bin(BinOp::Mul, coefficient(rng, &params), state),
        };
        out.push_str(&format!("flow {from} -> {to} : {}\n", show(&rate)));
    }
    let obs = match rng.random_range(0..3) {
        0 => Expr::ident(compartments.choose(rng).unwrap()),
        1 => Expr::bin(
            BinOp::Mul,
            coefficient(rng, &params),
            Expr::ident(compartments.choose(rng).unwrap()),
        ),
        _ => Expr::bin(
            BinOp::Add,
            Expr::ident(compartments.choose(rng).unwrap()),
            Expr::ident(compartments.choose(rng).unwrap()),
        ),
    };
    out.push_str(&format!("observe {}\n", show(&obs)));
    out
}
