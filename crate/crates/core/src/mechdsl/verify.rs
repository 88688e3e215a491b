use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ast::*;
use crate::error::Span;

/// Smallest constant accepted as a division guard.
pub const GUARD_EPS: f64 = 1e-8;

/// Where a parameter channel may appear (rule W3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Only as an argument of `foi(...)`.
    InsideFoi,
    /// Only in rates of flows leaving the named compartment.
    FlowsFrom(String),
    /// Only in rates of flows into SINK or into a compartment with no outflow.
    FlowsToSink,
}

pub fn default_role_table() -> BTreeMap<Channel, Role> {
    BTreeMap::from([
        (Channel::Beta, Role::InsideFoi),
        (Channel::Gamma, Role::FlowsFrom("I".to_string())),
        (Channel::Mor, Role::FlowsToSink),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub guard_eps: f64,
    pub role_table: BTreeMap<Channel, Role>,
    /// Populations at which init expressions are checked to sum to `N`.
    pub probe_populations: Vec<f64>,
    /// Warning codes that the agent loop treats as rejections.
    pub reject_warnings: BTreeSet<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            guard_eps: GUARD_EPS,
            role_table: default_role_table(),
            probe_populations: vec![1.0, 1000.0, 123_456.0],
            reject_warnings: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub code: String,
    pub msg: String,
    pub span: Span,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        !self.errors.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.errors.iter().chain(&self.warnings).any(|f| f.code == code)
    }

    pub fn codes(&self) -> Vec<&str> {
        self.errors
            .iter()
            .chain(&self.warnings)
            .map(|f| f.code.as_str())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Sink<'a> {
    report: &'a mut VerifyReport,
}

impl Sink<'_> {
    fn error(&mut self, code: &str, span: Span, msg: String) {
        self.report.errors.push(Finding {
            code: code.to_string(),
            msg,
            span,
        });
    }

    fn warn(&mut self, code: &str, span: Span, msg: String) {
        self.report.warnings.push(Finding {
            code: code.to_string(),
            msg,
            span,
        });
    }
}

/// Runs every rule and collects findings. Pure and deterministic.
pub fn verify(spec: &ModelSpec, config: &VerifyConfig) -> VerifyReport {
    let mut report = VerifyReport::default();
    let mut sink = Sink { report: &mut report };
    check_identifiers(spec, &mut sink);
    check_divisions(spec, config, &mut sink);
    check_init(spec, config, &mut sink);
    check_observation(spec, &mut sink);
    check_parallel_flows(spec, &mut sink);
    check_absolute_terms(spec, &mut sink);
    check_roles(spec, config, &mut sink);
    check_signs(spec, &mut sink);
    report
}

fn check_identifiers(spec: &ModelSpec, sink: &mut Sink) {
    for flow in &spec.flows {
        for end in [&flow.from, &flow.to] {
            if let Endpoint::Compartment(name) = end {
                if spec.compartment_index(name).is_none() {
                    sink.error("E1", flow.span, format!("flow endpoint `{name}` is not a declared compartment"));
                }
            }
        }
    }
    for init in &spec.init {
        if spec.compartment_index(&init.compartment).is_none() {
            sink.error(
                "E1",
                init.span,
                format!("init targets undeclared compartment `{}`", init.compartment),
            );
        }
    }
    for (label, expr, span) in spec.expressions() {
        for name in expr.identifiers() {
            let known = name == POPULATION
                || name == SOURCE
                || name == SINK
                || spec.compartment_index(name).is_some()
                || Channel::from_name(name).is_some_and(|c| spec.declares(c));
            if !known {
                sink.error("E1", span, format!("{label}: undeclared identifier `{name}`"));
            }
        }
        let mut implicit_beta = false;
        expr.visit(&mut |e| {
            if matches!(e, Expr::Call(Builtin::Foi, args) if args.is_empty()) {
                implicit_beta = true;
            }
        });
        if implicit_beta && !spec.declares(Channel::Beta) {
            sink.error("E1", span, format!("{label}: foi() reads `beta`, which is not declared"));
        }
        if expr.uses_foi() && spec.compartment_index(INFECTIOUS).is_none() {
            sink.error(
                "E1",
                span,
                format!("{label}: foi() reads compartment `{INFECTIOUS}`, which is not declared"),
            );
        }
    }
}

/// A denominator is guarded when it is `max(x, c)` (either order) with a
/// literal `c >= eps`, or is itself a literal of magnitude `>= eps`.
pub fn is_guarded(denominator: &Expr, eps: f64) -> bool {
    match denominator {
        Expr::Num(c) => c.abs() >= eps,
        Expr::Call(Builtin::Max, args) => args
            .iter()
            .any(|a| matches!(a, Expr::Num(c) if *c >= eps)),
        _ => false,
    }
}

fn check_divisions(spec: &ModelSpec, config: &VerifyConfig, sink: &mut Sink) {
    for (label, expr, span) in spec.expressions() {
        expr.visit(&mut |e| {
            if let Expr::Binary(BinOp::Div, _, d) = e {
                if !is_guarded(d, config.guard_eps) {
                    sink.error(
                        "E2",
                        span,
                        format!(
                            "{label}: denominator `{}` must be written max(·, {})",
                            super::pretty::expr(d),
                            super::pretty::number(config.guard_eps)
                        ),
                    );
                }
            }
        });
    }
}

fn eval_init(expr: &Expr, n: f64) -> Option<f64> {
    Some(match expr {
        Expr::Num(v) => *v,
        Expr::Ident(name) if name == POPULATION => n,
        Expr::Ident(_) => return None,
        Expr::Neg(e) => -eval_init(e, n)?,
        Expr::Binary(op, l, r) => {
            let (a, b) = (eval_init(l, n)?, eval_init(r, n)?);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
            }
        }
        Expr::Call(Builtin::Min, a) => eval_init(&a[0], n)?.min(eval_init(&a[1], n)?),
        Expr::Call(Builtin::Max, a) => eval_init(&a[0], n)?.max(eval_init(&a[1], n)?),
        Expr::Call(Builtin::Clamp, a) => {
            let x = eval_init(&a[0], n)?;
            x.max(eval_init(&a[1], n)?).min(eval_init(&a[2], n)?)
        }
        Expr::Call(Builtin::Foi, _) => return None,
    })
}

/// Initial masses for a patch of population `n`, in compartment order.
/// Compartments without an `init` line start empty.
pub fn init_masses(spec: &ModelSpec, n: f64) -> Option<Vec<f64>> {
    let mut out = vec![0.0; spec.compartments.len()];
    for init in &spec.init {
        let idx = spec.compartment_index(&init.compartment)?;
        out[idx] = eval_init(&init.expr, n)?;
    }
    Some(out)
}

fn check_init(spec: &ModelSpec, config: &VerifyConfig, sink: &mut Sink) {
    let mut seen = BTreeSet::new();
    for init in &spec.init {
        if !seen.insert(init.compartment.as_str()) {
            sink.error("E3", init.span, format!("`{}` initialized twice", init.compartment));
        }
        for name in init.expr.identifiers() {
            if name != POPULATION {
                sink.error(
                    "E3",
                    init.span,
                    format!("init {}: only `N` and literals may appear, found `{name}`", init.compartment),
                );
            }
        }
        if init.expr.uses_foi() {
            sink.error("E3", init.span, format!("init {}: foi() is not available at t=0", init.compartment));
        }
    }
    if sink.report.errors.iter().any(|f| f.code == "E3") {
        return;
    }
    let span = spec.init.first().map(|i| i.span).unwrap_or_default();
    for &n in &config.probe_populations {
        let Some(masses) = init_masses(spec, n) else {
            return;
        };
        for (name, m) in spec.compartments.iter().zip(&masses) {
            if !m.is_finite() || *m < 0.0 {
                sink.error("E3", span, format!("init {name} is {m} at N={n}; masses must be finite and >= 0"));
                return;
            }
        }
        let total: f64 = masses.iter().sum();
        if (total - n).abs() > 1e-9 * n.abs().max(1.0) {
            sink.error("E3", span, format!("init masses sum to {total} at N={n}; expected N"));
            return;
        }
    }
}

fn check_observation(spec: &ModelSpec, sink: &mut Sink) {
    match &spec.observation {
        None => sink.error("E4", Span::default(), "no `observe` expression".to_string()),
        Some(obs) => {
            let ids = obs.expr.identifiers();
            for sym in [SINK, SOURCE] {
                if ids.contains(sym) {
                    sink.error("E4", obs.span, format!("observation references `{sym}`, which holds no state"));
                }
            }
        }
    }
    for (label, expr, span) in spec.expressions() {
        if label == "observe" {
            continue;
        }
        let ids = expr.identifiers();
        for sym in [SINK, SOURCE] {
            if ids.contains(sym) {
                sink.error("E1", span, format!("{label}: `{sym}` is only valid as a flow endpoint"));
            }
        }
    }
}

fn check_parallel_flows(spec: &ModelSpec, sink: &mut Sink) {
    let mut seen: BTreeSet<(&Endpoint, &Endpoint)> = BTreeSet::new();
    for flow in &spec.flows {
        if !seen.insert((&flow.from, &flow.to)) {
            sink.warn(
                "W1",
                flow.span,
                format!("parallel flow {} -> {}; merge the rates into one flow", flow.from, flow.to),
            );
        }
    }
}

/// Splits a rate into its additive terms, pushing negation inside.
pub fn additive_terms(expr: &Expr) -> Vec<&Expr> {
    match expr {
        Expr::Binary(BinOp::Add | BinOp::Sub, l, r) => {
            let mut out = additive_terms(l);
            out.extend(additive_terms(r));
            out
        }
        Expr::Neg(inner) => additive_terms(inner),
        other => vec![other],
    }
}

fn check_absolute_terms(spec: &ModelSpec, sink: &mut Sink) {
    for flow in &spec.flows {
        for term in additive_terms(&flow.rate) {
            let ids = term.identifiers();
            let has_param = ids.iter().any(|n| Channel::from_name(n).is_some()) || term.uses_foi();
            let has_mass = ids
                .iter()
                .any(|n| *n == POPULATION || spec.compartment_index(n).is_some());
            if has_param && !has_mass {
                sink.warn(
                    "W2",
                    flow.span,
                    format!(
                        "flow {} -> {}: rate term `{}` has no state factor, so a bounded rate is moved as an absolute mass",
                        flow.from,
                        flow.to,
                        super::pretty::expr(term)
                    ),
                );
            }
        }
    }
}

/// Channels mentioned in `expr`, with whether each use sits inside `foi(...)`.
fn channel_uses(expr: &Expr, inside_foi: bool, out: &mut Vec<(Channel, bool)>) {
    match expr {
        Expr::Num(_) => {}
        Expr::Ident(name) => {
            if let Some(c) = Channel::from_name(name) {
                out.push((c, inside_foi));
            }
        }
        Expr::Neg(e) => channel_uses(e, inside_foi, out),
        Expr::Binary(_, l, r) => {
            channel_uses(l, inside_foi, out);
            channel_uses(r, inside_foi, out);
        }
        Expr::Call(b, args) => {
            let inner = inside_foi || *b == Builtin::Foi;
            args.iter().for_each(|a| channel_uses(a, inner, out));
        }
    }
}

fn check_roles(spec: &ModelSpec, config: &VerifyConfig, sink: &mut Sink) {
    let mut contexts: Vec<(Option<&Flow>, &Expr, Span)> =
        spec.flows.iter().map(|f| (Some(f), &f.rate, f.span)).collect();
    if let Some(obs) = &spec.observation {
        contexts.push((None, &obs.expr, obs.span));
    }
    for (flow, expr, span) in contexts {
        let mut uses = Vec::new();
        channel_uses(expr, false, &mut uses);
        let mut reported = BTreeSet::new();
        for (channel, inside_foi) in uses {
            let Some(role) = config.role_table.get(&channel) else {
                continue;
            };
            let allowed = match role {
                Role::InsideFoi => inside_foi,
                Role::FlowsFrom(src) => flow.is_some_and(|f| f.from.compartment() == Some(src)),
                Role::FlowsToSink => flow.is_some_and(|f| match &f.to {
                    Endpoint::Sink => true,
                    Endpoint::Compartment(c) => spec.is_absorbing(c),
                    Endpoint::Source => false,
                }),
            };
            if !allowed && reported.insert(channel) {
                let place = match flow {
                    Some(f) => format!("flow {} -> {}", f.from, f.to),
                    None => "observe".to_string(),
                };
                let rule = match role {
                    Role::InsideFoi => "only inside foi(...)".to_string(),
                    Role::FlowsFrom(src) => format!("only on flows out of {src}"),
                    Role::FlowsToSink => "only on flows into SINK or an absorbing compartment".to_string(),
                };
                sink.warn("W3", span, format!("{place}: `{channel}` is used {rule}"));
            }
        }
    }
}

/// Closed interval arithmetic with the convention `0 * inf = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    const ANY: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    const NONNEG: Interval = Interval {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    fn mul(self, o: Interval) -> Interval {
        let p = |a: f64, b: f64| if a == 0.0 || b == 0.0 { 0.0 } else { a * b };
        let c = [p(self.lo, o.lo), p(self.lo, o.hi), p(self.hi, o.lo), p(self.hi, o.hi)];
        Interval {
            lo: c.iter().cloned().fold(f64::INFINITY, f64::min),
            hi: c.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Sound range of `expr` given nonnegative states and declared bounds.
pub fn interval(spec: &ModelSpec, expr: &Expr) -> Interval {
    match expr {
        Expr::Num(v) => Interval::point(*v),
        Expr::Ident(name) => {
            if let Some(c) = Channel::from_name(name) {
                let (lo, hi) = spec
                    .param(c)
                    .map(|p| p.bounds_or_default())
                    .unwrap_or(DEFAULT_BOUNDS);
                Interval { lo, hi }
            } else if name == POPULATION || spec.compartment_index(name).is_some() {
                Interval::NONNEG
            } else {
                Interval::ANY
            }
        }
        Expr::Neg(e) => {
            let i = interval(spec, e);
            Interval { lo: -i.hi, hi: -i.lo }
        }
        Expr::Binary(op, l, r) => {
            let (a, b) = (interval(spec, l), interval(spec, r));
            match op {
                BinOp::Add => Interval { lo: a.lo + b.lo, hi: a.hi + b.hi },
                BinOp::Sub => Interval { lo: a.lo - b.hi, hi: a.hi - b.lo },
                BinOp::Mul => a.mul(b),
                BinOp::Div => {
                    if b.lo > 0.0 || b.hi < 0.0 {
                        a.mul(Interval { lo: 1.0 / b.hi, hi: 1.0 / b.lo })
                    } else {
                        Interval::ANY
                    }
                }
            }
        }
        Expr::Call(Builtin::Foi, args) => {
            let rate = args
                .first()
                .map(|a| interval(spec, a))
                .unwrap_or(Interval::NONNEG);
            if rate.lo >= 0.0 {
                Interval::NONNEG
            } else {
                Interval::ANY
            }
        }
        Expr::Call(Builtin::Min, args) => {
            let (a, b) = (interval(spec, &args[0]), interval(spec, &args[1]));
            Interval { lo: a.lo.min(b.lo), hi: a.hi.min(b.hi) }
        }
        Expr::Call(Builtin::Max, args) => {
            let (a, b) = (interval(spec, &args[0]), interval(spec, &args[1]));
            Interval { lo: a.lo.max(b.lo), hi: a.hi.max(b.hi) }
        }
        Expr::Call(Builtin::Clamp, args) => {
            let x = interval(spec, &args[0]);
            let lo = interval(spec, &args[1]);
            let hi = interval(spec, &args[2]);
            Interval {
                lo: x.lo.max(lo.lo).min(hi.lo),
                hi: x.hi.max(lo.hi).min(hi.hi),
            }
        }
    }
}

fn check_signs(spec: &ModelSpec, sink: &mut Sink) {
    for flow in &spec.flows {
        let range = interval(spec, &flow.rate);
        if range.lo.is_nan() || range.lo < 0.0 {
            sink.warn(
                "W4",
                flow.span,
                format!(
                    "flow {} -> {}: rate `{}` is not provably nonnegative (lower bound {})",
                    flow.from,
                    flow.to,
                    super::pretty::expr(&flow.rate),
                    range.lo
                ),
            );
        }
    }
}

/// Whether total mass is invariant, and the open terms when it is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationSignature {
    pub closed: bool,
    pub source_terms: Vec<String>,
    pub sink_terms: Vec<String>,
}

pub fn conservation_signature(spec: &ModelSpec) -> ConservationSignature {
    let describe = |f: &Flow| format!("{} -> {} : {}", f.from, f.to, super::pretty::expr(&f.rate));
    let source_terms: Vec<String> = spec
        .flows
        .iter()
        .filter(|f| f.from == Endpoint::Source)
        .map(describe)
        .collect();
    let sink_terms: Vec<String> = spec
        .flows
        .iter()
        .filter(|f| f.to == Endpoint::Sink)
        .map(describe)
        .collect();
    ConservationSignature {
        closed: source_terms.is_empty() && sink_terms.is_empty(),
        source_terms,
        sink_terms,
    }
}
