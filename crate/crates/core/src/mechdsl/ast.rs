use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Span;

/// The eight parameter channels a calibration network can emit, in the
/// storage order of a parameter field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Beta,
    Alpha,
    Gamma,
    Delta,
    Kappa,
    Epsilon,
    Symprob,
    Mor,
}

pub const NUM_CHANNELS: usize = 8;

impl Channel {
    pub const ALL: [Channel; NUM_CHANNELS] = [
        Channel::Beta,
        Channel::Alpha,
        Channel::Gamma,
        Channel::Delta,
        Channel::Kappa,
        Channel::Epsilon,
        Channel::Symprob,
        Channel::Mor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Beta => "beta",
            Channel::Alpha => "alpha",
            Channel::Gamma => "gamma",
            Channel::Delta => "delta",
            Channel::Kappa => "kappa",
            Channel::Epsilon => "epsilon",
            Channel::Symprob => "symprob",
            Channel::Mor => "mor",
        }
    }

    /// Resolves a channel name; `eta` is accepted as an alias of `mor`.
    pub fn from_name(name: &str) -> Option<Channel> {
        Some(match name {
            "beta" => Channel::Beta,
            "alpha" => Channel::Alpha,
            "gamma" => Channel::Gamma,
            "delta" => Channel::Delta,
            "kappa" => Channel::Kappa,
            "epsilon" => Channel::Epsilon,
            "symprob" => Channel::Symprob,
            "mor" | "eta" => Channel::Mor,
            _ => return None,
        })
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Default `[lo, hi]` for channels declared without explicit bounds.
pub const DEFAULT_BOUNDS: (f64, f64) = (0.0, 1.0);

/// Name of the per-patch population inside expressions.
pub const POPULATION: &str = "N";
/// Compartment whose mass drives `foi()`.
pub const INFECTIOUS: &str = "I";
pub const SOURCE: &str = "SOURCE";
pub const SINK: &str = "SINK";

pub const KEYWORDS: [&str; 9] = [
    "model",
    "compartments",
    "params",
    "init",
    "flow",
    "observe",
    "in",
    SOURCE,
    SINK,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    /// Force of infection; `foi()` uses the `beta` channel, `foi(x)` uses `x`
    /// as the transmission rate.
    Foi,
    Min,
    Max,
    Clamp,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [Builtin::Foi, Builtin::Min, Builtin::Max, Builtin::Clamp];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Foi => "foi",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Clamp => "clamp",
        }
    }

    pub fn from_name(name: &str) -> Option<Builtin> {
        Builtin::ALL.into_iter().find(|b| b.name() == name)
    }

    pub fn accepts_arity(self, n: usize) -> bool {
        match self {
            Builtin::Foi => n <= 1,
            Builtin::Min | Builtin::Max => n == 2,
            Builtin::Clamp => n == 3,
        }
    }

    pub fn signature(self) -> &'static str {
        match self {
            Builtin::Foi => "foi() or foi(rate)",
            Builtin::Min => "min(a, b)",
            Builtin::Max => "max(a, b)",
            Builtin::Clamp => "clamp(x, lo, hi)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Ident(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn ident(name: &str) -> Expr {
        Expr::Ident(name.to_string())
    }

    pub fn bin(op: BinOp, l: Expr, r: Expr) -> Expr {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    /// Binding strength used by the printer; atoms are 4.
    pub fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, ..) => op.precedence(),
            Expr::Neg(_) => 3,
            _ => 4,
        }
    }

    /// Calls `f` on this node and every descendant, parents first.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Num(_) | Expr::Ident(_) => {}
            Expr::Neg(e) => e.visit(f),
            Expr::Binary(_, l, r) => {
                l.visit(f);
                r.visit(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.visit(f)),
        }
    }

    pub fn identifiers(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Ident(name) = e {
                out.insert(name.as_str());
            }
        });
        out
    }

    pub fn uses_foi(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, Expr::Call(Builtin::Foi, _)) {
                found = true;
            }
        });
        found
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Compartment(String),
    Source,
    Sink,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Compartment(name) => f.write_str(name),
            Endpoint::Source => f.write_str(SOURCE),
            Endpoint::Sink => f.write_str(SINK),
        }
    }
}

impl Endpoint {
    pub fn compartment(&self) -> Option<&str> {
        match self {
            Endpoint::Compartment(name) => Some(name),
            _ => None,
        }
    }
}

/// Mass moved from `from` to `to` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub from: Endpoint,
    pub to: Endpoint,
    pub rate: Expr,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub channel: Channel,
    pub bounds: Option<(f64, f64)>,
    pub span: Span,
}

impl ParamDecl {
    pub fn bounds_or_default(&self) -> (f64, f64) {
        self.bounds.unwrap_or(DEFAULT_BOUNDS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitDecl {
    pub compartment: String,
    pub expr: Expr,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub expr: Expr,
    pub span: Span,
}

/// A parsed compartmental model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub compartments: Vec<String>,
    pub params: Vec<ParamDecl>,
    pub init: Vec<InitDecl>,
    pub flows: Vec<Flow>,
    pub observation: Option<Observation>,
}

impl ModelSpec {
    pub fn compartment_index(&self, name: &str) -> Option<usize> {
        self.compartments.iter().position(|c| c == name)
    }

    pub fn param(&self, channel: Channel) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.channel == channel)
    }

    pub fn declares(&self, channel: Channel) -> bool {
        self.param(channel).is_some()
    }

    /// Bounds for every channel in storage order; undeclared channels get the default.
    pub fn channel_bounds(&self) -> [(f64, f64); NUM_CHANNELS] {
        let mut out = [DEFAULT_BOUNDS; NUM_CHANNELS];
        for p in &self.params {
            out[p.channel.index()] = p.bounds_or_default();
        }
        out
    }

    /// Compartments with no outgoing flow.
    pub fn is_absorbing(&self, name: &str) -> bool {
        !self
            .flows
            .iter()
            .any(|f| f.from.compartment() == Some(name))
    }

    /// Every expression in declaration order, with a label for messages.
    pub fn expressions(&self) -> Vec<(String, &Expr, Span)> {
        let mut out = Vec::new();
        for i in &self.init {
            out.push((format!("init {}", i.compartment), &i.expr, i.span));
        }
        for f in &self.flows {
            out.push((format!("flow {} -> {}", f.from, f.to), &f.rate, f.span));
        }
        if let Some(o) = &self.observation {
            out.push(("observe".to_string(), &o.expr, o.span));
        }
        out
    }
}
