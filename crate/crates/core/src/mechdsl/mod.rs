//! The compartmental model language: `.nimm` source text, its syntax tree,
//! a canonical printer and a rule-based static verifier.
//!
//! ```text
//! model seirm
//! compartments S, E, I, R, M
//! params beta, alpha, gamma, delta in [0, 0.2], mor in [0, 0.2]
//! init S = N - 0.001 * N
//! init I = 0.001 * N
//! flow S -> E : foi() * S
//! flow E -> I : alpha * E
//! observe alpha * E
//! ```
//!
//! The full grammar is in `docs/grammar.ebnf`.

pub mod ast;
pub mod fixtures;
pub mod lexer;
pub mod parser;
pub mod pretty;
pub mod sample;
pub mod verify;

pub use ast::{
    BinOp, Builtin, Channel, Endpoint, Expr, Flow, InitDecl, ModelSpec, Observation, ParamDecl,
    DEFAULT_BOUNDS, INFECTIOUS, NUM_CHANNELS, POPULATION, SINK, SOURCE,
};
pub use parser::parse;
pub use pretty::{equations, pretty};
pub use verify::{
    conservation_signature, verify, ConservationSignature, Finding, Role, VerifyConfig,
    VerifyReport, GUARD_EPS,
};
