use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::candidate::{extract_candidate, Candidate};
use super::llm::ChatBackend;
use super::memory::RunMemory;
use super::prompts::{modeling_prompt, PromptBundle};
use crate::calib::{CellType, NetConfig};
use crate::error::{Error, Result, Span};
use crate::mechdsl::fixtures::CANONICAL_SEIRM;
use crate::mechdsl::{parse, pretty, BinOp, Builtin, Channel, Endpoint, Expr, Flow, ModelSpec, ParamDecl, INFECTIOUS};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub text: String,
    /// How the text was produced, for logs.
    pub note: String,
}

pub trait CandidateGenerator {
    fn name(&self) -> &str;
    fn propose(&mut self, bundle: &PromptBundle, memory: &RunMemory, g: usize) -> Result<Proposal>;
}

/// Asks a chat endpoint for the next program.
pub struct LlmGenerator<'a> {
    pub backend: &'a dyn ChatBackend,
    pub hybrid: bool,
}

impl CandidateGenerator for LlmGenerator<'_> {
    fn name(&self) -> &str {
        "llm"
    }

    fn propose(&mut self, bundle: &PromptBundle, memory: &RunMemory, g: usize) -> Result<Proposal> {
        if !bundle.is_complete() {
            return Err(Error::Contract("prompt bundle has an empty part".into()));
        }
        let completion = self
            .backend
            .complete(&bundle.system_prompt(), &modeling_prompt(memory, self.hybrid))?;
        Ok(Proposal {
            text: extract_candidate(&completion)?,
            note: format!("completion for generation {g}"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Edit {
    AddFlow,
    RemoveFlow,
    RewriteRate,
    RewriteObservation,
    BorrowFlow,
    PerturbConfig,
}

const HIDDEN_CHOICES: [usize; 4] = [8, 16, 32, 64];

/// Seeded grammar-level edits of a population member. With an empty
/// population it returns the canonical SEIRM program.
pub struct MutationGenerator {
    rng: ChaCha8Rng,
    hybrid: bool,
}

impl MutationGenerator {
    pub fn new(seed: u64, hybrid: bool) -> Self {
        Self {
            rng: rng_for(seed, stream::MUTATION),
            hybrid,
        }
    }

    /// Index into a best-first list, with weight `n - i` for position `i`.
    fn pick_parent(&mut self, n: usize) -> usize {
        let total = n * (n + 1) / 2;
        let mut r = self.rng.random_range(0..total);
        for i in 0..n {
            let w = n - i;
            if r < w {
                return i;
            }
            r -= w;
        }
        n - 1
    }

    fn channel(&mut self, spec: &ModelSpec) -> Channel {
        let declared: Vec<Channel> = spec.params.iter().map(|p| p.channel).collect();
        if declared.is_empty() || self.rng.random_bool(0.2) {
            *Channel::ALL.choose(&mut self.rng).expect("channels")
        } else {
            *declared.choose(&mut self.rng).expect("nonempty")
        }
    }

    fn mass_action(&mut self, spec: &ModelSpec, from: &Endpoint) -> Expr {
        let p = Expr::ident(self.channel(spec).name());
        match from.compartment() {
            Some(c) => Expr::bin(BinOp::Mul, p, Expr::ident(c)),
            None => p,
        }
    }

    fn endpoint(&mut self, spec: &ModelSpec, outside: Endpoint) -> Endpoint {
        let n = spec.compartments.len();
        let i = self.rng.random_range(0..=n);
        if i == n {
            outside
        } else {
            Endpoint::Compartment(spec.compartments[i].clone())
        }
    }

    fn apply(&mut self, edit: Edit, spec: &mut ModelSpec, config: &mut NetConfig, memory: &RunMemory) -> Option<String> {
        match edit {
            Edit::AddFlow => {
                let from = self.endpoint(spec, Endpoint::Source);
                let to = self.endpoint(spec, Endpoint::Sink);
                if from == to || from.compartment().is_none() && to.compartment().is_none() {
                    return None;
                }
                let rate = self.mass_action(spec, &from);
                let note = format!("add flow {from} -> {to}");
                spec.flows.push(Flow {
                    from,
                    to,
                    rate,
                    span: Span::default(),
                });
                Some(note)
            }
            Edit::RemoveFlow => {
                if spec.flows.len() < 2 {
                    return None;
                }
                let i = self.rng.random_range(0..spec.flows.len());
                let f = spec.flows.remove(i);
                Some(format!("remove flow {} -> {}", f.from, f.to))
            }
            Edit::RewriteRate => {
                if spec.flows.is_empty() {
                    return None;
                }
                let i = self.rng.random_range(0..spec.flows.len());
                let from = spec.flows[i].from.clone();
                let old = spec.flows[i].rate.clone();
                let rate = match self.rng.random_range(0..4) {
                    0 => self.mass_action(spec, &from),
                    1 => swap_channel(&old, self.channel(spec))?,
                    2 => Expr::bin(BinOp::Mul, old.clone(), Expr::ident(self.channel(spec).name())),
                    _ => {
                        let c = from.compartment()?;
                        spec.compartment_index(INFECTIOUS)?;
                        Expr::bin(BinOp::Mul, Expr::Call(Builtin::Foi, vec![]), Expr::ident(c))
                    }
                };
                if rate == old {
                    return None;
                }
                let f = &mut spec.flows[i];
                f.rate = rate;
                Some(format!("rewrite rate of {} -> {}", f.from, f.to))
            }
            Edit::RewriteObservation => {
                let old = spec.observation.as_ref()?.expr.clone();
                let expr = match self.rng.random_range(0..3) {
                    0 => {
                        let into_i: Vec<&Flow> = spec
                            .flows
                            .iter()
                            .filter(|f| f.to.compartment() == Some(INFECTIOUS))
                            .collect();
                        into_i.choose(&mut self.rng)?.rate.clone()
                    }
                    1 => {
                        let c = spec.compartments.choose(&mut self.rng)?.clone();
                        Expr::bin(BinOp::Mul, Expr::ident(self.channel(spec).name()), Expr::ident(&c))
                    }
                    _ => swap_channel(&old, self.channel(spec))?,
                };
                if expr == old {
                    return None;
                }
                spec.observation.as_mut()?.expr = expr;
                Some("rewrite observation".to_string())
            }
            Edit::BorrowFlow => {
                let mut pool = Vec::new();
                for s in &memory.snippets {
                    let Ok(donor) = parse(&s.text) else { continue };
                    for f in donor.flows {
                        let fits = [&f.from, &f.to]
                            .iter()
                            .all(|e| e.compartment().is_none_or(|c| spec.compartment_index(c).is_some()));
                        let present = spec.flows.iter().any(|g| g.from == f.from && g.to == f.to && g.rate == f.rate);
                        if fits && !present {
                            pool.push((s.id.clone(), f));
                        }
                    }
                }
                let (id, f) = pool.choose(&mut self.rng)?.clone();
                let note = format!("borrow flow {} -> {} from {id}", f.from, f.to);
                spec.flows.push(f);
                Some(note)
            }
            Edit::PerturbConfig => {
                if self.rng.random_bool(0.5) {
                    let choices: Vec<usize> = HIDDEN_CHOICES.iter().copied().filter(|&h| h != config.hidden).collect();
                    config.hidden = *choices.choose(&mut self.rng)?;
                    Some(format!("hidden = {}", config.hidden))
                } else {
                    config.cell = match config.cell {
                        CellType::Gru => CellType::Rnn,
                        CellType::Rnn => CellType::Gru,
                    };
                    Some(format!("cell = {:?}", config.cell).to_lowercase())
                }
            }
        }
    }
}

/// Replaces one parameter identifier in `e` with `to`; `None` when there is none.
fn swap_channel(e: &Expr, to: Channel) -> Option<Expr> {
    let mut done = false;
    let out = replace_first(e, &mut |x| match x {
        Expr::Ident(name) if Channel::from_name(name).is_some() => Some(Expr::ident(to.name())),
        _ => None,
    }, &mut done);
    done.then_some(out)
}

fn replace_first(e: &Expr, f: &mut dyn FnMut(&Expr) -> Option<Expr>, done: &mut bool) -> Expr {
    if *done {
        return e.clone();
    }
    if let Some(new) = f(e) {
        *done = true;
        return new;
    }
    match e {
        Expr::Neg(inner) => Expr::Neg(Box::new(replace_first(inner, f, done))),
        Expr::Binary(op, l, r) => {
            let l = replace_first(l, f, done);
            let r = replace_first(r, f, done);
            Expr::bin(*op, l, r)
        }
        Expr::Call(b, args) => Expr::Call(*b, args.iter().map(|a| replace_first(a, f, done)).collect()),
        other => other.clone(),
    }
}

/// Declares every parameter channel an expression mentions.
fn declare_used(spec: &mut ModelSpec) {
    let mut used = Vec::new();
    for (_, e, _) in spec.expressions() {
        for name in e.identifiers() {
            if let Some(c) = Channel::from_name(name) {
                used.push(c);
            }
        }
        if e.uses_foi() {
            used.push(Channel::Beta);
        }
    }
    for c in used {
        if !spec.declares(c) {
            spec.params.push(ParamDecl {
                channel: c,
                bounds: None,
                span: Span::default(),
            });
        }
    }
}

impl CandidateGenerator for MutationGenerator {
    fn name(&self) -> &str {
        "mutation"
    }

    fn propose(&mut self, _bundle: &PromptBundle, memory: &RunMemory, _g: usize) -> Result<Proposal> {
        if memory.population.is_empty() {
            return Ok(Proposal {
                text: Candidate::new(CANONICAL_SEIRM, NetConfig::default()).render(),
                note: "cold start".to_string(),
            });
        }
        let idx = self.pick_parent(memory.population.len());
        let parent = &memory.population[idx];
        let base = parse(&parent.candidate.spec_text)
            .map_err(|e| Error::Generator(format!("population member does not parse: {e}")))?;
        let mut edits = vec![
            Edit::AddFlow,
            Edit::RemoveFlow,
            Edit::RewriteRate,
            Edit::RewriteObservation,
            Edit::BorrowFlow,
        ];
        if self.hybrid {
            edits.push(Edit::PerturbConfig);
        }
        for _ in 0..32 {
            let edit = *edits.choose(&mut self.rng).expect("edits");
            let mut spec = base.clone();
            let mut config = parent.candidate.config;
            if let Some(what) = self.apply(edit, &mut spec, &mut config, memory) {
                declare_used(&mut spec);
                return Ok(Proposal {
                    text: Candidate::new(pretty(&spec), config).render(),
                    note: format!("{what} on generation {}", parent.g),
                });
            }
        }
        Err(Error::Generator("no applicable edit".into()))
    }
}
