use std::cell::RefCell;

use super::{MetapopContext, ParamField, StateTrajectory};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mechdsl::verify::init_masses;
use crate::mechdsl::{BinOp, Builtin, Channel, Endpoint, Expr, ModelSpec, GUARD_EPS, NUM_CHANNELS, POPULATION};

pub use crate::mechdsl::ast::INFECTIOUS;

/// `(I_eff, N_eff)` with `I_eff_j = sum_i C[i,j] I[i]` and likewise for `N`.
pub fn effective_infections(ctx: &MetapopContext, infected: &Tensor) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let ct = tape.constant(ctx.contact().clone()).transpose()?;
    let i_eff = contract(ct, tape.constant(infected.clone()))?;
    let n_eff = contract(ct, tape.constant(ctx.population().clone()))?;
    Ok((i_eff.value(), n_eff.value()))
}

/// Per-patch transmission `beta_j * I_eff_j / max(N_eff_j, eps)`.
pub fn force_of_infection(beta: &Tensor, ctx: &MetapopContext, infected: &Tensor) -> Result<Tensor> {
    let (i_eff, n_eff) = effective_infections(ctx, infected)?;
    if beta.shape() != i_eff.shape() {
        return Err(Error::Shape(format!("beta {:?} for {:?} patches", beta.shape(), i_eff.shape())));
    }
    let data = beta
        .data()
        .iter()
        .zip(i_eff.data())
        .zip(n_eff.data())
        .map(|((b, i), n)| b * i / n.max(GUARD_EPS))
        .collect();
    Ok(Tensor::from_vec(data))
}

/// `m @ v` for a rank-1 `v`.
fn contract<'t>(m: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let l = v.shape()[0];
    m.matmul(v.reshape(&[l, 1])?)?.reshape(&[l])
}

/// Initial masses `(compartments, patches)` from the model's init lines.
pub fn initial_state(spec: &ModelSpec, ctx: &MetapopContext) -> Result<Tensor> {
    let (k, l) = (spec.compartments.len(), ctx.num_patches());
    let mut out = Tensor::zeros(&[k, l]);
    for (p, &n) in ctx.population().data().iter().enumerate() {
        let masses = init_masses(spec, n)
            .ok_or_else(|| Error::Contract("init expressions may only use N and literals".into()))?;
        for (c, m) in masses.into_iter().enumerate() {
            out.set(&[c, p], m);
        }
    }
    Ok(out)
}

struct Frame<'t> {
    tape: &'t Tape,
    contact: Var<'t>,
    contact_t: Var<'t>,
    population: Var<'t>,
    n_eff: Var<'t>,
    zeros: Var<'t>,
    infectious: Option<usize>,
}

impl<'t> Frame<'t> {
    fn new(tape: &'t Tape, spec: &ModelSpec, ctx: &MetapopContext) -> Result<Self> {
        let contact = tape.constant(ctx.contact().clone());
        let contact_t = contact.transpose()?;
        let population = tape.constant(ctx.population().clone());
        let n_eff = contract(contact_t, population)?.maximum(tape.scalar(GUARD_EPS))?;
        Ok(Self {
            tape,
            contact,
            contact_t,
            population,
            n_eff,
            zeros: tape.constant(Tensor::zeros(&[ctx.num_patches()])),
            infectious: spec.compartment_index(INFECTIOUS),
        })
    }
}

struct Env<'a, 't> {
    frame: &'a Frame<'t>,
    spec: &'a ModelSpec,
    states: &'a [Var<'t>],
    params: &'a [Option<Var<'t>>; NUM_CHANNELS],
    foi: RefCell<Option<Var<'t>>>,
}

impl<'t> Env<'_, 't> {
    fn foi(&self, rate: Var<'t>) -> Result<Var<'t>> {
        let idx = self
            .frame
            .infectious
            .ok_or_else(|| Error::Contract(format!("foi() needs a compartment named {INFECTIOUS}")))?;
        let i_eff = contract(self.frame.contact_t, self.states[idx])?;
        let beta_eff = rate.mul(i_eff)?.div(self.frame.n_eff)?;
        contract(self.frame.contact, beta_eff)
    }

    fn eval(&self, e: &Expr) -> Result<Var<'t>> {
        let tape = self.frame.tape;
        Ok(match e {
            Expr::Num(v) => tape.scalar(*v),
            Expr::Ident(name) => {
                if name == POPULATION {
                    self.frame.population
                } else if let Some(k) = self.spec.compartment_index(name) {
                    self.states[k]
                } else if let Some(c) = Channel::from_name(name) {
                    self.params[c.index()]
                        .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))?
                } else {
                    return Err(Error::Contract(format!("unknown identifier `{name}`")));
                }
            }
            Expr::Neg(inner) => self.eval(inner)?.neg(),
            Expr::Binary(op, l, r) => {
                let (a, b) = (self.eval(l)?, self.eval(r)?);
                match op {
                    BinOp::Add => a.add(b)?,
                    BinOp::Sub => a.sub(b)?,
                    BinOp::Mul => a.mul(b)?,
                    BinOp::Div => a.div(b)?,
                }
            }
            Expr::Call(Builtin::Foi, args) => match args.first() {
                Some(rate) => {
                    let rate = self.eval(rate)?;
                    self.foi(rate)?
                }
                None => {
                    if let Some(v) = *self.foi.borrow() {
                        return Ok(v);
                    }
                    let beta = self.params[Channel::Beta.index()]
                        .ok_or_else(|| Error::Contract("foi() needs `beta`".into()))?;
                    let v = self.foi(beta)?;
                    *self.foi.borrow_mut() = Some(v);
                    v
                }
            },
            Expr::Call(Builtin::Min, a) => self.eval(&a[0])?.minimum(self.eval(&a[1])?)?,
            Expr::Call(Builtin::Max, a) => self.eval(&a[0])?.maximum(self.eval(&a[1])?)?,
            Expr::Call(Builtin::Clamp, a) => self
                .eval(&a[0])?
                .maximum(self.eval(&a[1])?)?
                .minimum(self.eval(&a[2])?)?,
        })
    }

    /// Evaluates to one value per patch.
    fn eval_patchwise(&self, e: &Expr) -> Result<Var<'t>> {
        let v = self.eval(e)?;
        if v.shape() == [1] {
            v.add(self.frame.zeros)
        } else {
            Ok(v)
        }
    }
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericGuard(msg) | Error::Contract(msg) => Error::SimDivergence { step, msg },
        other => other,
    }
}

/// One Euler step. Returns the observation for this step, the next state and
/// the mass removed per patch by clamping at zero.
fn advance<'t>(
    frame: &Frame<'t>,
    spec: &ModelSpec,
    states: &[Var<'t>],
    params: &[Option<Var<'t>>; NUM_CHANNELS],
    t: usize,
) -> Result<(Var<'t>, Vec<Var<'t>>, Vec<f64>)> {
    let env = Env {
        frame,
        spec,
        states,
        params,
        foi: RefCell::new(None),
    };
    let observation = spec
        .observation
        .as_ref()
        .ok_or_else(|| Error::Contract("spec has no observation".into()))?;
    let yhat = env.eval_patchwise(&observation.expr).map_err(diverged(t))?;

    let mut deltas: Vec<Option<Var<'t>>> = vec![None; states.len()];
    for flow in &spec.flows {
        let rate = env.eval(&flow.rate).map_err(diverged(t))?;
        if let Endpoint::Compartment(name) = &flow.from {
            let k = spec.compartment_index(name).ok_or_else(|| Error::Contract(format!("unknown compartment {name}")))?;
            deltas[k] = Some(match deltas[k] {
                Some(d) => d.sub(rate)?,
                None => rate.neg(),
            });
        }
        if let Endpoint::Compartment(name) = &flow.to {
            let k = spec.compartment_index(name).ok_or_else(|| Error::Contract(format!("unknown compartment {name}")))?;
            deltas[k] = Some(match deltas[k] {
                Some(d) => d.add(rate)?,
                None => rate,
            });
        }
    }

    let l = frame.zeros.shape()[0];
    let mut clamped = vec![0.0; l];
    let mut next = Vec::with_capacity(states.len());
    for (k, state) in states.iter().enumerate() {
        let moved = match deltas[k] {
            Some(d) => state.add(d)?,
            None => *state,
        };
        let value = moved.value();
        if !value.all_finite() {
            return Err(Error::SimDivergence {
                step: t,
                msg: format!("compartment {} became non-finite", spec.compartments[k]),
            });
        }
        if value.data().iter().any(|v| *v < 0.0) {
            for (p, v) in value.data().iter().enumerate() {
                clamped[p] += (-v).max(0.0);
            }
            next.push(moved.relu());
        } else {
            next.push(moved);
        }
    }
    Ok((yhat, next, clamped))
}

fn check_inputs(spec: &ModelSpec, ctx: &MetapopContext, init: &Tensor) -> Result<()> {
    let (k, l) = (spec.compartments.len(), ctx.num_patches());
    if init.shape() != [k, l] {
        return Err(Error::Shape(format!(
            "initial state {:?}, expected [{k}, {l}]",
            init.shape()
        )));
    }
    if let Some(v) = init.data().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!("initial mass {v} must be finite and nonnegative")));
    }
    Ok(())
}

/// Single step on plain tensors: `state` is `(compartments, patches)` and
/// `params` is `(patches, 8)`. Returns the next state and clamped mass per patch.
pub fn step(
    spec: &ModelSpec,
    ctx: &MetapopContext,
    state: &Tensor,
    params: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    check_inputs(spec, ctx, state)?;
    let l = ctx.num_patches();
    if params.shape() != [l, NUM_CHANNELS] {
        return Err(Error::Shape(format!("step parameters {:?}, expected [{l}, 8]", params.shape())));
    }
    let tape = Tape::new();
    let frame = Frame::new(&tape, spec, ctx)?;
    let p = tape.constant(params.clone());
    let mut bound = [None; NUM_CHANNELS];
    for c in Channel::ALL {
        bound[c.index()] = Some(p.select(1, c.index())?);
    }
    let states = state_vars(&tape, state)?;
    let (_, next, clamped) = advance(&frame, spec, &states, &bound, 0)?;
    let rows: Vec<Vec<f64>> = next.iter().map(|v| v.value().into_data()).collect();
    Ok((Tensor::from_rows(&rows)?, clamped))
}

fn state_vars<'t>(tape: &'t Tape, state: &Tensor) -> Result<Vec<Var<'t>>> {
    let s = tape.constant(state.clone());
    (0..state.shape()[0]).map(|k| s.select(0, k)).collect()
}

/// A simulation whose values live on a tape.
pub struct TapeTrajectory<'t> {
    /// `states[t][k]` is compartment `k` at time `t`, one value per patch.
    pub states: Vec<Vec<Var<'t>>>,
    /// Observation for each step, one value per patch.
    pub yhat: Vec<Var<'t>>,
    /// Mass removed by clamping, summed over steps, per patch.
    pub clamped_mass: Vec<f64>,
}

impl<'t> TapeTrajectory<'t> {
    /// Observations stacked to `(T, patches)`.
    pub fn observed(&self) -> Result<Var<'t>> {
        Var::stack(&self.yhat, 0)
    }

    pub fn to_values(&self, spec: &ModelSpec) -> Result<StateTrajectory> {
        let l = self.clamped_mass.len();
        let steps = self.yhat.len();
        let mut states = Vec::new();
        for k in 0..spec.compartments.len() {
            let mut data = Vec::with_capacity((steps + 1) * l);
            for s in &self.states {
                data.extend(s[k].value().into_data());
            }
            states.push(Tensor::new(vec![steps + 1, l], data)?);
        }
        let mut yhat = Vec::with_capacity(steps * l);
        for y in &self.yhat {
            yhat.extend(y.value().into_data());
        }
        Ok(StateTrajectory {
            compartments: spec.compartments.clone(),
            states,
            yhat: Tensor::new(vec![steps, l], yhat)?,
            clamped_mass: self.clamped_mass.clone(),
        })
    }
}

/// Runs `steps` Euler steps with `params` of shape `(patches, >= steps, 8)`
/// recorded on `tape`, so gradients flow back into whatever produced them.
pub fn simulate_on_tape<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    ctx: &MetapopContext,
    init: &Tensor,
    params: Var<'t>,
    steps: usize,
) -> Result<TapeTrajectory<'t>> {
    check_inputs(spec, ctx, init)?;
    let l = ctx.num_patches();
    let shape = params.shape();
    if shape.len() != 3 || shape[0] != l || shape[2] != NUM_CHANNELS || shape[1] < steps {
        return Err(Error::Shape(format!(
            "parameter field {:?} cannot drive {steps} steps over {l} patches",
            shape
        )));
    }
    let frame = Frame::new(tape, spec, ctx)?;
    let mut used = [false; NUM_CHANNELS];
    for (_, e, _) in spec.expressions() {
        for name in e.identifiers() {
            if let Some(c) = Channel::from_name(name) {
                used[c.index()] = true;
            }
        }
        if e.uses_foi() {
            used[Channel::Beta.index()] = true;
        }
    }
    let mut series: [Option<Var<'t>>; NUM_CHANNELS] = [None; NUM_CHANNELS];
    for c in Channel::ALL {
        if used[c.index()] {
            series[c.index()] = Some(params.select(2, c.index())?);
        }
    }

    let mut states = vec![state_vars(tape, init)?];
    let mut yhat = Vec::with_capacity(steps);
    let mut clamped_mass = vec![0.0; l];
    for t in 0..steps {
        let mut bound = [None; NUM_CHANNELS];
        for (i, s) in series.iter().enumerate() {
            if let Some(s) = s {
                bound[i] = Some(s.select(1, t)?);
            }
        }
        let (y, next, clamped) = advance(&frame, spec, &states[t], &bound, t)?;
        for (acc, c) in clamped_mass.iter_mut().zip(clamped) {
            *acc += c;
        }
        yhat.push(y);
        states.push(next);
    }
    Ok(TapeTrajectory {
        states,
        yhat,
        clamped_mass,
    })
}

/// Runs `steps` Euler steps on plain values.
pub fn simulate(
    spec: &ModelSpec,
    ctx: &MetapopContext,
    init: &Tensor,
    params: &ParamField,
    steps: usize,
) -> Result<StateTrajectory> {
    let tape = Tape::new();
    let p = tape.constant(params.values().clone());
    simulate_on_tape(&tape, spec, ctx, init, p, steps)?.to_values(spec)
}
