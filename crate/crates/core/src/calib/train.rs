use serde::{Deserialize, Serialize};

use super::{CalibNet, Normalization};
use crate::autodiff::{AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalharness::SpatioTemporalDataset;
use crate::mechdsl::ModelSpec;
use crate::simcore::{initial_state, simulate_on_tape, MetapopContext, ParamField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            iterations: 1000,
            seed: 0,
            weight_decay: AdamWConfig::default().weight_decay,
        }
    }
}

impl TrainConfig {
    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: CalibNet,
    /// Loss before each update, one entry per iteration.
    pub losses: Vec<f64>,
}

/// `sqrt(mean((yhat - y)^2))` on the tape.
pub fn rmse_on_tape<'t>(yhat: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    if yhat.shape() != y.shape() {
        return Err(Error::Contract(format!(
            "rmse of {:?} against {:?}",
            yhat.shape(),
            y.shape()
        )));
    }
    yhat.sub(y)?.square().mean().sqrt()
}

/// Simulated-vs-observed RMSE for the current weights, on `tape`.
fn loss_on_tape<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    ctx: &MetapopContext,
    net: &CalibNet,
    weights: &[Var<'t>],
    data: &SpatioTemporalDataset,
    init: &Tensor,
) -> Result<(Var<'t>, Var<'t>)> {
    let steps = data.len();
    let params = net.forward(tape, weights, data, steps)?;
    let traj = simulate_on_tape(tape, spec, ctx, init, params, steps)?;
    let y = tape.constant(data.target_matrix());
    Ok((rmse_on_tape(traj.observed()?, y)?, params))
}

/// Fits `net` to `data` (the training window only). Normalization statistics
/// are taken from `data` and stored on the returned net.
pub fn train(
    spec: &ModelSpec,
    ctx: &MetapopContext,
    net: CalibNet,
    data: &SpatioTemporalDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(spec, ctx, net, data, config, &mut |_, _| {})
}

/// As [`train`], calling `observe(iteration, params)` with the parameter
/// field used at every iteration.
pub fn train_with_observer(
    spec: &ModelSpec,
    ctx: &MetapopContext,
    mut net: CalibNet,
    data: &SpatioTemporalDataset,
    config: &TrainConfig,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<TrainOutcome> {
    if config.iterations == 0 {
        return Err(Error::Contract("iterations must be at least 1".into()));
    }
    if data.len() < 2 {
        return Err(Error::Contract("training needs at least two time steps".into()));
    }
    if data.num_locations() != ctx.num_patches() {
        return Err(Error::Contract(format!(
            "{} locations but {} patches",
            data.num_locations(),
            ctx.num_patches()
        )));
    }
    net.set_normalization(Normalization::fit(data))?;
    let init = initial_state(spec, ctx)?;
    let mut optimizer = AdamW::new(config.optimizer(), net.weights());
    let mut losses = Vec::with_capacity(config.iterations);
    let abort = |iteration: usize| move |e: Error| Error::Training { iteration, source: Box::new(e) };

    for it in 0..config.iterations {
        let tape = Tape::new();
        let weights: Vec<Var> = net.weights().iter().map(|w| tape.leaf(w.clone())).collect();
        let (loss, params) = loss_on_tape(&tape, spec, ctx, &net, &weights, data, &init).map_err(abort(it))?;
        observe(it, &params.value());
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(abort(it)(Error::OptimizerDivergence {
                step: it + 1,
                msg: format!("loss is {value}"),
            }));
        }
        losses.push(value);
        if value == 0.0 {
            // Exact fit: the RMSE has no finite gradient here.
            continue;
        }
        let grads = loss.backward().map_err(abort(it))?;
        let grads: Vec<Tensor> = weights.iter().map(|w| grads.wrt(*w)).collect();
        optimizer.step(net.weights_mut(), &grads).map_err(abort(it))?;
    }
    Ok(TrainOutcome { net, losses })
}

/// Training loss for the current weights, without updating anything.
pub fn evaluate_loss(
    spec: &ModelSpec,
    ctx: &MetapopContext,
    net: &CalibNet,
    data: &SpatioTemporalDataset,
) -> Result<f64> {
    let tape = Tape::new();
    let weights: Vec<Var> = net.weights().iter().map(|w| tape.constant(w.clone())).collect();
    let init = initial_state(spec, ctx)?;
    loss_on_tape(&tape, spec, ctx, net, &weights, data, &init)?.0.item()
}

/// Runs the fitted model for `data.len() + horizon` steps and returns the
/// last `horizon` observations as `(horizon, L)`.
pub fn forecast(
    spec: &ModelSpec,
    ctx: &MetapopContext,
    net: &CalibNet,
    data: &SpatioTemporalDataset,
    horizon: usize,
) -> Result<Tensor> {
    let total = data.len() + horizon;
    let params = net.predict_params(data, total)?;
    forecast_with_params(spec, ctx, &params, data.len(), horizon)
}

/// Observations for steps `[start, start + horizon)` when the model is driven
/// by `params` from step 0.
pub fn forecast_with_params(
    spec: &ModelSpec,
    ctx: &MetapopContext,
    params: &ParamField,
    start: usize,
    horizon: usize,
) -> Result<Tensor> {
    let init = initial_state(spec, ctx)?;
    let traj = crate::simcore::simulate(spec, ctx, &init, params, start + horizon)?;
    let l = ctx.num_patches();
    let data = traj.yhat.data()[start * l..].to_vec();
    Tensor::new(vec![horizon, l], data)
}
