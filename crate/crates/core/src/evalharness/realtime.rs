use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::SpatioTemporalDataset;
use super::metrics::rmse;
use crate::autodiff::Tensor;
use crate::calib::{forecast, train, CalibNet, NetConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::mechdsl::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Forecast horizon; the cadence default when absent.
    pub horizon: Option<usize>,
    pub shifts: Vec<usize>,
    /// Training length; `T - max(shifts) - horizon` when absent.
    pub train_len: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            shifts: vec![0, 1, 2, 3],
            train_len: None,
        }
    }
}

/// Train on `[train_start, train_start + train_len)`, score the next `horizon` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalWindow {
    pub shift: usize,
    pub train_start: usize,
    pub train_len: usize,
    pub horizon: usize,
}

impl EvalWindow {
    pub fn test_start(&self) -> usize {
        self.train_start + self.train_len
    }
}

/// Produces a `(horizon, L)` forecast from a training slice.
pub trait WindowForecaster: Sync {
    fn forecast(&self, train: &SpatioTemporalDataset, window: &EvalWindow) -> Result<Tensor>;
}

/// Calibrates a fresh network on each window, then simulates forward.
#[derive(Debug, Clone)]
pub struct MechanisticForecaster {
    pub spec: ModelSpec,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl WindowForecaster for MechanisticForecaster {
    fn forecast(&self, data: &SpatioTemporalDataset, window: &EvalWindow) -> Result<Tensor> {
        let ctx = data.context()?;
        let net = CalibNet::new(self.net, data.num_features(), self.spec.channel_bounds(), self.train.seed)?;
        let fitted = train(&self.spec, &ctx, net, data, &self.train)?;
        forecast(&self.spec, &ctx, &fitted.net, data, window.horizon)
    }
}

/// Returns the held-out truth. Scores 0 by construction.
pub struct OracleForecaster<'a> {
    pub full: &'a SpatioTemporalDataset,
}

impl WindowForecaster for OracleForecaster<'_> {
    fn forecast(&self, _train: &SpatioTemporalDataset, w: &EvalWindow) -> Result<Tensor> {
        Ok(self.full.window(w.test_start(), w.horizon)?.target_matrix())
    }
}

/// Repeats the last observed target.
pub struct PersistenceForecaster;

impl WindowForecaster for PersistenceForecaster {
    fn forecast(&self, train: &SpatioTemporalDataset, w: &EvalWindow) -> Result<Tensor> {
        let l = train.num_locations();
        let last: Vec<f64> = (0..l)
            .map(|loc| train.get(loc, train.len() - 1, train.target))
            .collect();
        Tensor::new(vec![w.horizon, l], last.repeat(w.horizon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftScore {
    pub shift: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_shift: Vec<ShiftScore>,
    pub mean_rmse: f64,
}

pub fn windows(data: &SpatioTemporalDataset, config: &EvalConfig) -> Result<Vec<EvalWindow>> {
    if config.shifts.is_empty() {
        return Err(Error::Contract("no evaluation shifts".into()));
    }
    let horizon = config.horizon.unwrap_or_else(|| data.cadence.default_horizon());
    if horizon == 0 {
        return Err(Error::Contract("horizon must be positive".into()));
    }
    let max_shift = *config.shifts.iter().max().expect("nonempty");
    let train_len = match config.train_len {
        Some(n) => n,
        None => data
            .len()
            .checked_sub(max_shift + horizon)
            .ok_or_else(|| Error::Contract(format!("{} steps leave no training window", data.len())))?,
    };
    if train_len < 2 {
        return Err(Error::Contract(format!("training window of {train_len} steps")));
    }
    if max_shift + train_len + horizon > data.len() {
        return Err(Error::Contract(format!(
            "shift {max_shift} + train {train_len} + horizon {horizon} exceeds {} steps",
            data.len()
        )));
    }
    Ok(config
        .shifts
        .iter()
        .map(|&shift| EvalWindow {
            shift,
            train_start: shift,
            train_len,
            horizon,
        })
        .collect())
}

/// Scores `forecaster` on every shifted window, in parallel.
pub fn realtime_eval(
    forecaster: &dyn WindowForecaster,
    data: &SpatioTemporalDataset,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let windows = windows(data, config)?;
    let per_shift = windows
        .par_iter()
        .map(|w| {
            let train_slice = data.window(w.train_start, w.train_len)?;
            let truth = data.window(w.test_start(), w.horizon)?.target_matrix();
            let yhat = forecaster.forecast(&train_slice, w)?;
            if !yhat.all_finite() {
                return Err(Error::SimDivergence {
                    step: w.test_start(),
                    msg: format!("non-finite forecast at shift {}", w.shift),
                });
            }
            Ok(ShiftScore {
                shift: w.shift,
                rmse: rmse(&yhat, &truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_rmse = per_shift.iter().map(|s| s.rmse).sum::<f64>() / per_shift.len() as f64;
    Ok(EvalReport { per_shift, mean_rmse })
}
