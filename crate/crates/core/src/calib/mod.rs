//! The parameter network and its training loop.
//!
//! [`CalibNet`] reads the feature window `(L, T, d)` location by location:
//! a `tanh` embedding, a single recurrent layer (GRU or plain tanh RNN), and a
//! per-step linear head whose sigmoid output is scaled into each channel's
//! bounds. Locations share weights but never interact.

mod checkpoint;
mod train;

pub use checkpoint::CHECKPOINT_FORMAT;
pub use train::{
    evaluate_loss, forecast, forecast_with_params, rmse_on_tape, train, train_with_observer,
    TrainConfig, TrainOutcome,
};

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evalharness::SpatioTemporalDataset;
use crate::mechdsl::NUM_CHANNELS;
use crate::rng::{rng_for, stream};
use crate::simcore::ParamField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Gru,
    Rnn,
}

impl CellType {
    fn gates(self) -> usize {
        match self {
            CellType::Gru => 3,
            CellType::Rnn => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub cell: CellType,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            cell: CellType::Gru,
        }
    }
}

/// Per-feature z-score statistics of the training window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Features with (near) zero spread get unit scale so they map to zero.
    pub fn fit(data: &SpatioTemporalDataset) -> Self {
        let (l, t, d) = (data.num_locations(), data.len(), data.num_features());
        let count = (l * t).max(1) as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for f in 0..d {
            let mut sum = 0.0;
            for loc in 0..l {
                for s in 0..t {
                    sum += data.get(loc, s, f);
                }
            }
            mean[f] = sum / count;
            let mut sq = 0.0;
            for loc in 0..l {
                for s in 0..t {
                    sq += (data.get(loc, s, f) - mean[f]).powi(2);
                }
            }
            let sd = (sq / count).sqrt();
            std[f] = if sd > 1e-12 { sd } else { 1.0 };
        }
        Self { mean, std }
    }

    fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }
}

/// Sequence-to-parameter network.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibNet {
    pub config: NetConfig,
    input_dim: usize,
    bounds: [(f64, f64); NUM_CHANNELS],
    seed: u64,
    weights: Vec<Tensor>,
    normalization: Normalization,
}

/// Weight tensors in storage order: embedding, embedding bias, input-to-gates,
/// hidden-to-gates, gate bias, head, head bias.
const WEIGHT_NAMES: [&str; 7] = ["embed", "embed_bias", "input_gates", "hidden_gates", "gate_bias", "head", "head_bias"];

impl CalibNet {
    /// Xavier-uniform weights and zero biases drawn from the seed's init stream.
    pub fn new(config: NetConfig, input_dim: usize, bounds: [(f64, f64); NUM_CHANNELS], seed: u64) -> Result<Self> {
        if config.hidden == 0 || input_dim == 0 {
            return Err(Error::Contract("hidden size and input width must be positive".into()));
        }
        let mut rng = rng_for(seed, stream::NET_INIT);
        let h = config.hidden;
        let g = config.cell.gates() * h;
        let shapes = Self::shapes_for(config, input_dim);
        let mut weights = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.into_iter().enumerate() {
            let is_bias = matches!(i, 1 | 4 | 6);
            if is_bias {
                weights.push(Tensor::zeros(&shape));
                continue;
            }
            let (fan_in, fan_out) = (shape[0], shape[1]);
            let fan_out = if fan_out == g { h } else { fan_out };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.sample(dist)).collect();
            weights.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            input_dim,
            bounds,
            seed,
            weights,
            normalization: Normalization::identity(input_dim),
        })
    }

    fn shapes_for(config: NetConfig, d: usize) -> Vec<Vec<usize>> {
        let h = config.hidden;
        let g = config.cell.gates() * h;
        vec![
            vec![d, h],
            vec![1, h],
            vec![h, g],
            vec![h, g],
            vec![1, g],
            vec![h, NUM_CHANNELS],
            vec![1, NUM_CHANNELS],
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn bounds(&self) -> &[(f64, f64); NUM_CHANNELS] {
        &self.bounds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn weight_names() -> &'static [&'static str] {
        &WEIGHT_NAMES
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.mean.len() != self.input_dim || norm.std.len() != self.input_dim {
            return Err(Error::Contract("normalization width differs from input width".into()));
        }
        self.normalization = norm;
        Ok(())
    }

    pub fn num_weights(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Normalized features, one `(L, d)` tensor per time step.
    fn inputs(&self, data: &SpatioTemporalDataset) -> Result<Vec<Tensor>> {
        if data.num_features() != self.input_dim {
            return Err(Error::Contract(format!(
                "dataset has {} features, network expects {}",
                data.num_features(),
                self.input_dim
            )));
        }
        let (l, d) = (data.num_locations(), self.input_dim);
        let n = &self.normalization;
        (0..data.len())
            .map(|t| {
                let mut x = Vec::with_capacity(l * d);
                for loc in 0..l {
                    for f in 0..d {
                        x.push((data.get(loc, t, f) - n.mean[f]) / n.std[f]);
                    }
                }
                Tensor::new(vec![l, d], x)
            })
            .collect()
    }

    /// Parameter field `(L, steps, 8)` on `tape`, computed from `weights`
    /// (tape handles for [`Self::weights`]). Steps past the data repeat the
    /// last step's output.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        weights: &[Var<'t>],
        data: &SpatioTemporalDataset,
        steps: usize,
    ) -> Result<Var<'t>> {
        let inputs = self.inputs(data)?;
        if inputs.is_empty() {
            return Err(Error::Contract("cannot predict parameters from an empty window".into()));
        }
        let [w_e, b_e, w_x, w_h, b_g, w_o, b_o] = weights else {
            return Err(Error::Contract("weight list has the wrong length".into()));
        };
        let l = data.num_locations();
        let hid = self.config.hidden;
        let lo = tape.constant(Tensor::new(vec![1, NUM_CHANNELS], self.bounds.iter().map(|b| b.0).collect())?);
        let range = tape.constant(Tensor::new(
            vec![1, NUM_CHANNELS],
            self.bounds.iter().map(|b| b.1 - b.0).collect(),
        )?);

        let mut h = tape.constant(Tensor::zeros(&[l, hid]));
        let mut outputs = Vec::with_capacity(steps);
        for x in inputs.into_iter().take(steps) {
            let e = tape.constant(x).matmul(*w_e)?.add(*b_e)?.tanh();
            let xg = e.matmul(*w_x)?.add(*b_g)?;
            let hg = h.matmul(*w_h)?;
            h = match self.config.cell {
                CellType::Rnn => xg.add(hg)?.tanh(),
                CellType::Gru => {
                    let z = xg.slice(1, 0, hid)?.add(hg.slice(1, 0, hid)?)?.sigmoid();
                    let r = xg.slice(1, hid, 2 * hid)?.add(hg.slice(1, hid, 2 * hid)?)?.sigmoid();
                    let n = xg
                        .slice(1, 2 * hid, 3 * hid)?
                        .add(r.mul(hg.slice(1, 2 * hid, 3 * hid)?)?)?
                        .tanh();
                    // (1 - z) * n + z * h
                    n.add(z.mul(h.sub(n)?)?)?
                }
            };
            let p = h.matmul(*w_o)?.add(*b_o)?.sigmoid().mul(range)?.add(lo)?;
            outputs.push(p);
        }
        let Some(&last) = outputs.last() else {
            return Ok(tape.constant(Tensor::zeros(&[l, 0, NUM_CHANNELS])));
        };
        while outputs.len() < steps {
            outputs.push(last);
        }
        Var::stack(&outputs, 1)
    }

    /// Plain-valued parameter field for `steps` steps.
    pub fn predict_params(&self, data: &SpatioTemporalDataset, steps: usize) -> Result<ParamField> {
        let tape = Tape::new();
        let w: Vec<Var> = self.weights.iter().map(|w| tape.constant(w.clone())).collect();
        let values = self.forward(&tape, &w, data, steps)?.value();
        // Sigmoid saturation can land exactly on a bound; keep the field valid.
        let values = Tensor::new(
            values.shape().to_vec(),
            values
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let (lo, hi) = self.bounds[i % NUM_CHANNELS];
                    v.clamp(lo, hi)
                })
                .collect(),
        )?;
        ParamField::new(values, self.bounds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalharness::{Cadence, ContactSpec};

    fn dataset(l: usize, t: usize, d: usize, seed: u64) -> SpatioTemporalDataset {
        let mut rng = rng_for(seed, 99);
        let data = (0..l * t * d).map(|_| rng.random_range(0.0..10.0)).collect();
        SpatioTemporalDataset::new(
            Tensor::new(vec![l, t, d], data).unwrap(),
            (0..d).map(|i| format!("f{i}")).collect(),
            0,
            Cadence::Week,
            vec![1000.0; l],
            ContactSpec::identity(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_midpoints() {
        let mut net = CalibNet::new(NetConfig::default(), 3, ParamField::default_bounds(), 0).unwrap();
        for w in net.weights_mut() {
            w.data_mut().fill(0.0);
        }
        let p = net.predict_params(&dataset(2, 6, 3, 1), 6).unwrap();
        assert_eq!(p.values().shape(), &[2, 6, 8]);
        assert!(p.values().data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn outputs_inside_bounds_and_held_past_data() {
        let mut bounds = ParamField::default_bounds();
        bounds[2] = (0.1, 0.3);
        let net = CalibNet::new(NetConfig { hidden: 8, cell: CellType::Rnn }, 2, bounds, 4).unwrap();
        let p = net.predict_params(&dataset(3, 5, 2, 2), 9).unwrap();
        for l in 0..3 {
            for c in crate::mechdsl::Channel::ALL {
                let (lo, hi) = bounds[c.index()];
                for t in 0..9 {
                    let v = p.get(l, t, c);
                    assert!(v > lo && v < hi);
                }
                assert_eq!(p.get(l, 8, c), p.get(l, 4, c));
            }
        }
    }

    #[test]
    fn width_mismatch() {
        let net = CalibNet::new(NetConfig::default(), 4, ParamField::default_bounds(), 0).unwrap();
        assert_eq!(net.predict_params(&dataset(1, 3, 3, 0), 3).unwrap_err().code(), "CONTRACT_ERROR");
    }

    #[test]
    fn locations_are_independent() {
        let net = CalibNet::new(NetConfig::default(), 2, ParamField::default_bounds(), 7).unwrap();
        let ds = dataset(3, 4, 2, 3);
        let perm = [2, 0, 1];
        let mut data = Vec::new();
        for &p in &perm {
            for t in 0..4 {
                for f in 0..2 {
                    data.push(ds.get(p, t, f));
                }
            }
        }
        let permuted = SpatioTemporalDataset::new(
            Tensor::new(vec![3, 4, 2], data).unwrap(),
            ds.feature_names.clone(),
            0,
            Cadence::Week,
            vec![1000.0; 3],
            ContactSpec::identity(),
        )
        .unwrap();
        let a = net.predict_params(&ds, 4).unwrap();
        let b = net.predict_params(&permuted, 4).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for t in 0..4 {
                for c in crate::mechdsl::Channel::ALL {
                    assert_eq!(b.get(i, t, c), a.get(p, t, c));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = CalibNet::new(NetConfig::default(), 3, ParamField::default_bounds(), 11).unwrap();
        let b = CalibNet::new(NetConfig::default(), 3, ParamField::default_bounds(), 11).unwrap();
        let c = CalibNet::new(NetConfig::default(), 3, ParamField::default_bounds(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights(), c.weights());
    }
}
