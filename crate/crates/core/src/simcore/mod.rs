//! Discrete-time metapopulation interpreter for verified model specs.
//!
//! One step moves every flow's rate (evaluated on the state at the start of
//! the step) from its source to its target, then clamps each compartment at
//! zero. All arithmetic goes through the autodiff tape so losses on the
//! observed series can be differentiated back to the parameter field.
//!
//! `foi()` for patch `i` is `sum_j C[i,j] * beta_j * I_eff_j / max(N_eff_j, eps)`
//! with `I_eff = C^T I` and `N_eff = C^T N`.

mod interp;
mod trajectory;

pub use interp::{
    effective_infections, force_of_infection, initial_state, simulate, simulate_on_tape, step,
    TapeTrajectory, INFECTIOUS,
};
pub use trajectory::StateTrajectory;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mechdsl::{Channel, DEFAULT_BOUNDS, NUM_CHANNELS};

/// Contact structure and populations shared by all patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetapopContext {
    contact: Tensor,
    population: Tensor,
}

impl MetapopContext {
    pub fn new(contact: Tensor, population: Tensor) -> Result<Self> {
        let m = population.numel();
        if population.rank() != 1 || contact.shape() != [m, m] {
            return Err(Error::Shape(format!(
                "contact matrix {:?} does not match {m} patches",
                contact.shape()
            )));
        }
        if let Some(c) = contact.data().iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Contract(format!("contact entry {c} outside [0, 1]")));
        }
        if let Some(n) = population.data().iter().find(|n| !(**n > 0.0 && n.is_finite())) {
            return Err(Error::Contract(format!("population {n} must be positive")));
        }
        Ok(Self { contact, population })
    }

    /// Uncoupled patches.
    pub fn identity(population: Vec<f64>) -> Result<Self> {
        let m = population.len();
        let mut c = Tensor::zeros(&[m, m]);
        for i in 0..m {
            c.set(&[i, i], 1.0);
        }
        Self::new(c, Tensor::from_vec(population))
    }

    pub fn num_patches(&self) -> usize {
        self.population.numel()
    }

    pub fn contact(&self) -> &Tensor {
        &self.contact
    }

    pub fn population(&self) -> &Tensor {
        &self.population
    }

    /// Same context with patches reordered so that new patch `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.num_patches();
        let mut c = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                c.set(&[i, j], self.contact.get(&[perm[i], perm[j]]));
            }
        }
        let n = perm.iter().map(|&p| self.population.data()[p]).collect();
        Self::new(c, Tensor::from_vec(n))
    }
}

/// Parameter values of shape `(patches, steps, 8)` in channel storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamField {
    values: Tensor,
    bounds: [(f64, f64); NUM_CHANNELS],
}

impl ParamField {
    /// Checks the shape and that every value lies within its channel bounds.
    pub fn new(values: Tensor, bounds: [(f64, f64); NUM_CHANNELS]) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[2] != NUM_CHANNELS {
            return Err(Error::Shape(format!("parameter field must be (L, T, 8), got {:?}", s)));
        }
        for (i, v) in values.data().iter().enumerate() {
            let (lo, hi) = bounds[i % NUM_CHANNELS];
            if !(*v >= lo && *v <= hi) {
                return Err(Error::Contract(format!(
                    "{} value {v} outside [{lo}, {hi}]",
                    Channel::ALL[i % NUM_CHANNELS]
                )));
            }
        }
        Ok(Self { values, bounds })
    }

    /// Every patch and step set to `per_channel`.
    pub fn constant(
        patches: usize,
        steps: usize,
        per_channel: [f64; NUM_CHANNELS],
        bounds: [(f64, f64); NUM_CHANNELS],
    ) -> Result<Self> {
        let data = (0..patches * steps).flat_map(|_| per_channel).collect();
        Self::new(Tensor::new(vec![patches, steps, NUM_CHANNELS], data)?, bounds)
    }

    pub fn default_bounds() -> [(f64, f64); NUM_CHANNELS] {
        [DEFAULT_BOUNDS; NUM_CHANNELS]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn bounds(&self) -> &[(f64, f64); NUM_CHANNELS] {
        &self.bounds
    }

    pub fn num_patches(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, patch: usize, t: usize, channel: Channel) -> f64 {
        self.values.get(&[patch, t, channel.index()])
    }

    /// Scales `channels` by `1 - delta` from step `start` on, for `patches`
    /// (all patches when `None`). Every other entry is copied unchanged, and
    /// `delta = 0` reproduces the input bit for bit.
    pub fn apply_intervention(
        &self,
        start: usize,
        delta: f64,
        channels: &[Channel],
        patches: Option<&[usize]>,
    ) -> Result<ParamField> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::Contract(format!("intervention strength {delta} outside [0, 1]")));
        }
        if start > self.steps() {
            return Err(Error::Contract(format!(
                "intervention start {start} beyond horizon {}",
                self.steps()
            )));
        }
        let (l, t) = (self.num_patches(), self.steps());
        let mut values = self.values.clone();
        let keep = 1.0 - delta;
        for p in 0..l {
            if patches.is_some_and(|ps| !ps.contains(&p)) {
                continue;
            }
            for s in start..t {
                for c in channels {
                    let idx = [p, s, c.index()];
                    values.set(&idx, values.get(&idx) * keep);
                }
            }
        }
        Ok(ParamField {
            values,
            bounds: self.bounds,
        })
    }
}
