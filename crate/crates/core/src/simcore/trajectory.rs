use std::fmt::Write;

use crate::autodiff::Tensor;

/// Plain-valued simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub compartments: Vec<String>,
    /// One `(T+1, patches)` tensor per compartment, in declaration order.
    pub states: Vec<Tensor>,
    /// Observed series `(T, patches)`.
    pub yhat: Tensor,
    /// Mass removed by clamping at zero, per patch.
    pub clamped_mass: Vec<f64>,
}

impl StateTrajectory {
    pub fn steps(&self) -> usize {
        self.yhat.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.yhat.shape()[1]
    }

    pub fn compartment(&self, name: &str) -> Option<&Tensor> {
        let k = self.compartments.iter().position(|c| c == name)?;
        Some(&self.states[k])
    }

    /// Sum over compartments for each patch at time `t`.
    pub fn total_mass(&self, t: usize) -> Vec<f64> {
        (0..self.num_patches())
            .map(|p| self.states.iter().map(|s| s.get(&[t, p])).sum())
            .collect()
    }

    /// Observed series of one patch.
    pub fn yhat_series(&self, patch: usize) -> Vec<f64> {
        (0..self.steps()).map(|t| self.yhat.get(&[t, patch])).collect()
    }

    /// Long-form CSV: `patch,t,<compartments...>,yhat`. The final time point
    /// has no observation, so its `yhat` cell is empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch,t");
        for c in &self.compartments {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",yhat\n");
        for p in 0..self.num_patches() {
            for t in 0..=self.steps() {
                let _ = write!(out, "{p},{t}");
                for s in &self.states {
                    let _ = write!(out, ",{}", s.get(&[t, p]));
                }
                if t < self.steps() {
                    let _ = write!(out, ",{}", self.yhat.get(&[t, p]));
                } else {
                    out.push(',');
                }
                out.push('\n');
            }
        }
        out
    }
}
