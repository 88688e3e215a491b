//! Datasets, synthetic scenarios, metrics and rolling-origin evaluation.

mod dataset;
mod metrics;
mod realtime;
mod synth;

pub use dataset::{Cadence, ContactSpec, Provenance, SpatioTemporalDataset, GAP_POLICY};
pub use metrics::{bug_counts_at, rmse, RunLog, RunRecord, Status};
pub use realtime::{
    realtime_eval, windows, EvalConfig, EvalReport, EvalWindow, MechanisticForecaster, OracleForecaster,
    PersistenceForecaster, ShiftScore, WindowForecaster,
};
pub use synth::{scenarios, synthesize, HiddenTruth, ScenarioConfig, TARGET_FEATURE};
