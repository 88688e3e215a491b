//! Neural-integrated mechanistic epidemic models.
//!
//! A calibration network emits bounded, spatially and temporally varying
//! parameters that drive a metapopulation compartmental simulator. Candidate
//! simulators are written in a small compartmental-model language, statically
//! checked, and searched over by an evolutionary generate/verify/evaluate/reflect
//! loop.
//!
//! Module map:
//! - [`autodiff`]: tensor tape and AdamW
//! - [`mechdsl`]: model language parser, printer and verifier
//! - [`simcore`]: differentiable interpreter and interventions
//! - [`calib`]: parameter network, training and forecasting
//! - [`evalharness`]: datasets, synthetic scenarios, metrics, rolling evaluation
//! - [`agentloop`]: candidate generation and the evolution loop

pub mod agentloop;
pub mod autodiff;
pub mod calib;
pub mod error;
pub mod evalharness;
pub mod mechdsl;
pub mod rng;
pub mod simcore;

pub use error::{Error, Result, Span};
