use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Cadence, ContactSpec, Provenance, SpatioTemporalDataset};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mechdsl::{fixtures, parse, verify, Channel, VerifyConfig, NUM_CHANNELS};
use crate::rng::{rng_for, stream};
use crate::simcore::{initial_state, simulate, ParamField, StateTrajectory};

/// Recipe for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Generating model, as source text.
    pub spec: String,
    pub locations: usize,
    pub steps: usize,
    pub cadence: Cadence,
    pub population: Vec<f64>,
    pub contact: ContactSpec,
    /// Per-channel baseline values; missing channels are 0.
    pub params: BTreeMap<Channel, f64>,
    /// Relative spread of baselines across locations.
    pub location_jitter: f64,
    /// Relative amplitude of the sinusoidal variation of `beta`.
    pub seasonal_amplitude: f64,
    /// Period of that variation, in steps.
    pub period: f64,
    /// Standard deviation of the multiplicative log-normal noise on the target.
    pub noise: f64,
    /// Number of auxiliary features besides the target.
    pub aux_features: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        super::scenarios::recovery()
    }
}

/// What generated a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    pub spec_text: String,
    pub params: ParamField,
    pub trajectory: StateTrajectory,
}

pub const TARGET_FEATURE: &str = "cases";

/// Simulates the generating spec under the scenario's hidden parameters and
/// derives the observed dataset from it.
pub fn synthesize(config: &ScenarioConfig, seed: u64) -> Result<(SpatioTemporalDataset, HiddenTruth)> {
    let spec = parse(&config.spec)?;
    let report = verify(&spec, &VerifyConfig::default());
    if report.has_errors() {
        return Err(Error::Contract(format!(
            "scenario `{}` has an invalid generating model: {}",
            config.name,
            report.to_json()
        )));
    }
    let (l, t) = (config.locations, config.steps);
    if config.population.len() != l {
        return Err(Error::Contract(format!(
            "scenario `{}`: {} populations for {l} locations",
            config.name,
            config.population.len()
        )));
    }
    if config.noise.is_nan() || config.noise < 0.0 {
        return Err(Error::Contract("noise must be nonnegative".into()));
    }

    let bounds = spec.channel_bounds();
    let mut prng = rng_for(seed, stream::SYNTH_PARAMS);
    let mut values = Tensor::zeros(&[l, t, NUM_CHANNELS]);
    for loc in 0..l {
        let phase = prng.random_range(0.0..TAU);
        for c in Channel::ALL {
            let base = config.params.get(&c).copied().unwrap_or(0.0);
            let jitter = 1.0 + config.location_jitter * prng.random_range(-1.0..1.0);
            for s in 0..t {
                let mut v = base * jitter;
                if c == Channel::Beta && config.seasonal_amplitude != 0.0 {
                    v *= 1.0 + config.seasonal_amplitude * (TAU * s as f64 / config.period + phase).sin();
                }
                let (lo, hi) = bounds[c.index()];
                values.set(&[loc, s, c.index()], v.clamp(lo, hi));
            }
        }
    }
    let params = ParamField::new(values, bounds)?;

    let draft = SpatioTemporalDataset::new(
        Tensor::zeros(&[l, t, 1]),
        vec![TARGET_FEATURE.to_string()],
        0,
        config.cadence,
        config.population.clone(),
        config.contact.clone(),
    )?;
    let ctx = draft.context()?;
    let init = initial_state(&spec, &ctx)?;
    let trajectory = simulate(&spec, &ctx, &init, &params, t)?;

    let mut nrng = rng_for(seed, stream::SYNTH_NOISE);
    let d = 1 + config.aux_features;
    let mut names = vec![TARGET_FEATURE.to_string()];
    let aux: Vec<(Channel, usize)> = (0..config.aux_features)
        .map(|k| (Channel::ALL[k % NUM_CHANNELS], 1 + k % 3))
        .collect();
    names.extend(aux.iter().map(|(c, lag)| format!("{c}_lag{lag}")));

    let mut data = Tensor::zeros(&[l, t, d]);
    for loc in 0..l {
        for s in 0..t {
            let clean = trajectory.yhat.get(&[s, loc]).max(0.0);
            let y = if config.noise > 0.0 {
                let z: f64 = StandardNormal.sample(&mut nrng);
                clean * (config.noise * z).exp()
            } else {
                clean
            };
            data.set(&[loc, s, 0], y);
            for (k, (c, lag)) in aux.iter().enumerate() {
                // Three-step trailing mean of the channel, delayed by `lag`.
                let mean = (0..3)
                    .map(|w| {
                        let at = s.saturating_sub(lag + w);
                        params.get(loc, at, *c)
                    })
                    .sum::<f64>()
                    / 3.0;
                data.set(&[loc, s, k + 1], mean);
            }
        }
    }
    let mut dataset = SpatioTemporalDataset::new(
        data,
        names,
        0,
        config.cadence,
        config.population.clone(),
        config.contact.clone(),
    )?;
    dataset.provenance = Provenance {
        source: format!("synthetic:{}:seed={seed}", config.name),
        gap_policy: super::dataset::GAP_POLICY.to_string(),
        filled_cells: 0,
        window_start: 0,
    };
    Ok((
        dataset,
        HiddenTruth {
            spec_text: config.spec.clone(),
            params,
            trajectory,
        },
    ))
}

/// Bundled scenarios.
pub mod scenarios {
    use super::*;

    fn params(pairs: &[(Channel, f64)]) -> BTreeMap<Channel, f64> {
        pairs.iter().copied().collect()
    }

    /// Two uncoupled locations, constant parameters, no noise: the model that
    /// generated the data is the canonical one, so calibration can recover it.
    pub fn recovery() -> ScenarioConfig {
        ScenarioConfig {
            name: "recovery".to_string(),
            spec: fixtures::CANONICAL_SEIRM.to_string(),
            locations: 2,
            steps: 52,
            cadence: Cadence::Week,
            population: vec![100_000.0, 50_000.0],
            contact: ContactSpec::identity(),
            params: params(&[
                (Channel::Beta, 0.9),
                (Channel::Alpha, 0.7),
                (Channel::Gamma, 0.5),
                (Channel::Delta, 0.05),
                (Channel::Mor, 0.02),
            ]),
            location_jitter: 0.0,
            seasonal_amplitude: 0.0,
            period: 52.0,
            noise: 0.0,
            aux_features: 2,
        }
    }

    /// Three coupled locations over three seasons with noisy weekly counts.
    pub fn canonical() -> ScenarioConfig {
        ScenarioConfig {
            name: "canonical".to_string(),
            spec: fixtures::CANONICAL_SEIRM.to_string(),
            locations: 3,
            steps: 160,
            cadence: Cadence::Week,
            population: vec![200_000.0, 120_000.0, 80_000.0],
            contact: ContactSpec::Inline(vec![
                vec![0.8, 0.1, 0.1],
                vec![0.1, 0.8, 0.1],
                vec![0.1, 0.1, 0.8],
            ]),
            params: params(&[
                (Channel::Beta, 0.8),
                (Channel::Alpha, 0.6),
                (Channel::Gamma, 0.5),
                (Channel::Delta, 0.08),
                (Channel::Mor, 0.01),
            ]),
            location_jitter: 0.1,
            seasonal_amplitude: 0.3,
            period: 52.0,
            noise: 0.05,
            aux_features: 3,
        }
    }

    /// Daily cadence, two weakly coupled locations.
    pub fn daily() -> ScenarioConfig {
        ScenarioConfig {
            name: "daily".to_string(),
            spec: fixtures::CANONICAL_SEIRM.to_string(),
            locations: 2,
            steps: 180,
            cadence: Cadence::Day,
            population: vec![300_000.0, 150_000.0],
            contact: ContactSpec::Inline(vec![vec![0.95, 0.05], vec![0.05, 0.95]]),
            params: params(&[
                (Channel::Beta, 0.3),
                (Channel::Alpha, 0.25),
                (Channel::Gamma, 0.15),
                (Channel::Delta, 0.005),
                (Channel::Mor, 0.002),
            ]),
            location_jitter: 0.05,
            seasonal_amplitude: 0.1,
            period: 90.0,
            noise: 0.05,
            aux_features: 2,
        }
    }

    pub fn bundled() -> Vec<ScenarioConfig> {
        vec![recovery(), canonical(), daily()]
    }

    pub fn by_name(name: &str) -> Option<ScenarioConfig> {
        bundled().into_iter().find(|s| s.name == name)
    }
}
