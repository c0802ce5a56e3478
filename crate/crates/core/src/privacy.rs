//! Norm clipping with a quantile-tracking bound, and Gaussian noise.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::seed;

/// Initial differential-privacy parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Starting clip bound.
    pub clip_bound: f64,
    #[serde(default = "DpConfig::default_target_quantile")]
    pub target_quantile: f64,
    /// Set to 0 to keep the bound fixed.
    #[serde(default = "DpConfig::default_adapt_rate")]
    pub adapt_rate: f64,
    #[serde(default)]
    pub noise_multiplier: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DpConfig {
    fn default_target_quantile() -> f64 {
        0.5
    }
    fn default_adapt_rate() -> f64 {
        0.2
    }

    pub fn new(clip_bound: f64) -> Self {
        DpConfig {
            clip_bound,
            target_quantile: Self::default_target_quantile(),
            adapt_rate: Self::default_adapt_rate(),
            noise_multiplier: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_bound.is_nan() || self.clip_bound <= 0.0 {
            return Err(Error::config("dp.clip_bound", "must be > 0"));
        }
        if !(self.target_quantile > 0.0 && self.target_quantile < 1.0) {
            return Err(Error::config("dp.target_quantile", "must lie in (0, 1)"));
        }
        if !(self.adapt_rate.is_finite() && self.adapt_rate >= 0.0) {
            return Err(Error::config("dp.adapt_rate", "must be finite and >= 0"));
        }
        if !(self.noise_multiplier.is_finite() && self.noise_multiplier >= 0.0) {
            return Err(Error::config(
                "dp.noise_multiplier",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// Clip bound carried across rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpState {
    pub clip_bound: f64,
    pub target_quantile: f64,
    pub adapt_rate: f64,
    pub noise_multiplier: f64,
}

impl DpState {
    pub fn new(config: &DpConfig) -> Result<Self> {
        config.validate()?;
        Ok(DpState {
            clip_bound: config.clip_bound,
            target_quantile: config.target_quantile,
            adapt_rate: config.adapt_rate,
            noise_multiplier: config.noise_multiplier,
        })
    }
}

/// Scales `delta` down to norm `bound` if it is longer. The flag reports
/// whether scaling happened.
pub fn clip(delta: &ParamVector, bound: f64) -> (ParamVector, bool) {
    let norm = delta.norm();
    if norm > bound {
        let mut out = delta.scaled(bound / norm);
        // Rounding can leave the result a hair above the bound.
        let n = out.norm();
        if n > bound {
            out = out.scaled(bound / n);
        }
        (out, true)
    } else {
        (delta.clone(), false)
    }
}

/// Next clip bound: `C * exp(-rate * (unclipped_fraction - q))`.
pub fn adapt_bound(state: &DpState, clipped: &[bool]) -> Result<f64> {
    if clipped.is_empty() {
        return Err(Error::Empty("clip flag list"));
    }
    let unclipped = clipped.iter().filter(|c| !**c).count() as f64 / clipped.len() as f64;
    Ok(state.clip_bound * (-state.adapt_rate * (unclipped - state.target_quantile)).exp())
}

/// Adds iid Gaussian noise with per-coordinate standard deviation
/// `z * bound / participants`.
pub fn add_noise(
    delta: &ParamVector,
    z: f64,
    bound: f64,
    participants: usize,
    seed: u64,
) -> Result<ParamVector> {
    if !(z.is_finite() && z >= 0.0) {
        return Err(Error::config(
            "dp.noise_multiplier",
            "must be finite and >= 0",
        ));
    }
    if participants == 0 {
        return Err(Error::Empty("participant list"));
    }
    if z == 0.0 {
        return Ok(delta.clone());
    }
    let std = z * bound / participants as f64;
    let normal =
        Normal::new(0.0, std).map_err(|e| Error::config("dp.noise_multiplier", e.to_string()))?;
    let mut rng = seed::rng(seed);
    let mut out = delta.clone();
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}
