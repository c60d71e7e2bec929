//! Gaussian process regression of road elevation over position.
//!
//! Zero prior mean, exponentiated-quadratic kernel
//! `k(s, s') = sf^2 exp(-(s - s')^2 / (2 l^2))`, Gaussian output noise.
//! The noisy-input variant (NIGP) adds, per training point, the output
//! noise induced by input noise through a local linearization of the
//! posterior mean: `slope(s_j)^2 * ss^2`. Slopes come from the previous fit
//! and are held fixed while the hyperparameters are re-optimized.

mod dense;
mod model;
pub mod optimize;

use serde::{Deserialize, Serialize};

pub use dense::{JITTER_MAX, JITTER_START};
pub use model::{fit, fit_from, log_marginal_likelihood, FitDiagnostics, FitOptions, GpModel, Prediction, TrainingData};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionMode {
    Standard,
    #[default]
    NoisyInput,
}

impl RegressionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gp" | "standard" => Some(Self::Standard),
            "nigp" | "noisy-input" => Some(Self::NoisyInput),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Standard => "gp",
            Self::NoisyInput => "nigp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    /// Signal standard deviation, m.
    pub signal_std: f64,
    /// Lengthscale, m.
    pub lengthscale: f64,
    /// Output noise standard deviation, m.
    pub noise_std: f64,
    /// Input (GPS) noise standard deviation, m; zero for standard GP.
    pub input_noise_std: f64,
}

impl GpHyperParams {
    pub fn validate(&self, mode: RegressionMode) -> Result<()> {
        for (name, v) in [
            ("signal_std", self.signal_std),
            ("lengthscale", self.lengthscale),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        let ok = match mode {
            RegressionMode::Standard => self.input_noise_std >= 0.0,
            RegressionMode::NoisyInput => self.input_noise_std > 0.0,
        };
        if !(ok && self.input_noise_std.is_finite()) {
            return Err(Error::param(
                "input_noise_std",
                format!("invalid for {mode:?}: {}", self.input_noise_std),
            ));
        }
        Ok(())
    }

    /// Data-driven starting point: target spread, a tenth of the input range,
    /// 10% noise, 0.1 m input noise.
    pub fn from_data(inputs: &[f64], targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let spread = (var + mean * mean).sqrt();
        let spread = if spread > 0.0 && spread.is_finite() { spread } else { 1.0 };
        let (lo, hi) = inputs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(*s), h.max(*s)));
        let range = hi - lo;
        let lengthscale = if range > 0.0 && range.is_finite() { range / 10.0 } else { 1.0 };
        Self {
            signal_std: spread,
            lengthscale,
            noise_std: 0.1 * spread,
            input_noise_std: 0.1,
        }
    }
}

/// Exponentiated-quadratic covariance.
pub fn kernel(s: f64, s_prime: f64, hp: &GpHyperParams) -> f64 {
    let d = s - s_prime;
    hp.signal_std * hp.signal_std * (-0.5 * d * d / (hp.lengthscale * hp.lengthscale)).exp()
}

#[cfg(test)]
mod tests;
