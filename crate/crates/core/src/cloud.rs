//! In-process cloud: aggregates per-vehicle smoothed road estimates, refits
//! the regression after every upload and serves it back as a
//! pseudo-measurement channel.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::estimation::{PseudoMeasurement, PseudoSample};
use crate::gp::{self, FitOptions, GpHyperParams, GpModel, RegressionMode, TrainingData};
use crate::vehicle::speed_scale;
use crate::{rng, Error, Result};

const FORMAT: &str = "cloudstate/1";

/// One vehicle's pass over the segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub vehicle_id: usize,
    pub segment_id: String,
    /// Estimated (GPS) positions, m.
    pub positions: Vec<f64>,
    /// Smoothed road estimates, m, in the vehicle's own speed units.
    pub estimates: Vec<f64>,
    /// Smoothed estimate variances, m².
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
    /// m/s
    pub speed: f64,
    /// Logical upload time.
    pub timestamp: u64,
}

impl Contribution {
    fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Dataset(format!("vehicle {} uploaded no points", self.vehicle_id)));
        }
        if self.estimates.len() != n || self.variances.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::Dataset(format!(
                "vehicle {}: sequence lengths differ ({} positions, {} estimates)",
                self.vehicle_id,
                n,
                self.estimates.len()
            )));
        }
        if self.positions.iter().chain(&self.estimates).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("contribution of vehicle {}", self.vehicle_id)));
        }
        speed_scale(self.speed, 1.0)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CloudDataset {
    pub segment_id: String,
    pub contributions: Vec<Contribution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudConfig {
    pub mode: RegressionMode,
    /// m/s
    pub nominal_speed: f64,
    pub fit: FitOptions,
    /// Restarts for refits after the first, which start from the previous
    /// hyperparameters.
    pub refit_restarts: usize,
    /// Add each point's smoothed variance to the noise diagonal.
    pub heteroscedastic: bool,
    /// Starting input-noise std of every noisy-input fit, m.
    pub initial_input_noise_std: f64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            mode: RegressionMode::NoisyInput,
            nominal_speed: 40.0 / 1.5,
            fit: FitOptions::default(),
            refit_restarts: 1,
            heteroscedastic: false,
            initial_input_noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CloudState {
    pub config: CloudConfig,
    pub dataset: CloudDataset,
    model: Option<Arc<GpModel>>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    config: CloudConfig,
    dataset: CloudDataset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<serde_json::Value>,
}

impl CloudState {
    pub fn new(segment_id: impl Into<String>, config: CloudConfig) -> Result<Self> {
        speed_scale(config.nominal_speed, 1.0)?;
        Ok(Self {
            config,
            dataset: CloudDataset {
                segment_id: segment_id.into(),
                contributions: Vec::new(),
            },
            model: None,
        })
    }

    /// Current regression, absent before the first upload.
    pub fn model(&self) -> Option<&Arc<GpModel>> {
        self.model.as_ref()
    }

    pub fn vehicle_count(&self) -> usize {
        self.dataset.contributions.len()
    }

    /// Aggregated training set in nominal-speed units.
    pub fn training_data(&self) -> Result<TrainingData> {
        let v0 = self.config.nominal_speed;
        let mut data = TrainingData::default();
        let mut extra = Vec::new();
        for c in &self.dataset.contributions {
            let f = speed_scale(v0, c.speed)?;
            data.inputs.extend_from_slice(&c.positions);
            data.targets.extend(c.estimates.iter().map(|w| w * f));
            if self.config.heteroscedastic {
                match &c.variances {
                    Some(v) => extra.extend(v.iter().map(|v| v * f * f)),
                    None => extra.extend(std::iter::repeat_n(0.0, c.positions.len())),
                }
            }
        }
        if self.config.heteroscedastic {
            data.extra_noise = Some(extra);
        }
        Ok(data)
    }

    /// Append a contribution and refit over the whole dataset.
    pub fn upload(&mut self, contribution: Contribution) -> Result<Arc<GpModel>> {
        contribution.validate()?;
        if contribution.segment_id != self.dataset.segment_id {
            return Err(Error::Dataset(format!(
                "segment `{}` uploaded to cloud for `{}`",
                contribution.segment_id, self.dataset.segment_id
            )));
        }
        if self
            .dataset
            .contributions
            .iter()
            .any(|c| c.vehicle_id == contribution.vehicle_id)
        {
            return Err(Error::Dataset(format!("duplicate vehicle id {}", contribution.vehicle_id)));
        }
        self.dataset.contributions.push(contribution);
        match self.refit() {
            Ok(m) => Ok(m),
            Err(e) => {
                self.dataset.contributions.pop();
                Err(e)
            }
        }
    }

    fn refit(&mut self) -> Result<Arc<GpModel>> {
        let data = self.training_data()?;
        let count = self.vehicle_count() as u64;
        let mut options = self.config.fit;
        options.seed = rng::mix(self.config.fit.seed, count);
        let model = match &self.model {
            Some(previous) if previous.mode == self.config.mode => {
                options.restarts = self.config.refit_restarts;
                // warm start at the previous fit, input noise reset
                let init = GpHyperParams {
                    input_noise_std: self.config.initial_input_noise_std,
                    ..previous.hyper
                };
                gp::fit(data, self.config.mode, init, &options)?
            }
            _ if data.len() < 2 => GpModel::prior(self.config.mode, GpHyperParams::from_data(&data.inputs, &data.targets))?,
            _ => {
                let mut init = GpHyperParams::from_data(&data.inputs, &data.targets);
                init.input_noise_std = self.config.initial_input_noise_std;
                gp::fit(data, self.config.mode, init, &options)?
            }
        };
        let model = Arc::new(model);
        self.model = Some(Arc::clone(&model));
        Ok(model)
    }

    /// Channel for a vehicle driving at `speed`; `None` while the cloud is
    /// empty.
    pub fn download(&self, speed: f64) -> Result<Option<GpChannel>> {
        let Some(model) = &self.model else {
            return Ok(None);
        };
        Ok(Some(GpChannel {
            model: Arc::clone(model),
            scale: speed_scale(speed, self.config.nominal_speed)?,
        }))
    }

    pub fn to_json(&self) -> Result<String> {
        let model = match &self.model {
            Some(m) => Some(serde_json::from_str(&m.to_json()?)?),
            None => None,
        };
        let doc = Document {
            format: FORMAT.into(),
            config: self.config,
            dataset: self.dataset.clone(),
            model,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::Dataset(format!("unsupported cloud format `{}`", doc.format)));
        }
        let model = match doc.model {
            Some(v) => Some(Arc::new(GpModel::from_json(&serde_json::to_string(&v)?)?)),
            None => None,
        };
        for c in &doc.dataset.contributions {
            c.validate()?;
        }
        Ok(Self {
            config: doc.config,
            dataset: doc.dataset,
            model,
        })
    }
}

/// Snapshot of the cloud regression, rescaled to one vehicle's speed:
/// value `sqrt(V/V0) * mean`, variance `(V/V0) * var`.
#[derive(Debug, Clone)]
pub struct GpChannel {
    pub model: Arc<GpModel>,
    pub scale: f64,
}

impl PseudoMeasurement for GpChannel {
    fn evaluate(&self, positions: &[f64]) -> Result<Vec<PseudoSample>> {
        let p = self.model.predict(positions);
        let s2 = self.scale * self.scale;
        Ok(p.mean
            .iter()
            .zip(&p.variance)
            .map(|(m, v)| PseudoSample {
                value: self.scale * m,
                variance: s2 * v,
            })
            .collect())
    }
}
