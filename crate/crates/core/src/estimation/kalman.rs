use nalgebra::{DMatrix, DVector};

use crate::linalg::symmetrize;
use crate::vehicle::DiscreteAugmentedModel;
use crate::{Error, Result};

/// Smallest variance accepted for a pseudo-measurement, m².
pub const PSEUDO_VARIANCE_FLOOR: f64 = 1e-10;

/// One value/variance pair of the pseudo-measurement channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoSample {
    pub value: f64,
    pub variance: f64,
}

/// Source of the extra road measurement appended to the onboard outputs.
///
/// The filter evaluates the whole run at once; `positions` are the vehicle's
/// (GPS) position estimates, one per step. Sources that are indexed by time
/// step instead of position ignore them but must match their length.
pub trait PseudoMeasurement: Send + Sync {
    fn evaluate(&self, positions: &[f64]) -> Result<Vec<PseudoSample>>;
}

/// Step-indexed channel backed by a stored trace, e.g. another vehicle's
/// filtered road estimate and its variance.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceChannel {
    pub values: Vec<f64>,
    pub variances: Vec<f64>,
}

impl PseudoMeasurement for TraceChannel {
    fn evaluate(&self, positions: &[f64]) -> Result<Vec<PseudoSample>> {
        if self.values.len() != positions.len() || self.variances.len() != positions.len() {
            return Err(Error::Dimension(format!(
                "trace channel has {} samples, run has {} steps",
                self.values.len(),
                positions.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&self.variances)
            .map(|(&value, &variance)| PseudoSample { value, variance })
            .collect())
    }
}

/// Prior on the initial augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialEstimate {
    pub state: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl InitialEstimate {
    /// Zero mean; unit variance on physical states, the stationary road
    /// variance `q_ww / (1 - a_ww^2)` on the road state.
    pub fn weakly_informative(model: &DiscreteAugmentedModel) -> Self {
        let n = model.state_dim();
        let w = model.road_index();
        let mut p = DMatrix::identity(n, n);
        let a = model.a[(w, w)];
        let q = model.q[(w, w)];
        if a.abs() < 1.0 && q > 0.0 {
            p[(w, w)] = q / (1.0 - a * a);
        }
        Self {
            state: DVector::zeros(n),
            covariance: p,
        }
    }
}

/// Quantities of one predict/correct cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub k: usize,
    pub x_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub x_upd: DVector<f64>,
    pub p_upd: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Run the Kalman filter over `measurements`.
///
/// Step 0 corrects the prior `init` directly; every later step predicts
/// through `model.a` first. With a pseudo-measurement channel, row
/// `[0 .. 0 1]` is appended to `C` and the channel variance (floored at
/// [`PSEUDO_VARIANCE_FLOOR`]) to the diagonal of `R` at every step.
pub fn kf_run(
    model: &DiscreteAugmentedModel,
    measurements: &[DVector<f64>],
    channel: Option<&dyn PseudoMeasurement>,
    positions: &[f64],
    init: &InitialEstimate,
) -> Result<Vec<FilterStep>> {
    let n = model.state_dim();
    let r = model.output_dim();
    if init.state.len() != n || init.covariance.shape() != (n, n) {
        return Err(Error::Dimension("initial estimate does not match the model".into()));
    }
    if init.covariance.clone().cholesky().is_none() {
        return Err(Error::param("P0", "must be positive definite"));
    }
    if positions.len() != measurements.len() {
        return Err(Error::Dimension(format!(
            "{} positions for {} measurements",
            positions.len(),
            measurements.len()
        )));
    }
    let pseudo = match channel {
        Some(ch) => Some(ch.evaluate(positions)?),
        None => None,
    };

    let rows = r + usize::from(pseudo.is_some());
    let mut c = DMatrix::zeros(rows, n);
    c.view_mut((0, 0), (r, n)).copy_from(&model.c);
    if pseudo.is_some() {
        c[(r, model.road_index())] = 1.0;
    }
    let mut r_bar = DMatrix::zeros(rows, rows);
    r_bar.view_mut((0, 0), (r, r)).copy_from(&model.r);
    let ct = c.transpose();
    let identity = DMatrix::<f64>::identity(n, n);

    let mut steps = Vec::with_capacity(measurements.len());
    let mut x = init.state.clone();
    let mut p = init.covariance.clone();
    for (k, y) in measurements.iter().enumerate() {
        if y.len() != r {
            return Err(Error::Dimension(format!(
                "measurement {k} has {} rows, model has {r}",
                y.len()
            )));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("measurement {k}")));
        }
        if k > 0 {
            x = &model.a * &x;
            p = &model.a * &p * model.a.transpose() + &model.q;
            symmetrize(&mut p);
        }
        let x_pred = x.clone();
        let p_pred = p.clone();

        let mut y_bar = DVector::zeros(rows);
        y_bar.rows_mut(0, r).copy_from(y);
        if let Some(samples) = &pseudo {
            let s = samples[k];
            if !(s.value.is_finite() && s.variance.is_finite()) {
                return Err(Error::NonFinite(format!("pseudo-measurement {k}")));
            }
            y_bar[r] = s.value;
            r_bar[(r, r)] = s.variance.max(PSEUDO_VARIANCE_FLOOR);
        }

        let s = &c * &p * &ct + &r_bar;
        let chol = s.cholesky().ok_or(Error::SingularInnovation { step: k })?;
        // gain = P C^T S^-1, computed as (S^-1 C P)^T.
        let gain = chol.solve(&(&c * &p)).transpose();
        let innovation = &y_bar - &c * &x;
        x = &x + &gain * innovation;
        // Joseph form keeps P symmetric positive semidefinite.
        let i_kc = &identity - &gain * &c;
        p = &i_kc * &p * i_kc.transpose() + &gain * &r_bar * gain.transpose();
        symmetrize(&mut p);

        steps.push(FilterStep {
            k,
            x_pred,
            p_pred,
            x_upd: x.clone(),
            p_upd: p.clone(),
            gain,
        });
    }
    Ok(steps)
}
