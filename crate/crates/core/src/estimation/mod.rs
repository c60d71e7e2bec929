//! Onboard estimation: augmented Kalman filter with an optional
//! pseudo-measurement channel, plus fixed-interval and fixed-lag smoothing.

mod kalman;
mod smoother;

use std::io::Write;

use nalgebra::DVector;

pub use kalman::{
    kf_run, FilterStep, InitialEstimate, PseudoMeasurement, PseudoSample, TraceChannel,
    PSEUDO_VARIANCE_FLOOR,
};
pub use smoother::{fixed_lag_smooth, rts_smooth, SmoothedState};

use crate::io::{write_csv_rows, Cell};
use crate::vehicle::DiscreteAugmentedModel;
use crate::Result;

/// Per-step road estimates of one vehicle pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrace {
    /// Position estimates (GPS), m.
    pub positions: Vec<f64>,
    pub filtered: Vec<f64>,
    pub filtered_var: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub smoothed_var: Vec<f64>,
    /// Filtered augmented state at every step.
    pub states: Vec<DVector<f64>>,
}

impl EstimateTrace {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Columns `k, s_hat_m, w_filt_m, w_filt_var, w_smooth_m, w_smooth_var`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = (0..self.len()).map(|k| {
            vec![
                Cell::from(k),
                self.positions[k].into(),
                self.filtered[k].into(),
                self.filtered_var[k].into(),
                self.smoothed[k].into(),
                self.smoothed_var[k].into(),
            ]
        });
        write_csv_rows(
            out,
            &["k", "s_hat_m", "w_filt_m", "w_filt_var", "w_smooth_m", "w_smooth_var"],
            rows,
        )
    }
}

/// Smoothing applied after the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    FixedInterval,
    FixedLag(usize),
}

/// Filter, smooth and collect the road-state trace.
pub fn estimate_road(
    model: &DiscreteAugmentedModel,
    measurements: &[DVector<f64>],
    channel: Option<&dyn PseudoMeasurement>,
    positions: &[f64],
    init: &InitialEstimate,
    smoothing: Smoothing,
) -> Result<EstimateTrace> {
    let steps = kf_run(model, measurements, channel, positions, init)?;
    let smoothed = match smoothing {
        Smoothing::FixedInterval => rts_smooth(model, &steps)?,
        Smoothing::FixedLag(lag) => fixed_lag_smooth(model, &steps, lag.min(steps.len()))?,
    };
    let w = model.road_index();
    Ok(EstimateTrace {
        positions: positions.to_vec(),
        filtered: steps.iter().map(|s| s.x_upd[w]).collect(),
        filtered_var: steps.iter().map(|s| s.p_upd[(w, w)]).collect(),
        smoothed: smoothed.iter().map(|s| s.x[w]).collect(),
        smoothed_var: smoothed.iter().map(|s| s.p[(w, w)]).collect(),
        states: steps.into_iter().map(|s| s.x_upd).collect(),
    })
}
