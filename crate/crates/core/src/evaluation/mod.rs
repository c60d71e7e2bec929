//! Error metrics, the baseline schemes and the MMSE oracle.

pub mod oracle;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cloud::CloudState;
use crate::estimation::{EstimateTrace, PseudoMeasurement, TraceChannel};
use crate::gp::{GpModel, RegressionMode};
use crate::io::{write_csv_rows, Cell};
use crate::road::RoadProfile;
use crate::simulation::{estimate_vehicle, run_procedure, simulate_fleet, vehicle_metrics, Fleet, Scenario};
use crate::{Error, Result};

/// Root mean squared difference.
pub fn rmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(Error::Dimension(format!(
            "rmse of {} values against {}",
            estimate.len(),
            truth.len()
        )));
    }
    let ss: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / estimate.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Each vehicle alone.
    KfOnly,
    /// Previous vehicle's filtered trace as the pseudo-measurement.
    KfChain,
    NigpPsm,
    GpPsm,
    /// Pointwise mean of the kf-only smoothed traces.
    AveragedKf,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::KfOnly,
        Scheme::KfChain,
        Scheme::NigpPsm,
        Scheme::GpPsm,
        Scheme::AveragedKf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::KfOnly => "kf-only",
            Scheme::KfChain => "kf-chain",
            Scheme::NigpPsm => "nigp-psm",
            Scheme::GpPsm => "gp-psm",
            Scheme::AveragedKf => "averaged-kf",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    /// 1-based.
    pub vehicle_index: usize,
    pub rmse_filtered: f64,
    pub rmse_smoothed: f64,
    /// Cloud regression (or fused estimate) error after this vehicle.
    pub cloud_rmse: Option<f64>,
    pub mean_posterior_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scheme: Scheme,
    pub vehicles: Vec<VehicleMetrics>,
    /// Fitted GPS noise std after the last refit (noisy-input runs).
    pub input_noise_std: Option<f64>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&VehicleMetrics> {
        self.vehicles.last()
    }
}

/// Columns `scheme, vehicle_index, rmse_filtered_m, rmse_smoothed_m,
/// cloud_rmse_m, mean_posterior_std_m`; absent values are empty.
pub fn write_metrics_csv<W: Write>(out: W, runs: &[RunMetrics]) -> Result<()> {
    let rows = runs.iter().flat_map(|run| {
        run.vehicles.iter().map(move |v| {
            vec![
                Cell::from(run.scheme.as_str()),
                v.vehicle_index.into(),
                v.rmse_filtered.into(),
                v.rmse_smoothed.into(),
                v.cloud_rmse.into(),
                v.mean_posterior_std.into(),
            ]
        })
    });
    write_csv_rows(
        out,
        &[
            "scheme",
            "vehicle_index",
            "rmse_filtered_m",
            "rmse_smoothed_m",
            "cloud_rmse_m",
            "mean_posterior_std_m",
        ],
        rows,
    )
}

/// Result of one scheme on a shared fleet.
#[derive(Debug, Clone)]
pub struct SchemeOutcome {
    pub metrics: RunMetrics,
    /// Per-vehicle traces; empty for the averaged benchmark.
    pub traces: Vec<EstimateTrace>,
    /// Regression after each upload (regression schemes only).
    pub snapshots: Vec<Arc<GpModel>>,
    /// Final cloud of the regression schemes.
    pub cloud: Option<CloudState>,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub truth: RoadProfile,
    pub schemes: Vec<SchemeOutcome>,
}

impl BaselineOutcome {
    pub fn get(&self, scheme: Scheme) -> Option<&SchemeOutcome> {
        self.schemes.iter().find(|s| s.metrics.scheme == scheme)
    }

    pub fn metrics(&self) -> Vec<RunMetrics> {
        self.schemes.iter().map(|s| s.metrics.clone()).collect()
    }
}

/// Simulate the fleet once and run every requested scheme on it.
pub fn run_baselines(scenario: &Scenario, schemes: &[Scheme]) -> Result<BaselineOutcome> {
    let fleet = simulate_fleet(scenario)?;
    run_baselines_on(scenario, &fleet, schemes)
}

pub fn run_baselines_on(scenario: &Scenario, fleet: &Fleet, schemes: &[Scheme]) -> Result<BaselineOutcome> {
    let mut kf_only: Option<Vec<EstimateTrace>> = None;
    let mut out = Vec::new();
    for &scheme in schemes {
        let outcome = match scheme {
            Scheme::KfOnly | Scheme::AveragedKf => {
                let traces = match &kf_only {
                    Some(t) => t.clone(),
                    None => {
                        let t = fleet
                            .vehicles
                            .iter()
                            .map(|v| estimate_vehicle(scenario, v, None))
                            .collect::<Result<Vec<_>>>()?;
                        kf_only = Some(t.clone());
                        t
                    }
                };
                if scheme == Scheme::KfOnly {
                    per_vehicle(scheme, fleet, traces)?
                } else {
                    averaged(scenario, fleet, &traces)?
                }
            }
            Scheme::KfChain => {
                let mut traces: Vec<EstimateTrace> = Vec::new();
                for v in &fleet.vehicles {
                    let channel = traces.last().map(|prev| TraceChannel {
                        values: prev.filtered.clone(),
                        variances: prev.filtered_var.clone(),
                    });
                    let t = estimate_vehicle(scenario, v, channel.as_ref().map(|c| c as &dyn PseudoMeasurement))?;
                    traces.push(t);
                }
                per_vehicle(scheme, fleet, traces)?
            }
            Scheme::NigpPsm | Scheme::GpPsm => {
                let mode = if scheme == Scheme::NigpPsm {
                    RegressionMode::NoisyInput
                } else {
                    RegressionMode::Standard
                };
                let res = run_procedure(scenario, fleet, mode)?;
                SchemeOutcome {
                    metrics: res.metrics,
                    traces: res.traces,
                    snapshots: res.snapshots,
                    cloud: Some(res.cloud),
                }
            }
        };
        out.push(outcome);
    }
    Ok(BaselineOutcome {
        truth: fleet.truth.clone(),
        schemes: out,
    })
}

fn per_vehicle(scheme: Scheme, fleet: &Fleet, traces: Vec<EstimateTrace>) -> Result<SchemeOutcome> {
    let vehicles = fleet
        .vehicles
        .iter()
        .zip(&traces)
        .map(|(v, t)| vehicle_metrics(v, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(SchemeOutcome {
        metrics: RunMetrics {
            scheme,
            vehicles,
            input_noise_std: None,
        },
        traces,
        snapshots: Vec::new(),
        cloud: None,
    })
}

/// Row `i` scores the mean of the first `i` kf-only traces against the
/// truth on the nominal segment grid. Each trace is read at the grid through
/// its own position estimates, as the cloud would see it.
fn averaged(scenario: &Scenario, fleet: &Fleet, traces: &[EstimateTrace]) -> Result<SchemeOutcome> {
    let grid = scenario.segment_grid();
    let truth: Vec<f64> = grid.iter().map(|s| fleet.truth.elevation_at(*s)).collect();
    let n = grid.len();
    let mut filt = vec![0.0; n];
    let mut smooth = vec![0.0; n];
    let mut vehicles = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let (f, sm) = (resample(&t.positions, &t.filtered, &grid), resample(&t.positions, &t.smoothed, &grid));
        for k in 0..n {
            filt[k] += f[k];
            smooth[k] += sm[k];
        }
        let count = (i + 1) as f64;
        let f: Vec<f64> = filt.iter().map(|v| v / count).collect();
        let s: Vec<f64> = smooth.iter().map(|v| v / count).collect();
        let rs = rmse(&s, &truth)?;
        vehicles.push(VehicleMetrics {
            vehicle_index: i + 1,
            rmse_filtered: rmse(&f, &truth)?,
            rmse_smoothed: rs,
            cloud_rmse: Some(rs),
            mean_posterior_std: None,
        });
    }
    Ok(SchemeOutcome {
        metrics: RunMetrics {
            scheme: Scheme::AveragedKf,
            vehicles,
            input_noise_std: None,
        },
        traces: Vec::new(),
        snapshots: Vec::new(),
        cloud: None,
    })
}

/// Piecewise-linear interpolation of scattered `(xs, ys)` at `queries`,
/// held constant beyond the data.
fn resample(xs: &[f64], ys: &[f64], queries: &[f64]) -> Vec<f64> {
    let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    queries
        .iter()
        .map(|&q| {
            let i = pts.partition_point(|p| p.0 < q);
            if i == 0 {
                return pts[0].1;
            }
            if i == pts.len() {
                return pts[i - 1].1;
            }
            let ((x0, y0), (x1, y1)) = (pts[i - 1], pts[i]);
            if x1 > x0 {
                y0 + (y1 - y0) * (q - x0) / (x1 - x0)
            } else {
                y1
            }
        })
        .collect()
}
