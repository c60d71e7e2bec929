//! Scenario assembly and the end-to-end crowdsourcing loop.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cloud::{CloudConfig, CloudState, Contribution};
use crate::estimation::{estimate_road, EstimateTrace, InitialEstimate, PseudoMeasurement, Smoothing};
use crate::evaluation::{rmse, RunMetrics, Scheme, VehicleMetrics};
use crate::gp::{FitOptions, GpModel, RegressionMode};
use crate::road::{corrupt_measurements, corrupt_positions, generate_profile, NoisyMeasurements, RoadProfile, SensingConfig};
use crate::vehicle::{
    augment_and_discretize, build_continuous_model, DiscreteAugmentedModel, DiscretizationOptions,
    QuarterCarParams, RoadModelParams,
};
use crate::{rng, Error, Result};

pub const SEGMENT_ID: &str = "segment-1";

/// Independent seeds for each stochastic source of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBundle {
    pub road: u64,
    pub measurement: u64,
    pub gps: u64,
    pub optimizer: u64,
}

impl SeedBundle {
    pub fn from_master(seed: u64) -> Self {
        Self {
            road: rng::mix(seed, 1),
            measurement: rng::mix(seed, 2),
            gps: rng::mix(seed, 3),
            optimizer: rng::mix(seed, 4),
        }
    }

    /// Seeds of vehicle `index` (1-based) for the measurement and GPS streams.
    pub fn vehicle(&self, index: usize) -> (u64, u64) {
        (rng::mix(self.measurement, index as u64), rng::mix(self.gps, index as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub fleet: Vec<QuarterCarParams>,
    pub road: RoadModelParams,
    /// Per-vehicle speed, m/s.
    pub speeds: Vec<f64>,
    pub nominal_speed: f64,
    pub sample_time: f64,
    pub n_steps: usize,
    pub sensing: SensingConfig,
    /// Fixed-lag window; `None` smooths over the whole pass.
    pub lag: Option<usize>,
    pub mode: RegressionMode,
    pub seeds: SeedBundle,
    pub discretization: DiscretizationOptions,
    pub fit: FitOptions,
    pub refit_restarts: usize,
    pub heteroscedastic: bool,
    /// Factor applied to the realized noise variances before they become
    /// the filter's `R`.
    pub noise_miscalibration: f64,
    /// All vehicles drive the same road realization.
    pub shared_road: bool,
    pub initial_input_noise_std: f64,
}

/// Reference fleet: vehicle `i` has `M_s = 300 (90 + i) / 100` kg and
/// `k_s = 16000 (90 + i) / 100` N/m.
pub fn table1_fleet(n: usize) -> Result<Vec<QuarterCarParams>> {
    if n == 0 {
        return Err(Error::param("fleet", "need at least one vehicle"));
    }
    (1..=n)
        .map(|i| {
            let f = (90 + i) as f64 / 100.0;
            QuarterCarParams::new(300.0 * f, 60.0, 16_000.0 * f, 190_000.0, 1000.0)
        })
        .collect()
}

/// The reference filter believes its sensors are ten times more precise (in
/// std) than they are.
pub const TABLE1_MISCALIBRATION: f64 = 0.01;

impl Scenario {
    /// Desk-scale reference setup: 40 m covered in 1.5 s, 151 steps at 10 ms.
    pub fn table1(n_vehicles: usize, seed: u64) -> Result<Self> {
        let speed = 40.0 / 1.5;
        Ok(Self {
            fleet: table1_fleet(n_vehicles)?,
            road: RoadModelParams::new(-0.01, 0.0328)?,
            speeds: vec![speed; n_vehicles],
            nominal_speed: speed,
            sample_time: 0.01,
            n_steps: 151,
            sensing: SensingConfig::default(),
            lag: Some(25),
            mode: RegressionMode::NoisyInput,
            seeds: SeedBundle::from_master(seed),
            discretization: DiscretizationOptions::default(),
            fit: FitOptions::default(),
            refit_restarts: 1,
            heteroscedastic: false,
            noise_miscalibration: TABLE1_MISCALIBRATION,
            shared_road: true,
            initial_input_noise_std: 0.1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.fleet.is_empty() {
            return Err(Error::param("fleet", "need at least one vehicle"));
        }
        for (i, p) in self.fleet.iter().enumerate() {
            p.validate().map_err(|e| e.in_vehicle(i + 1))?;
        }
        if self.speeds.len() != self.fleet.len() {
            return Err(Error::param(
                "speeds",
                format!("{} speeds for {} vehicles", self.speeds.len(), self.fleet.len()),
            ));
        }
        if self.speeds.iter().chain([&self.nominal_speed]).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param("speeds", "must be positive"));
        }
        if !(self.sample_time.is_finite() && self.sample_time > 0.0) {
            return Err(Error::param("sample_time", "must be positive"));
        }
        if self.n_steps < 2 {
            return Err(Error::param("n_steps", "must be at least 2"));
        }
        if self.lag.is_some_and(|l| l > self.n_steps) {
            return Err(Error::param("lag", "must not exceed n_steps"));
        }
        if !(self.noise_miscalibration.is_finite() && self.noise_miscalibration > 0.0) {
            return Err(Error::param("noise_miscalibration", "must be positive"));
        }
        if !(self.initial_input_noise_std.is_finite() && self.initial_input_noise_std > 0.0) {
            return Err(Error::param("initial_input_noise_std", "must be positive"));
        }
        self.road.validate()?;
        self.sensing.validate()
    }

    pub fn vehicle_count(&self) -> usize {
        self.fleet.len()
    }

    fn smoothing(&self) -> Smoothing {
        match self.lag {
            Some(l) => Smoothing::FixedLag(l),
            None => Smoothing::FixedInterval,
        }
    }

    /// Evaluation grid: the nominal-speed sample positions of the segment.
    pub fn segment_grid(&self) -> Vec<f64> {
        (0..self.n_steps)
            .map(|k| k as f64 * self.nominal_speed * self.sample_time)
            .collect()
    }

    pub fn cloud_config(&self, mode: RegressionMode) -> CloudConfig {
        CloudConfig {
            mode,
            nominal_speed: self.nominal_speed,
            fit: FitOptions {
                seed: self.seeds.optimizer,
                ..self.fit
            },
            refit_restarts: self.refit_restarts,
            heteroscedastic: self.heteroscedastic,
            initial_input_noise_std: self.initial_input_noise_std,
        }
    }

    /// Ground truth long enough for the fastest vehicle.
    fn truth_profile(&self, seed: u64) -> Result<RoadProfile> {
        let fastest = self.speeds.iter().fold(self.nominal_speed, |m, v| m.max(*v));
        let steps = ((self.n_steps - 1) as f64 * fastest / self.nominal_speed).ceil() as usize + 1;
        generate_profile(&self.road, self.nominal_speed, self.sample_time, steps, seed)
    }
}

/// Everything one vehicle senses on its pass, plus the truth it is scored
/// against.
#[derive(Debug, Clone)]
pub struct VehicleRun {
    /// 1-based.
    pub index: usize,
    pub speed: f64,
    /// Filter model with the (possibly miscalibrated) measurement noise.
    pub model: DiscreteAugmentedModel,
    pub measurements: Vec<DVector<f64>>,
    pub noise: NoisyMeasurements,
    pub true_positions: Vec<f64>,
    pub gps_positions: Vec<f64>,
    /// Road elevation under the wheel at each step, m.
    pub true_road: Vec<f64>,
}

/// Simulated sensing of a whole fleet over one segment.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub truth: RoadProfile,
    pub vehicles: Vec<VehicleRun>,
}

/// Drive vehicle `index` (1-based) over `truth` and record its sensors.
///
/// The physical states are propagated with the augmented discrete model,
/// using the realized road samples in the road slot; the within-step road
/// innovation reaches the physical states through its regression on the
/// road-state noise (`Q_pw / Q_ww`).
pub fn simulate_vehicle(scenario: &Scenario, index: usize, truth: &RoadProfile) -> Result<VehicleRun> {
    let params = scenario
        .fleet
        .get(index.wrapping_sub(1))
        .ok_or_else(|| Error::param("vehicle", format!("no vehicle {index}")))?;
    let speed = scenario.speeds[index - 1];
    let cont = build_continuous_model(params)?;
    let base = augment_and_discretize(&cont, &scenario.road, scenario.sample_time, scenario.discretization)?;
    let n = base.state_dim() - 1;
    let w_idx = n;

    let true_positions: Vec<f64> = (0..scenario.n_steps)
        .map(|k| k as f64 * speed * scenario.sample_time)
        .collect();
    let true_road: Vec<f64> = true_positions.iter().map(|s| truth.elevation_at(*s)).collect();

    let a_ww = base.a[(w_idx, w_idx)];
    let q_ww = base.q[(w_idx, w_idx)];
    let coupling: DVector<f64> = if q_ww > 0.0 {
        base.q.view((0, w_idx), (n, 1)).column(0) / q_ww
    } else {
        DVector::zeros(n)
    };
    let a_pp = base.a.view((0, 0), (n, n)).into_owned();
    let a_pw: DVector<f64> = base.a.view((0, w_idx), (n, 1)).column(0).into_owned();
    let c_p = base.c.view((0, 0), (base.output_dim(), n)).into_owned();

    let mut x = DVector::zeros(n);
    let mut clean = Vec::with_capacity(scenario.n_steps);
    for k in 0..scenario.n_steps {
        if k > 0 {
            let innovation = true_road[k] - a_ww * true_road[k - 1];
            x = &a_pp * &x + &a_pw * true_road[k - 1] + &coupling * innovation;
        }
        clean.push((&c_p * &x).iter().copied().collect::<Vec<f64>>());
    }

    let (meas_seed, gps_seed) = scenario.seeds.vehicle(index);
    let noise = corrupt_measurements(&clean, &scenario.sensing, meas_seed)?;
    let gps_positions = corrupt_positions(&true_positions, scenario.sensing.gps_std, gps_seed)?;
    let r = DMatrix::from_diagonal(&DVector::from_iterator(
        noise.noise_variances.len(),
        noise.noise_variances.iter().map(|v| v * scenario.noise_miscalibration),
    ));
    let model = base.with_measurement_noise(r)?;
    let measurements = noise.outputs.iter().map(|y| DVector::from_column_slice(y)).collect();
    Ok(VehicleRun {
        index,
        speed,
        model,
        measurements,
        noise,
        true_positions,
        gps_positions,
        true_road,
    })
}

/// Ground truth and sensing for every vehicle of `scenario`.
pub fn simulate_fleet(scenario: &Scenario) -> Result<Fleet> {
    scenario.validate()?;
    let truth = scenario.truth_profile(scenario.seeds.road)?;
    let vehicles = (1..=scenario.vehicle_count())
        .map(|i| {
            let run = if scenario.shared_road {
                simulate_vehicle(scenario, i, &truth)
            } else {
                let own = scenario.truth_profile(rng::mix(scenario.seeds.road, i as u64))?;
                simulate_vehicle(scenario, i, &own)
            };
            run.map_err(|e| e.in_vehicle(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fleet { truth, vehicles })
}

/// Filter and smooth one vehicle's pass, optionally with a
/// pseudo-measurement channel.
pub fn estimate_vehicle(
    scenario: &Scenario,
    vehicle: &VehicleRun,
    channel: Option<&dyn PseudoMeasurement>,
) -> Result<EstimateTrace> {
    let init = InitialEstimate::weakly_informative(&vehicle.model);
    estimate_road(
        &vehicle.model,
        &vehicle.measurements,
        channel,
        &vehicle.gps_positions,
        &init,
        scenario.smoothing(),
    )
    .map_err(|e| e.in_vehicle(vehicle.index))
}

pub(crate) fn vehicle_metrics(vehicle: &VehicleRun, trace: &EstimateTrace) -> Result<VehicleMetrics> {
    Ok(VehicleMetrics {
        vehicle_index: vehicle.index,
        rmse_filtered: rmse(&trace.filtered, &vehicle.true_road)?,
        rmse_smoothed: rmse(&trace.smoothed, &vehicle.true_road)?,
        cloud_rmse: None,
        mean_posterior_std: None,
    })
}

/// Cloud regression error and mean posterior std over the segment grid.
pub(crate) fn cloud_metrics(model: &GpModel, grid: &[f64], truth: &RoadProfile) -> Result<(f64, f64)> {
    let p = model.predict(grid);
    let reference: Vec<f64> = grid.iter().map(|s| truth.elevation_at(*s)).collect();
    let std = p.variance.iter().map(|v| v.sqrt()).sum::<f64>() / grid.len() as f64;
    Ok((rmse(&p.mean, &reference)?, std))
}

/// Outputs of one crowdsourcing run.
#[derive(Debug, Clone)]
pub struct CollaborativeResult {
    pub truth: RoadProfile,
    pub traces: Vec<EstimateTrace>,
    /// Regression after each upload.
    pub snapshots: Vec<Arc<GpModel>>,
    pub metrics: RunMetrics,
    pub cloud: CloudState,
}

/// Simulate the fleet and run the crowdsourcing loop with `scenario.mode`.
pub fn run_collaborative(scenario: &Scenario) -> Result<CollaborativeResult> {
    let fleet = simulate_fleet(scenario)?;
    run_procedure(scenario, &fleet, scenario.mode)
}

/// The crowdsourcing loop on pre-simulated data: every vehicle downloads
/// the current regression (none for the first), filters and smooths with
/// it, and uploads its smoothed estimates for the refit.
pub fn run_procedure(scenario: &Scenario, fleet: &Fleet, mode: RegressionMode) -> Result<CollaborativeResult> {
    let cloud = CloudState::new(SEGMENT_ID, scenario.cloud_config(mode))?;
    resume_procedure(scenario, fleet, cloud)
}

/// Continue the loop from `cloud`, starting with the first vehicle that has
/// not uploaded yet.
pub fn resume_procedure(scenario: &Scenario, fleet: &Fleet, mut cloud: CloudState) -> Result<CollaborativeResult> {
    let start = cloud.vehicle_count();
    if start > fleet.vehicles.len() {
        return Err(Error::Dataset(format!(
            "cloud holds {start} vehicles, scenario has {}",
            fleet.vehicles.len()
        )));
    }
    let grid = scenario.segment_grid();
    let scheme = match cloud.config.mode {
        RegressionMode::NoisyInput => Scheme::NigpPsm,
        RegressionMode::Standard => Scheme::GpPsm,
    };
    let mut traces = Vec::new();
    let mut snapshots = Vec::new();
    let mut vehicles = Vec::new();
    for vehicle in &fleet.vehicles[start..] {
        let channel = cloud.download(vehicle.speed)?;
        let trace = estimate_vehicle(
            scenario,
            vehicle,
            channel.as_ref().map(|c| c as &dyn PseudoMeasurement),
        )?;
        let model = cloud
            .upload(Contribution {
                vehicle_id: vehicle.index,
                segment_id: SEGMENT_ID.into(),
                positions: trace.positions.clone(),
                estimates: trace.smoothed.clone(),
                variances: Some(trace.smoothed_var.clone()),
                speed: vehicle.speed,
                timestamp: vehicle.index as u64,
            })
            .map_err(|e| e.in_vehicle(vehicle.index))?;
        let mut m = vehicle_metrics(vehicle, &trace)?;
        let (c_rmse, c_std) = cloud_metrics(&model, &grid, &fleet.truth)?;
        m.cloud_rmse = Some(c_rmse);
        m.mean_posterior_std = Some(c_std);
        vehicles.push(m);
        traces.push(trace);
        snapshots.push(model);
    }
    let input_noise_std = match cloud.config.mode {
        RegressionMode::NoisyInput => cloud.model().map(|m| m.hyper.input_noise_std),
        RegressionMode::Standard => None,
    };
    Ok(CollaborativeResult {
        truth: fleet.truth.clone(),
        traces,
        snapshots,
        metrics: RunMetrics {
            scheme,
            vehicles,
            input_noise_std,
        },
        cloud,
    })
}

/// Manifest for a run driven directly by `scenario`: version, all seeds and
/// the scenario itself with its SHA-256.
pub fn scenario_manifest(scenario: &Scenario) -> serde_json::Value {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(scenario).expect("scenario serializes");
    serde_json::json!({
        "version": crate::VERSION,
        "scenario_hash": hex::encode(Sha256::digest(&bytes)),
        "seeds": scenario.seeds,
        "scenario": scenario,
    })
}

impl CollaborativeResult {
    /// Persist as `ground_truth.csv`, `vehicle_<i>_trace.csv`,
    /// `gp_after_<i>.json`, `metrics.csv`, `cloudstate.json` and
    /// `manifest.json`.
    pub fn write_dir(&self, dir: &Path, manifest: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.truth.write_csv(fs::File::create(dir.join("ground_truth.csv"))?)?;
        for (trace, m) in self.traces.iter().zip(&self.metrics.vehicles) {
            let i = m.vehicle_index;
            trace.write_csv(fs::File::create(dir.join(format!("vehicle_{i}_trace.csv")))?)?;
        }
        for (model, m) in self.snapshots.iter().zip(&self.metrics.vehicles) {
            let i = m.vehicle_index;
            fs::write(dir.join(format!("gp_after_{i}.json")), model.to_json()?)?;
        }
        crate::evaluation::write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, std::slice::from_ref(&self.metrics))?;
        fs::write(dir.join("cloudstate.json"), self.cloud.to_json()?)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> Scenario {
        let mut s = Scenario::table1(n, seed).unwrap();
        s.fit.restarts = 1;
        s
    }

    #[test]
    fn table1_fleet_values() {
        let f = table1_fleet(10).unwrap();
        assert!((f[0].sprung_mass - 273.0).abs() < 1e-12);
        assert!((f[0].spring_stiffness - 14_560.0).abs() < 1e-9);
        assert!((f[9].sprung_mass - 300.0).abs() < 1e-12);
        assert!((f[9].spring_stiffness - 16_000.0).abs() < 1e-9);
        assert!(f.iter().all(|p| p.tire_stiffness == 190_000.0 && p.unsprung_mass == 60.0));
        assert!(table1_fleet(0).is_err());
    }

    #[test]
    fn single_vehicle_equals_kf_only() {
        let s = small(1, 3);
        let fleet = simulate_fleet(&s).unwrap();
        let res = run_procedure(&s, &fleet, RegressionMode::NoisyInput).unwrap();
        let plain = estimate_vehicle(&s, &fleet.vehicles[0], None).unwrap();
        assert_eq!(res.traces[0], plain);
    }

    #[test]
    fn vehicles_do_not_share_noise_streams() {
        let s = small(3, 4);
        let mut t = s.clone();
        t.seeds.measurement = 99;
        let a = simulate_fleet(&s).unwrap();
        let b = simulate_fleet(&t).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.vehicles[1].true_road, b.vehicles[1].true_road);
        assert_ne!(a.vehicles[1].measurements, b.vehicles[1].measurements);
        assert_eq!(a.vehicles[1].gps_positions, b.vehicles[1].gps_positions);
    }

    #[test]
    fn perturbing_one_vehicle_leaves_others() {
        let s = small(3, 5);
        let fleet = simulate_fleet(&s).unwrap();
        let mut t = s.clone();
        t.fleet[2].sprung_mass *= 1.1;
        let other = simulate_fleet(&t).unwrap();
        let a = estimate_vehicle(&s, &fleet.vehicles[0], None).unwrap();
        let b = estimate_vehicle(&t, &other.vehicles[0], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sensing_is_physically_plausible() {
        let s = small(2, 6);
        let fleet = simulate_fleet(&s).unwrap();
        let v = &fleet.vehicles[0];
        assert_eq!(v.measurements.len(), 151);
        assert!((v.true_positions[150] - 40.0).abs() < 1e-9);
        assert_eq!(v.true_road[0], 0.0);
        let kf = estimate_vehicle(&s, v, None).unwrap();
        let err = rmse(&kf.smoothed, &v.true_road).unwrap();
        let spread = rmse(&v.true_road, &vec![0.0; 151]).unwrap();
        assert!(err < spread.max(1e-3), "kf error {err}, road spread {spread}");
    }

    #[test]
    fn run_is_deterministic() {
        let s = small(3, 7);
        let a = run_collaborative(&s).unwrap();
        let b = run_collaborative(&s).unwrap();
        assert_eq!(a.cloud.to_json().unwrap(), b.cloud.to_json().unwrap());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.snapshots.len(), 3);
        assert_eq!(a.cloud.model().unwrap().len(), 453);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let s = small(3, 8);
        let fleet = simulate_fleet(&s).unwrap();
        let full = run_procedure(&s, &fleet, RegressionMode::NoisyInput).unwrap();
        let mut first = s.clone();
        first.fleet.truncate(1);
        first.speeds.truncate(1);
        let part = run_procedure(&first, &simulate_fleet(&first).unwrap(), RegressionMode::NoisyInput).unwrap();
        let cloud = CloudState::from_json(&part.cloud.to_json().unwrap()).unwrap();
        let rest = resume_procedure(&s, &fleet, cloud).unwrap();
        assert_eq!(rest.cloud.to_json().unwrap(), full.cloud.to_json().unwrap());
        assert_eq!(rest.metrics.vehicles[..], full.metrics.vehicles[1..]);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = small(2, 1);
        s.speeds.pop();
        assert!(s.validate().is_err());
        let mut s = small(2, 1);
        s.fleet[1].sprung_mass = -1.0;
        assert!(matches!(s.validate(), Err(Error::Vehicle { vehicle: 2, .. })));
        let mut s = small(2, 1);
        s.lag = Some(1000);
        assert!(s.validate().is_err());
    }
}
