//! C ABI over the crowdroad library.
//!
//! Objects are opaque handles created by `crd_*_new`/`crd_*_from_*` style
//! calls and released with the matching `crd_*_free`. Every fallible call
//! returns a [`CrdStatus`]; the message of the last failure on the calling
//! thread is available from [`crd_last_error`]. Strings returned to the
//! caller are owned by the caller and released with [`crd_string_free`].
//! Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

mod error;

use std::ffi::{c_char, CString};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use crowdroad::cli::ExperimentConfig;
use crowdroad::cloud::{CloudConfig, CloudState, Contribution};
use crowdroad::estimation::PseudoMeasurement;
use crowdroad::gp::{fit, FitOptions, GpHyperParams, GpModel, RegressionMode, TrainingData};
use crowdroad::simulation::{run_collaborative, scenario_manifest, CollaborativeResult, Scenario, SEGMENT_ID};

pub use error::CrdStatus;
use error::{doubles, doubles_mut, guard, into_c_string, text, FfiError};

/// Regression flavour of the cloud.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrdMode {
    Standard = 0,
    NoisyInput = 1,
}

impl From<CrdMode> for RegressionMode {
    fn from(m: CrdMode) -> Self {
        match m {
            CrdMode::Standard => RegressionMode::Standard,
            CrdMode::NoisyInput => RegressionMode::NoisyInput,
        }
    }
}

/// Per-vehicle errors of a run, in meters. Absent values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrdVehicleMetrics {
    /// 1-based.
    pub vehicle_index: usize,
    pub rmse_filtered: f64,
    pub rmse_smoothed: f64,
    pub cloud_rmse: f64,
    pub mean_posterior_std: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrdHyperParams {
    pub signal_std: f64,
    pub lengthscale: f64,
    pub noise_std: f64,
    /// Zero for a standard GP.
    pub input_noise_std: f64,
}

pub struct CrdScenario(Scenario);

pub struct CrdRun {
    scenario: Scenario,
    result: CollaborativeResult,
}

pub struct CrdCloud(CloudState);

pub struct CrdGpModel(Arc<GpModel>);

fn put<T>(out: *mut *mut T, value: T) -> Result<(), FfiError> {
    if out.is_null() {
        return Err(FfiError::null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, FfiError> {
    p.as_ref().ok_or_else(|| FfiError::null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FfiError> {
    p.as_mut().ok_or_else(|| FfiError::null(what))
}

fn put_string(out: *mut *mut c_char, s: String) -> Result<(), FfiError> {
    if out.is_null() {
        return Err(FfiError::null("out"));
    }
    let raw = into_c_string(s)?;
    unsafe { *out = raw };
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        let _ = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| drop(Box::from_raw(p))));
    }
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn crd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the last error message on this thread, or NULL when the last
/// call succeeded. Release with `crd_string_free`.
#[no_mangle]
pub extern "C" fn crd_last_error() -> *mut c_char {
    error::last_error().map_or(ptr::null_mut(), CString::into_raw)
}

/// Release a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn crd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Reference scenario with `n_vehicles` vehicles and master seed `seed`.
#[no_mangle]
pub unsafe extern "C" fn crd_scenario_table1(n_vehicles: usize, seed: u64, out: *mut *mut CrdScenario) -> CrdStatus {
    guard(|| put(out, CrdScenario(Scenario::table1(n_vehicles, seed)?)))
}

/// Scenario from an experiment config document (JSON text).
#[no_mangle]
pub unsafe extern "C" fn crd_scenario_from_config(
    json: *const c_char,
    seed: u64,
    out: *mut *mut CrdScenario,
) -> CrdStatus {
    guard(|| {
        let cfg = ExperimentConfig::parse(text(json, "json")?)?;
        put(out, CrdScenario(cfg.scenario(seed)?))
    })
}

/// Optimizer starts for the first regression of a run.
#[no_mangle]
pub unsafe extern "C" fn crd_scenario_set_restarts(scenario: *mut CrdScenario, restarts: usize) -> CrdStatus {
    guard(|| {
        let s = handle_mut(scenario, "scenario")?;
        if restarts == 0 {
            return Err(FfiError::new(CrdStatus::InvalidArgument, "restarts must be at least 1"));
        }
        s.0.fit.restarts = restarts;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_scenario_vehicle_count(scenario: *const CrdScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.0.vehicle_count())
}

#[no_mangle]
pub unsafe extern "C" fn crd_scenario_free(scenario: *mut CrdScenario) {
    free(scenario)
}

/// Simulate the scenario and run the crowdsourcing loop.
#[no_mangle]
pub unsafe extern "C" fn crd_run_collaborative(scenario: *const CrdScenario, out: *mut *mut CrdRun) -> CrdStatus {
    guard(|| {
        let s = handle(scenario, "scenario")?;
        let result = run_collaborative(&s.0)?;
        put(
            out,
            CrdRun {
                scenario: s.0.clone(),
                result,
            },
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_run_vehicle_count(run: *const CrdRun) -> usize {
    run.as_ref().map_or(0, |r| r.result.metrics.vehicles.len())
}

/// Metrics of the vehicle at 0-based position `index`.
#[no_mangle]
pub unsafe extern "C" fn crd_run_vehicle_metrics(
    run: *const CrdRun,
    index: usize,
    out: *mut CrdVehicleMetrics,
) -> CrdStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let vehicles = &r.result.metrics.vehicles;
        let v = vehicles.get(index).ok_or_else(|| {
            FfiError::new(
                CrdStatus::InvalidArgument,
                format!("vehicle {index} out of range ({} vehicles)", vehicles.len()),
            )
        })?;
        let out = out.as_mut().ok_or_else(|| FfiError::null("out"))?;
        *out = CrdVehicleMetrics {
            vehicle_index: v.vehicle_index,
            rmse_filtered: v.rmse_filtered,
            rmse_smoothed: v.rmse_smoothed,
            cloud_rmse: v.cloud_rmse.unwrap_or(f64::NAN),
            mean_posterior_std: v.mean_posterior_std.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Write the run's record (traces, snapshots, metrics, cloud state) to `dir`.
#[no_mangle]
pub unsafe extern "C" fn crd_run_write_dir(run: *const CrdRun, dir: *const c_char) -> CrdStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let dir = text(dir, "dir")?;
        r.result.write_dir(Path::new(dir), &scenario_manifest(&r.scenario))?;
        Ok(())
    })
}

/// A copy of the run's final cloud state.
#[no_mangle]
pub unsafe extern "C" fn crd_run_cloud(run: *const CrdRun, out: *mut *mut CrdCloud) -> CrdStatus {
    guard(|| {
        let r = handle(run, "run")?;
        put(out, CrdCloud(r.result.cloud.clone()))
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_run_free(run: *mut CrdRun) {
    free(run)
}

/// Empty cloud for one road segment. `nominal_speed` in m/s.
#[no_mangle]
pub unsafe extern "C" fn crd_cloud_new(mode: CrdMode, nominal_speed: f64, out: *mut *mut CrdCloud) -> CrdStatus {
    guard(|| {
        let config = CloudConfig {
            mode: mode.into(),
            nominal_speed,
            ..CloudConfig::default()
        };
        put(out, CrdCloud(CloudState::new(SEGMENT_ID, config)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_cloud_from_json(json: *const c_char, out: *mut *mut CrdCloud) -> CrdStatus {
    guard(|| put(out, CrdCloud(CloudState::from_json(text(json, "json")?)?)))
}

#[no_mangle]
pub unsafe extern "C" fn crd_cloud_to_json(cloud: *const CrdCloud, out: *mut *mut c_char) -> CrdStatus {
    guard(|| put_string(out, handle(cloud, "cloud")?.0.to_json()?))
}

/// Add one vehicle's smoothed estimates and refit. On failure the cloud is
/// left as it was.
#[no_mangle]
pub unsafe extern "C" fn crd_cloud_upload(
    cloud: *mut CrdCloud,
    vehicle_id: usize,
    positions: *const f64,
    estimates: *const f64,
    len: usize,
    speed: f64,
) -> CrdStatus {
    guard(|| {
        let c = handle_mut(cloud, "cloud")?;
        let positions = doubles(positions, len, "positions")?.to_vec();
        let estimates = doubles(estimates, len, "estimates")?.to_vec();
        c.0.upload(Contribution {
            vehicle_id,
            segment_id: c.0.dataset.segment_id.clone(),
            positions,
            estimates,
            variances: None,
            speed,
            timestamp: vehicle_id as u64,
        })?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_cloud_vehicle_count(cloud: *const CrdCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.vehicle_count())
}

/// Pseudo-measurement mean and variance for a vehicle at `speed` at each of
/// the `n` query positions.
#[no_mangle]
pub unsafe extern "C" fn crd_cloud_predict(
    cloud: *const CrdCloud,
    speed: f64,
    queries: *const f64,
    n: usize,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> CrdStatus {
    guard(|| {
        let c = handle(cloud, "cloud")?;
        let q = doubles(queries, n, "queries")?;
        let mean = doubles_mut(mean_out, n, "mean_out")?;
        let var = doubles_mut(var_out, n, "var_out")?;
        let channel = c.0.download(speed)?.ok_or_else(|| {
            FfiError::new(CrdStatus::InvalidArgument, "cloud has no uploads yet")
        })?;
        for (i, s) in channel.evaluate(q)?.into_iter().enumerate() {
            mean[i] = s.value;
            var[i] = s.variance;
        }
        Ok(())
    })
}

/// The cloud's current regression.
#[no_mangle]
pub unsafe extern "C" fn crd_cloud_model(cloud: *const CrdCloud, out: *mut *mut CrdGpModel) -> CrdStatus {
    guard(|| {
        let c = handle(cloud, "cloud")?;
        let m = c.0.model().ok_or_else(|| {
            FfiError::new(CrdStatus::InvalidArgument, "cloud has no uploads yet")
        })?;
        put(out, CrdGpModel(Arc::clone(m)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_cloud_free(cloud: *mut CrdCloud) {
    free(cloud)
}

/// Fit a GP (or noisy-input GP) to `n` points by maximum likelihood.
#[no_mangle]
pub unsafe extern "C" fn crd_gp_fit(
    inputs: *const f64,
    targets: *const f64,
    n: usize,
    mode: CrdMode,
    seed: u64,
    out: *mut *mut CrdGpModel,
) -> CrdStatus {
    guard(|| {
        let x = doubles(inputs, n, "inputs")?.to_vec();
        let y = doubles(targets, n, "targets")?.to_vec();
        let init = GpHyperParams::from_data(&x, &y);
        let options = FitOptions {
            seed,
            ..FitOptions::default()
        };
        let model = fit(TrainingData::new(x, y), mode.into(), init, &options)?;
        put(out, CrdGpModel(Arc::new(model)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_gp_from_json(json: *const c_char, out: *mut *mut CrdGpModel) -> CrdStatus {
    guard(|| put(out, CrdGpModel(Arc::new(GpModel::from_json(text(json, "json")?)?))))
}

#[no_mangle]
pub unsafe extern "C" fn crd_gp_to_json(model: *const CrdGpModel, out: *mut *mut c_char) -> CrdStatus {
    guard(|| put_string(out, handle(model, "model")?.0.to_json()?))
}

#[no_mangle]
pub unsafe extern "C" fn crd_gp_hyperparams(model: *const CrdGpModel, out: *mut CrdHyperParams) -> CrdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = out.as_mut().ok_or_else(|| FfiError::null("out"))?;
        let h = m.0.hyper;
        *out = CrdHyperParams {
            signal_std: h.signal_std,
            lengthscale: h.lengthscale,
            noise_std: h.noise_std,
            input_noise_std: match m.0.mode {
                RegressionMode::NoisyInput => h.input_noise_std,
                RegressionMode::Standard => 0.0,
            },
        };
        Ok(())
    })
}

/// Posterior mean and variance of the latent road at `n` positions.
#[no_mangle]
pub unsafe extern "C" fn crd_gp_predict(
    model: *const CrdGpModel,
    queries: *const f64,
    n: usize,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> CrdStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let q = doubles(queries, n, "queries")?;
        let mean = doubles_mut(mean_out, n, "mean_out")?;
        let var = doubles_mut(var_out, n, "var_out")?;
        let p = m.0.predict(q);
        mean.copy_from_slice(&p.mean);
        var.copy_from_slice(&p.variance);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn crd_gp_free(model: *mut CrdGpModel) {
    free(model)
}
