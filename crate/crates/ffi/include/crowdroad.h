#ifndef CROWDROAD_H
#define CROWDROAD_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. On anything but `CRD_STATUS_OK` the
 * message is available from `crd_last_error` on the same thread.
 */
typedef enum CrdStatus {
  CRD_STATUS_OK = 0,
  CRD_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument, configuration or dataset.
   */
  CRD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Factorization or filter failure.
   */
  CRD_STATUS_NUMERICAL = 3,
  CRD_STATUS_IO = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  CRD_STATUS_PANIC = 5,
} CrdStatus;

/**
 * Regression flavour of the cloud.
 */
typedef enum CrdMode {
  CRD_MODE_STANDARD = 0,
  CRD_MODE_NOISY_INPUT = 1,
} CrdMode;

typedef struct CrdCloud CrdCloud;

typedef struct CrdGpModel CrdGpModel;

typedef struct CrdRun CrdRun;

typedef struct CrdScenario CrdScenario;

/**
 * Per-vehicle errors of a run, in meters. Absent values are NaN.
 */
typedef struct CrdVehicleMetrics {
  /**
   * 1-based.
   */
  size_t vehicle_index;
  double rmse_filtered;
  double rmse_smoothed;
  double cloud_rmse;
  double mean_posterior_std;
} CrdVehicleMetrics;

typedef struct CrdHyperParams {
  double signal_std;
  double lengthscale;
  double noise_std;
  /**
   * Zero for a standard GP.
   */
  double input_noise_std;
} CrdHyperParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *crd_version(void);

/**
 * Copy of the last error message on this thread, or NULL when the last
 * call succeeded. Release with `crd_string_free`.
 */
char *crd_last_error(void);

/**
 * Release a string returned by this library. NULL is ignored.
 */
void crd_string_free(char *s);

/**
 * Reference scenario with `n_vehicles` vehicles and master seed `seed`.
 */
enum CrdStatus crd_scenario_table1(size_t n_vehicles, uint64_t seed, struct CrdScenario **out);

/**
 * Scenario from an experiment config document (JSON text).
 */
enum CrdStatus crd_scenario_from_config(const char *json, uint64_t seed, struct CrdScenario **out);

/**
 * Optimizer starts for the first regression of a run.
 */
enum CrdStatus crd_scenario_set_restarts(struct CrdScenario *scenario, size_t restarts);

size_t crd_scenario_vehicle_count(const struct CrdScenario *scenario);

void crd_scenario_free(struct CrdScenario *scenario);

/**
 * Simulate the scenario and run the crowdsourcing loop.
 */
enum CrdStatus crd_run_collaborative(const struct CrdScenario *scenario, struct CrdRun **out);

size_t crd_run_vehicle_count(const struct CrdRun *run);

/**
 * Metrics of the vehicle at 0-based position `index`.
 */
enum CrdStatus crd_run_vehicle_metrics(const struct CrdRun *run,
                                       size_t index,
                                       struct CrdVehicleMetrics *out);

/**
 * Write the run's record (traces, snapshots, metrics, cloud state) to `dir`.
 */
enum CrdStatus crd_run_write_dir(const struct CrdRun *run, const char *dir);

/**
 * A copy of the run's final cloud state.
 */
enum CrdStatus crd_run_cloud(const struct CrdRun *run, struct CrdCloud **out);

void crd_run_free(struct CrdRun *run);

/**
 * Empty cloud for one road segment. `nominal_speed` in m/s.
 */
enum CrdStatus crd_cloud_new(enum CrdMode mode, double nominal_speed, struct CrdCloud **out);

enum CrdStatus crd_cloud_from_json(const char *json, struct CrdCloud **out);

enum CrdStatus crd_cloud_to_json(const struct CrdCloud *cloud, char **out);

/**
 * Add one vehicle's smoothed estimates and refit. On failure the cloud is
 * left as it was.
 */
enum CrdStatus crd_cloud_upload(struct CrdCloud *cloud,
                                size_t vehicle_id,
                                const double *positions,
                                const double *estimates,
                                size_t len,
                                double speed);

size_t crd_cloud_vehicle_count(const struct CrdCloud *cloud);

/**
 * Pseudo-measurement mean and variance for a vehicle at `speed` at each of
 * the `n` query positions.
 */
enum CrdStatus crd_cloud_predict(const struct CrdCloud *cloud,
                                 double speed,
                                 const double *queries,
                                 size_t n,
                                 double *mean_out,
                                 double *var_out);

/**
 * The cloud's current regression.
 */
enum CrdStatus crd_cloud_model(const struct CrdCloud *cloud, struct CrdGpModel **out);

void crd_cloud_free(struct CrdCloud *cloud);

/**
 * Fit a GP (or noisy-input GP) to `n` points by maximum likelihood.
 */
enum CrdStatus crd_gp_fit(const double *inputs,
                          const double *targets,
                          size_t n,
                          enum CrdMode mode,
                          uint64_t seed,
                          struct CrdGpModel **out);

enum CrdStatus crd_gp_from_json(const char *json, struct CrdGpModel **out);

enum CrdStatus crd_gp_to_json(const struct CrdGpModel *model, char **out);

enum CrdStatus crd_gp_hyperparams(const struct CrdGpModel *model, struct CrdHyperParams *out);

/**
 * Posterior mean and variance of the latent road at `n` positions.
 */
enum CrdStatus crd_gp_predict(const struct CrdGpModel *model,
                              const double *queries,
                              size_t n,
                              double *mean_out,
                              double *var_out);

void crd_gp_free(struct CrdGpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROWDROAD_H */
