#ifndef CISLUNAR_GAME_H
#define CISLUNAR_GAME_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CgStatus {
  CG_STATUS_OK = 0,
  CG_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid configuration or argument.
   */
  CG_STATUS_CONFIG = 2,
  /**
   * Integration, correction or solver failure.
   */
  CG_STATUS_NUMERICAL = 3,
  CG_STATUS_IO = 4,
  /**
   * Index or buffer size out of range.
   */
  CG_STATUS_OUT_OF_RANGE = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  CG_STATUS_INTERNAL = 6,
} CgStatus;

/**
 * Result of a receding-horizon run.
 */
typedef struct CgLog CgLog;

/**
 * A periodic reference orbit with its monodromy eigenstructure.
 */
typedef struct CgOrbit CgOrbit;

/**
 * A validated scenario with its orbit and manifold data built.
 */
typedef struct CgScenario CgScenario;

/**
 * One logged sample. Thrusts in newtons, distances in kilometres; the
 * phase rates are NaN when phasing is disabled.
 */
typedef struct CgRecord {
  double t_nd;
  double t_days;
  double evader[6];
  double pursuer[6];
  double c_e;
  double c_p;
  double u_e_newton[3];
  double tau_e;
  double u_p_newton[3];
  double tau_p;
  double err_e_km;
  double err_p_km;
  double sep_km;
  double aggressiveness;
  double alpha;
} CgRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t cg_last_error_message(char *buf, size_t len);

/**
 * Jacobi constant of a normalized Earth-Moon state `s[6]`.
 *
 * # Safety
 * `s` must point to 6 doubles and `out` to one writable double.
 */
enum CgStatus cg_jacobi_constant(const double *s, double *out);

/**
 * Propagates an uncontrolled Earth-Moon state from `t0` to `tf`.
 *
 * # Safety
 * `s0` must point to 6 doubles and `out` to 6 writable doubles.
 */
enum CgStatus cg_propagate(const double *s0,
                           double t0,
                           double tf,
                           double rel_tol,
                           double abs_tol,
                           double *out);

/**
 * Generates the southern Earth-Moon NRHO of period 1.466695.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a handle to be
 * released with [`cg_orbit_free`].
 */
enum CgStatus cg_orbit_nrho_new(struct CgOrbit **out);

/**
 * Loads a periodic orbit from an initial state `s0[6]` and its period.
 *
 * # Safety
 * `s0` must point to 6 doubles; `out` as in [`cg_orbit_nrho_new`].
 */
enum CgStatus cg_orbit_load(const double *s0, double period, struct CgOrbit **out);

/**
 * # Safety
 * `orbit` must be null or a handle from this library not yet freed.
 */
void cg_orbit_free(struct CgOrbit *orbit);

/**
 * Orbit period, or NaN for a null handle.
 *
 * # Safety
 * `orbit` must be null or a live handle.
 */
double cg_orbit_period(const struct CgOrbit *orbit);

/**
 * Real unstable monodromy eigenvalue, or NaN for a null handle.
 *
 * # Safety
 * `orbit` must be null or a live handle.
 */
double cg_orbit_unstable_eigenvalue(const struct CgOrbit *orbit);

/**
 * Reference state at `phase` into `out[6]`.
 *
 * # Safety
 * `orbit` must be a live handle and `out` valid for 6 doubles.
 */
enum CgStatus cg_orbit_sample(const struct CgOrbit *orbit, double phase, double *out);

/**
 * Unit unstable (`stable == 0`) or stable (`stable != 0`) direction at
 * time `t` into `out[6]`.
 *
 * # Safety
 * `orbit` must be a live handle and `out` valid for 6 doubles.
 */
enum CgStatus cg_orbit_manifold_direction(const struct CgOrbit *orbit,
                                          int32_t stable,
                                          double t,
                                          double *out);

/**
 * Builds a scenario from a JSON config (NUL-terminated UTF-8). Absent keys
 * take their defaults, so `"{}"` is the reference engagement.
 *
 * # Safety
 * `json` must be a valid C string; `out` a valid pointer receiving a
 * handle for [`cg_scenario_free`].
 */
enum CgStatus cg_scenario_from_json(const char *json, struct CgScenario **out);

/**
 * # Safety
 * `scenario` must be null or a live handle.
 */
void cg_scenario_free(struct CgScenario *scenario);

/**
 * Runs the engagement. A run stopped early by a solver failure still
 * returns its partial log together with [`CgStatus::Numerical`].
 *
 * # Safety
 * `scenario` must be a live handle; `out` a valid pointer receiving a
 * handle for [`cg_log_free`].
 */
enum CgStatus cg_scenario_run(const struct CgScenario *scenario, struct CgLog **out);

/**
 * # Safety
 * `log` must be null or a live handle.
 */
void cg_log_free(struct CgLog *log);

/**
 * Number of logged samples, 0 for a null handle.
 *
 * # Safety
 * `log` must be null or a live handle.
 */
size_t cg_log_len(const struct CgLog *log);

/**
 * Copies sample `index` into `out`.
 *
 * # Safety
 * `log` must be a live handle and `out` a valid pointer.
 */
enum CgStatus cg_log_record(const struct CgLog *log, size_t index, struct CgRecord *out);

/**
 * Time in days after which separation stays above `km`; NaN when it never
 * settles above it or for a null handle.
 *
 * # Safety
 * `log` must be null or a live handle.
 */
double cg_log_permanent_crossing_days(const struct CgLog *log, double km);

/**
 * Writes the log as CSV to `path` (NUL-terminated UTF-8).
 *
 * # Safety
 * `log` must be a live handle and `path` a valid C string.
 */
enum CgStatus cg_log_write_csv(const struct CgLog *log, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CISLUNAR_GAME_H */
