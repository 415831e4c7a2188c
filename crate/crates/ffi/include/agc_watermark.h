#ifndef AGC_WATERMARK_H
#define AGC_WATERMARK_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AgwStatus {
  AGW_STATUS_OK = 0,
  AGW_STATUS_NULL_POINTER = 1,
  AGW_STATUS_INVALID_UTF8 = 2,
  AGW_STATUS_CONFIG = 3,
  AGW_STATUS_RUNTIME = 4,
  AGW_STATUS_OUT_OF_RANGE = 5,
  AGW_STATUS_PANIC = 6,
} AgwStatus;

/**
 * Opaque handle to a finished run.
 */
typedef struct AgwRun AgwRun;

/**
 * Opaque scenario handle.
 */
typedef struct AgwScenario AgwScenario;

/**
 * One detector block.
 */
typedef struct AgwBlock {
  /**
   * Block index, from 1.
   */
  size_t j;
  double xi1;
  double xi2;
  double eta1;
  double eta2;
  /**
   * 1 when the block raised an alarm.
   */
  uint8_t alarm;
} AgwBlock;

/**
 * Summary of a run. Absent quantities are −1 (integers) or NaN (θ).
 */
typedef struct AgwOutcome {
  size_t blocks;
  size_t alarms;
  size_t false_alarms;
  int64_t detection_delay_blocks;
  int64_t diverged_at;
  int64_t stopped_at;
  double theta;
} AgwOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *agw_last_error_message(void);

/**
 * Parses a TOML scenario into `*out`.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AgwStatus agw_scenario_from_toml(const char *toml, struct AgwScenario **out);

/**
 * The built-in four-area scenario, honest, with the given seed and length.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum AgwStatus agw_scenario_four_area_preset(uint64_t seed,
                                             size_t duration_steps,
                                             struct AgwScenario **out);

/**
 * # Safety
 * `scenario` must come from this library and not be freed.
 */
enum AgwStatus agw_scenario_set_seed(struct AgwScenario *scenario, uint64_t seed);

/**
 * Releases a scenario; null is ignored.
 *
 * # Safety
 * `scenario` must come from this library and not be freed twice.
 */
void agw_scenario_free(struct AgwScenario *scenario);

/**
 * Models, calibrates and simulates the scenario, storing the run in `*out`.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum AgwStatus agw_run(const struct AgwScenario *scenario, struct AgwRun **out);

/**
 * Number of completed blocks, 0 for a null handle.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t agw_run_block_count(const struct AgwRun *run);

/**
 * Copies block `index` (from 0) into `*out`.
 *
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum AgwStatus agw_run_block(const struct AgwRun *run, size_t index, struct AgwBlock *out);

/**
 * # Safety
 * `run` must be a live handle and `out` a valid pointer.
 */
enum AgwStatus agw_run_outcome(const struct AgwRun *run, struct AgwOutcome *out);

/**
 * Releases a run; null is ignored.
 *
 * # Safety
 * `run` must come from this library and not be freed twice.
 */
void agw_run_free(struct AgwRun *run);

/**
 * Long-window thresholds `κ′·ξ∞` from an honest run of the scenario's
 * monitored area, written to `*eta1` and `*eta2`.
 *
 * # Safety
 * `scenario` must be a live handle; `eta1` and `eta2` valid pointers.
 */
enum AgwStatus agw_calibrate_empirical(const struct AgwScenario *scenario,
                                       double kappa_prime,
                                       double *eta1,
                                       double *eta2);

/**
 * Robustness indicator θ of a ξ₁ series whose first entry is block 1.
 *
 * # Safety
 * `xi1` must point to `len` doubles and `out` be a valid pointer.
 */
enum AgwStatus agw_theta(const double *xi1, size_t len, size_t start_block, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGC_WATERMARK_H */
