#ifndef LSRECON_H
#define LSRECON_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define LSR_OK 0

/**
 * Null pointer, invalid UTF-8 or misuse of the API.
 */
#define LSR_ERR_ARGUMENT 1

/**
 * Invalid configuration or point cloud.
 */
#define LSR_ERR_CONFIG 2

/**
 * Numerical failure (lost interface, empty band).
 */
#define LSR_ERR_NUMERICAL 3

/**
 * File system failure.
 */
#define LSR_ERR_IO 4

/**
 * Opaque configuration handle.
 */
typedef struct LsrConfig LsrConfig;

/**
 * Opaque report handle.
 */
typedef struct LsrReport LsrReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the message of the most recent error on this thread. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *lsr_last_error(void);

/**
 * Parses a JSON configuration object into a new handle. On success
 * writes the handle to `out` and returns `LSR_OK`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
int lsr_config_from_json(const char *json, struct LsrConfig **out);

/**
 * Releases a configuration handle. A null handle is a no-op.
 *
 * # Safety
 * `cfg` must come from `lsr_config_from_json` and not be freed twice.
 */
void lsr_config_free(struct LsrConfig *cfg);

/**
 * Runs the full pipeline on the cloud file named in the configuration.
 * On success writes a report handle to `out`.
 *
 * # Safety
 * `cfg` must be a live configuration handle and `out` a valid pointer.
 */
int lsr_run(const struct LsrConfig *cfg, struct LsrReport **out);

/**
 * Runs the pipeline on `npoints` packed coordinates (`dim` values per
 * point, original coordinates) instead of a file.
 *
 * # Safety
 * `cfg` must be live; `points` must hold `npoints * dim` doubles.
 */
int lsr_run_on_points(const struct LsrConfig *cfg,
                      int dim,
                      const double *points,
                      uintptr_t npoints,
                      struct LsrReport **out);

/**
 * Total iterations across all runs, or -1 on a null handle.
 *
 * # Safety
 * `report` must be a live report handle.
 */
int lsr_report_total_iterations(const struct LsrReport *report);

/**
 * Final mean cloud error, or NaN on a null handle.
 *
 * # Safety
 * `report` must be a live report handle.
 */
double lsr_report_err_cloud(const struct LsrReport *report);

/**
 * Serializes the report (iteration rows, per-run summaries, final
 * metrics) to a JSON string owned by the caller; release it with
 * `lsr_string_free`.
 *
 * # Safety
 * `report` must be live and `out` a valid pointer.
 */
int lsr_report_to_json(const struct LsrReport *report, char **out);

/**
 * Releases a report handle. A null handle is a no-op.
 *
 * # Safety
 * `report` must come from a run call and not be freed twice.
 */
void lsr_report_free(struct LsrReport *report);

/**
 * Releases a string returned by `lsr_report_to_json`.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void lsr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LSRECON_H */
