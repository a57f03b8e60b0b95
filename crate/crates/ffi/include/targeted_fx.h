#ifndef TARGETED_FX_H
#define TARGETED_FX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TfxStatus {
  TFX_STATUS_OK = 0,
  TFX_STATUS_NULL_POINTER = 1,
  TFX_STATUS_INVALID_UTF8 = 2,
  TFX_STATUS_INVALID_ARGUMENT = 3,
  TFX_STATUS_CONFIG = 4,
  TFX_STATUS_IO = 5,
  TFX_STATUS_ESTIMATION = 6,
  TFX_STATUS_OUT_OF_RANGE = 7,
  TFX_STATUS_PANIC = 99,
} TfxStatus;

typedef enum TfxRecordStatus {
  TFX_RECORD_STATUS_OK = 0,
  TFX_RECORD_STATUS_FILTERED = 1,
  TFX_RECORD_STATUS_FAILED = 2,
} TfxRecordStatus;

/**
 * Validated run configuration with its dataset loaded.
 */
typedef struct TfxConfig TfxConfig;

typedef struct TfxGrm TfxGrm;

/**
 * Records from a completed estimation run, with names kept alive for the
 * lifetime of the handle.
 */
typedef struct TfxResults TfxResults;

/**
 * Numeric summary of one result record. Fields are NaN (or 0 for `n`) when
 * the record has no estimate.
 */
typedef struct TfxEstimate {
  enum TfxRecordStatus status;
  double estimate;
  double std_error;
  double ci_lower;
  double ci_upper;
  double p_value;
  size_t n;
} TfxEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next `tfx_*` call on the same thread.
 */
const char *tfx_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tfx_version(void);

/**
 * Parses and validates a TOML run configuration.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TfxStatus tfx_config_load(const char *path, struct TfxConfig **out);

/**
 * # Safety
 * `cfg` must be NULL or a handle from [`tfx_config_load`] not yet freed.
 */
void tfx_config_free(struct TfxConfig *cfg);

/**
 * Number of expanded estimands.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum TfxStatus tfx_config_estimand_count(const struct TfxConfig *cfg, size_t *out);

/**
 * Overrides the run seed before estimation.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum TfxStatus tfx_config_set_seed(struct TfxConfig *cfg, uint64_t seed);

/**
 * Overrides the output directory before estimation.
 *
 * # Safety
 * `cfg` must be a live handle; `dir` a NUL-terminated string.
 */
enum TfxStatus tfx_config_set_output(struct TfxConfig *cfg, const char *dir);

/**
 * Runs estimation, writing result files to the configured output directory.
 * A run with failed records still returns `Ok`; see [`tfx_results_clean`].
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum TfxStatus tfx_estimate(const struct TfxConfig *cfg, struct TfxResults **out);

/**
 * # Safety
 * `res` must be NULL or a handle from [`tfx_estimate`] not yet freed.
 */
void tfx_results_free(struct TfxResults *res);

/**
 * Number of records, or 0 for a NULL handle.
 *
 * # Safety
 * `res` must be NULL or a live handle.
 */
size_t tfx_results_len(const struct TfxResults *res);

/**
 * True when no record failed.
 *
 * # Safety
 * `res` must be NULL or a live handle.
 */
bool tfx_results_clean(const struct TfxResults *res);

/**
 * `name:estimator` of record `index`, owned by the handle; NULL when out of
 * range.
 *
 * # Safety
 * `res` must be NULL or a live handle.
 */
const char *tfx_results_name(const struct TfxResults *res, size_t index);

/**
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum TfxStatus tfx_results_get(const struct TfxResults *res, size_t index, struct TfxEstimate *out);

/**
 * Computes a GRM from an `n × r` row-major dosage matrix. Values must be
 * 0, 1 or 2; any negative value marks a missing call.
 *
 * # Safety
 * `dosages` must point to `n * r` readable values; `out` must be writable.
 */
enum TfxStatus tfx_grm_compute(const int8_t *dosages,
                               size_t n,
                               size_t r,
                               size_t block,
                               struct TfxGrm **out);

/**
 * Reads a GRM file written by [`tfx_grm_write`] or the `grm` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TfxStatus tfx_grm_read(const char *path, struct TfxGrm **out);

/**
 * # Safety
 * `grm` must be a live handle; `path` a NUL-terminated string.
 */
enum TfxStatus tfx_grm_write(const struct TfxGrm *grm, const char *path);

/**
 * # Safety
 * `grm` must be NULL or a live handle.
 */
size_t tfx_grm_n(const struct TfxGrm *grm);

/**
 * # Safety
 * `grm` must be a live handle; `out` must be writable.
 */
enum TfxStatus tfx_grm_get(const struct TfxGrm *grm, size_t i, size_t j, double *out);

/**
 * # Safety
 * `grm` must be NULL or a handle not yet freed.
 */
void tfx_grm_free(struct TfxGrm *grm);

/**
 * Variance curve of an influence vector over `points` thresholds on
 * `[0, tau_max]`. Writes `points` values to `variances` and the plateau
 * value under the max rule to `plateau`.
 *
 * # Safety
 * `eif` must point to `tfx_grm_n(grm)` values; `variances` must have room
 * for `points` values; `plateau` must be writable.
 */
enum TfxStatus tfx_svp_curve(const double *eif,
                             const struct TfxGrm *grm,
                             size_t points,
                             double tau_max,
                             double *variances,
                             double *plateau);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TARGETED_FX_H */
