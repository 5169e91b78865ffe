#ifndef SCSF_H
#define SCSF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScsfStatus {
  SCSF_STATUS_OK = 0,
  SCSF_STATUS_NULL_ARGUMENT = 1,
  SCSF_STATUS_INVALID_CONFIG = 2,
  SCSF_STATUS_SIZE = 3,
  SCSF_STATUS_NUMERIC = 4,
  SCSF_STATUS_DEGENERATE = 5,
  SCSF_STATUS_IO = 6,
  SCSF_STATUS_MODEL_FORMAT = 7,
  SCSF_STATUS_PANIC = 8,
} ScsfStatus;

/**
 * Opaque fitted model.
 */
typedef struct ScsfModel ScsfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *scsf_last_error(void);

/**
 * Fit a model to an `m × n` power matrix.
 *
 * `observed` may be null (everything observed); otherwise nonzero bytes mark
 * observed samples. `config_toml` may be null for the built-in defaults or
 * hold TOML keys that override them. On success `*out` owns a model that
 * must be released with [`scsf_model_free`].
 *
 * # Safety
 * `data` must point to `m·n` doubles, `observed` (when non-null) to `m·n`
 * bytes, `config_toml` (when non-null) to a NUL-terminated string.
 */
enum ScsfStatus scsf_fit(const double *data,
                         const uint8_t *observed,
                         size_t m,
                         size_t n,
                         const char *config_toml,
                         struct ScsfModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void scsf_model_free(struct ScsfModel *model);

/**
 * # Safety
 * `model` must be a live handle; the output pointers may be null.
 */
enum ScsfStatus scsf_model_dims(const struct ScsfModel *model, size_t *m, size_t *n, size_t *k);

/**
 * Copy the clear-sky estimate (column-major, `m·n` values) into `out`.
 *
 * # Safety
 * `model` must be a live handle and `out` must have room for `len` doubles.
 */
enum ScsfStatus scsf_model_clear_sky(const struct ScsfModel *model, double *out, size_t len);

/**
 * Year-over-year offset `β` and the matching annual degradation rate.
 * `*present` is set to 0 for records of one year or less, in which case the
 * other outputs are left untouched.
 *
 * # Safety
 * `model` must be a live handle; `present` must be valid, `beta` and `rate`
 * may be null.
 */
enum ScsfStatus scsf_model_beta(const struct ScsfModel *model,
                                uint8_t *present,
                                double *beta,
                                double *rate);

/**
 * 1 if the outer loop met its tolerance, 0 if it hit the iteration cap, -1
 * for models loaded from disk.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t scsf_model_converged(const struct ScsfModel *model);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum ScsfStatus scsf_model_save(const struct ScsfModel *model, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScsfStatus scsf_model_load(const char *path, struct ScsfModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCSF_H */
