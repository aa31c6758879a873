#ifndef MINTFLOW_H
#define MINTFLOW_H

/* Generated by cbindgen from mintflow-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  MF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  MF_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  MF_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad argument values (shapes, counts, solver settings).
   */
  MF_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Filesystem or checkpoint-format failure.
   */
  MF_STATUS_IO = 4,
  /**
   * The fixed-point inversion diverged.
   */
  MF_STATUS_DIVERGED = 5,
  /**
   * Unexpected internal failure; see `mf_last_error`.
   */
  MF_STATUS_INTERNAL = 6,
} MfStatus;

/**
 * Opaque handle to a loaded flow model.
 */
typedef struct MfModel MfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *mf_last_error(void);

/**
 * Static version string of the library.
 */
const char *mf_version(void);

/**
 * Load a checkpoint directory into a model handle.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to a writable
 * `MfModel*` slot. On success `*out` owns the model and must be released
 * with [`mf_model_free`].
 */
MfStatus mf_model_load(const char *path, MfModel **out);

/**
 * Release a model handle. Null is a no-op; the handle must not be used
 * afterwards.
 *
 * # Safety
 * `model` must be null or a pointer previously returned by
 * [`mf_model_load`] that has not been freed.
 */
void mf_model_free(MfModel *model);

/**
 * Model input shape (channels, height, width).
 *
 * # Safety
 * `model` must be a live handle; the three out pointers must be writable.
 */
MfStatus mf_model_input_shape(const MfModel *model, uintptr_t *c, uintptr_t *h, uintptr_t *w);

/**
 * Coordinates per image (`c*h*w`), the stride of all flat buffers.
 *
 * # Safety
 * `model` must be a live handle and `dims` writable.
 */
MfStatus mf_model_dims(const MfModel *model, uintptr_t *dims);

/**
 * Exact log-likelihood of `n` preprocessed (logit-space) images laid out as
 * `n * dims` values; writes `n` values to `out`.
 *
 * # Safety
 * `x` must hold `n * dims` readable values and `out` `n` writable slots.
 */
MfStatus mf_log_prob(const MfModel *model, const double *x, uintptr_t n, double *out);

/**
 * Bits per dimension of `n` raw images (pixel values 0..=255) with seeded
 * uniform dequantization; writes one value to `out`.
 *
 * # Safety
 * `pixels` must hold `n * dims` readable values and `out` one writable slot.
 */
MfStatus mf_bpd(const MfModel *model,
                const double *pixels,
                uintptr_t n,
                uint64_t seed,
                double *out);

/**
 * Draw `n` samples by fixed-point inversion and write dequantized pixel
 * values (clamped to `[0, 255]`) as `n * dims` values. `alpha <= 0` selects
 * the default step size 1.0; `max_iters == 0` selects 120. Optionally
 * reports the clipped fraction.
 *
 * # Safety
 * `out_pixels` must hold `n * dims` writable slots; `out_clipped_fraction`
 * may be null.
 */
MfStatus mf_sample(const MfModel *model,
                   uintptr_t n,
                   uint64_t seed,
                   double alpha,
                   uintptr_t max_iters,
                   double *out_pixels,
                   double *out_clipped_fraction);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MINTFLOW_H */
