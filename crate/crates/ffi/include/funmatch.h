#ifndef FUNMATCH_H
#define FUNMATCH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Schedule decay shape for [`fm_lr_at`].
 */
typedef enum FmDecay {
  FM_DECAY_QUADRATIC = 0,
  FM_DECAY_COSINE = 1,
} FmDecay;

/**
 * Result code of every call.
 */
typedef enum FmStatus {
  FM_STATUS_OK = 0,
  /**
   * Bad argument: null pointer, invalid UTF-8, malformed spec, wrong size.
   */
  FM_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Config could not be parsed or validated.
   */
  FM_STATUS_CONFIG = 2,
  /**
   * Training produced a non-finite loss.
   */
  FM_STATUS_DIVERGENCE = 3,
  /**
   * File missing, unreadable or corrupt.
   */
  FM_STATUS_IO = 4,
  /**
   * Numerical failure, e.g. a matrix that is not SPD.
   */
  FM_STATUS_NUMERIC = 5,
  /**
   * Internal panic (a bug).
   */
  FM_STATUS_PANIC = 6,
} FmStatus;

/**
 * Opaque handle to a loaded f32 model.
 */
typedef struct FmModel FmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *fm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fm_version(void);

/**
 * Resolve a split spec such as `train[:98%]` against a split of `n`
 * examples, writing the half-open index range `[start, end)`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `start` and `end` must be valid
 * for writes.
 */
enum FmStatus fm_split_range(const char *spec, size_t n, size_t *start, size_t *end);

/**
 * Learning rate at `step` of a warmup + decay schedule.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum FmStatus fm_lr_at(double peak_lr,
                       size_t warmup_steps,
                       size_t total_steps,
                       enum FmDecay decay,
                       size_t step,
                       double *out);

/**
 * `(A + eps·I)^(-1/p)` for a symmetric positive semi-definite `n×n` matrix
 * in row-major order. `out` receives `n·n` values and may alias nothing.
 *
 * # Safety
 * `a` must point to `n*n` readable doubles and `out` to `n*n` writable ones.
 */
enum FmStatus fm_inverse_pth_root(const double *a, size_t n, uint32_t p, double eps, double *out);

/**
 * Temperature-scaled distillation KL between `[batch, classes]` logit
 * matrices (row-major), written to `out`.
 *
 * # Safety
 * `student` and `teacher` must each point to `batch*classes` floats; `out`
 * must be valid for writes.
 */
enum FmStatus fm_kl_distill(const float *student,
                            const float *teacher,
                            size_t batch,
                            size_t classes,
                            double temperature,
                            float *out);

/**
 * Load a checkpoint into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes. On
 * success `*out` owns a handle that must be released with [`fm_model_free`].
 */
enum FmStatus fm_model_load(const char *path, struct FmModel **out);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`fm_model_load`] not yet freed.
 */
void fm_model_free(struct FmModel *model);

/**
 * Input resolution, channel count and number of classes of a model.
 *
 * # Safety
 * `model` must be a live handle; each out pointer may be null.
 */
enum FmStatus fm_model_info(const struct FmModel *model,
                            size_t *resolution,
                            size_t *channels,
                            size_t *classes);

/**
 * Forward pass over `batch` NHWC images in [-1, 1] at `height×width`.
 * Writes `batch × classes` logits.
 *
 * # Safety
 * `model` must be a live handle, `images` must hold
 * `batch*height*width*channels` floats and `logits` `logits_len` floats.
 */
enum FmStatus fm_model_forward(const struct FmModel *model,
                               const float *images,
                               size_t batch,
                               size_t height,
                               size_t width,
                               float *logits,
                               size_t logits_len);

/**
 * Train a teacher from labels as described by a JSON run config. Outputs
 * go to `<out_dir>/<run_id>/`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum FmStatus fm_run_train_teacher(const char *config_path, const char *out_dir);

/**
 * Distill the configured teacher into the student of a JSON run config.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum FmStatus fm_run_distill(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUNMATCH_H */
