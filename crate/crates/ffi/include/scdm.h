#ifndef SCDM_H
#define SCDM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Library errors keep the category codes
 * used as process exit codes by the command-line tool.
 */
typedef enum ScdmStatus {
  SCDM_STATUS_OK = 0,
  SCDM_STATUS_NULL_POINTER = 1,
  SCDM_STATUS_INVALID_ARGUMENT = 2,
  SCDM_STATUS_BUFFER_TOO_SMALL = 3,
  SCDM_STATUS_INPUT = 10,
  SCDM_STATUS_DIMENSION = 11,
  SCDM_STATUS_NUMERIC = 12,
  SCDM_STATUS_CONFIG = 13,
  SCDM_STATUS_LOAD = 14,
  SCDM_STATUS_UNSUPPORTED_MODE = 15,
  SCDM_STATUS_IO = 16,
  SCDM_STATUS_JSON = 17,
  SCDM_STATUS_PANIC = 99,
} ScdmStatus;

typedef enum ScdmMode {
  SCDM_MODE_SCDM = 0,
  SCDM_MODE_SCM = 1,
  SCDM_MODE_MUL = 2,
  SCDM_MODE_FC = 3,
  SCDM_MODE_NONE = 4,
} ScdmMode;

/**
 * Opaque trained model.
 */
typedef struct ScdmModel ScdmModel;

/**
 * Shapes a caller needs to prepare inputs.
 */
typedef struct ScdmModelInfo {
  enum ScdmMode mode;
  size_t input_length;
  size_t feature_dim;
  size_t vocab_size;
  size_t num_layers;
  size_t num_anchors;
} ScdmModelInfo;

/**
 * A ranked prediction in normalized video time.
 */
typedef struct ScdmSegment {
  double start;
  double end;
  double score;
} ScdmSegment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *scdm_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a
 * success. Valid until the next call into the library on this thread.
 */
const char *scdm_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScdmStatus scdm_model_load(const char *path, struct ScdmModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`scdm_model_load`] and not be used afterwards.
 */
void scdm_model_free(struct ScdmModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum ScdmStatus scdm_model_info(const struct ScdmModel *model, struct ScdmModelInfo *out);

/**
 * Grounds one query. `video` holds `num_clips` rows of `feature_dim`
 * values (row-major); it is truncated or zero-padded to the model input
 * length. Up to `capacity` ranked segments, clamped to `[0, 1]` and
 * suppressed at `nms_threshold`, are written to `out`; `*written` receives
 * the count. `max_keep` of 0 means `capacity`.
 *
 * # Safety
 * `video` must hold `num_clips * feature_dim` doubles, `tokens` must hold
 * `num_tokens` values, `out` must hold `capacity` segments and `written`
 * must be valid.
 */
enum ScdmStatus scdm_model_predict(const struct ScdmModel *model,
                                   const double *video,
                                   size_t num_clips,
                                   size_t feature_dim,
                                   const uint32_t *tokens,
                                   size_t num_tokens,
                                   double nms_threshold,
                                   size_t max_keep,
                                   struct ScdmSegment *out,
                                   size_t capacity,
                                   size_t *written);

/**
 * Temporal IoU of `[s1, e1]` and `[s2, e2]`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum ScdmStatus scdm_tiou(double s1, double e1, double s2, double e2, double *out);

/**
 * Applies offsets `(dc, dw)` to an anchor.
 *
 * # Safety
 * `center` and `width` must be valid pointers.
 */
enum ScdmStatus scdm_decode(double anchor_center,
                            double anchor_width,
                            double dc,
                            double dw,
                            double alpha_c,
                            double alpha_w,
                            double *center,
                            double *width);

/**
 * Offsets that decode an anchor to the given span.
 *
 * # Safety
 * `dc` and `dw` must be valid pointers.
 */
enum ScdmStatus scdm_encode(double anchor_center,
                            double anchor_width,
                            double center,
                            double width,
                            double alpha_c,
                            double alpha_w,
                            double *dc,
                            double *dw);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCDM_H */
