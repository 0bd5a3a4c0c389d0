#ifndef RESCUENET_H
#define RESCUENET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum RnStatus {
  RN_STATUS_OK = 0,
  // Null pointer, bad length or out-of-range value.
  RN_STATUS_INVALID_ARGUMENT = 1,
  // File system failure.
  RN_STATUS_IO = 2,
  // Malformed file or input data.
  RN_STATUS_FORMAT = 3,
  // Invalid or incompatible configuration.
  RN_STATUS_CONFIG = 4,
  // Internal invariant violated or panic caught.
  RN_STATUS_INTERNAL = 5,
} RnStatus;

// Fusion rule of [`rn_model_predict`].
typedef enum RnFusion {
  RN_FUSION_MEAN_LOGPROB = 0,
  RN_FUSION_SEG_ONLY = 1,
  RN_FUSION_CHANGE_ONLY = 2,
} RnFusion;

// Opaque 5x5 confusion matrix.
typedef struct RnConfusion RnConfusion;

// Opaque model loaded from a checkpoint.
typedef struct RnModel RnModel;

// Scores derived from a confusion matrix.
typedef struct RnScore {
  double f1_loc;
  double f1_damage[4];
  double f1_harmonic;
  double score;
  uint64_t n_pixels;
} RnScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *rn_last_error(void);

// Library version as a static NUL-terminated string.
const char *rn_version(void);

// # Safety
// `out` must be a valid pointer to write a handle to.
enum RnStatus rn_confusion_new(struct RnConfusion **out);

// Adds `len` aligned label pairs. Pixels whose ground truth is 255 are
// ignored.
//
// # Safety
// `cm` must come from [`rn_confusion_new`]; `gt` and `pred` must point to
// `len` bytes each.
enum RnStatus rn_confusion_accumulate(struct RnConfusion *cm,
                                      const uint8_t *gt,
                                      const uint8_t *pred,
                                      size_t len);

// Adds the counts of `src` to `dst`.
//
// # Safety
// Both handles must come from [`rn_confusion_new`].
enum RnStatus rn_confusion_merge(struct RnConfusion *dst, const struct RnConfusion *src);

// # Safety
// `cm` must come from [`rn_confusion_new`]; `out` must be writable.
enum RnStatus rn_confusion_score(const struct RnConfusion *cm, struct RnScore *out);

// # Safety
// `cm` must come from [`rn_confusion_new`] or be null.
void rn_confusion_free(struct RnConfusion *cm);

// Loads a model from a training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RnStatus rn_model_load(const char *path, struct RnModel **out);

// Predicts label masks for `n` image pairs given as `n x 3 x h x w` floats
// in `[0, 1]`, writing `n * h * w` class values to `out_masks`.
//
// # Safety
// `model` must come from [`rn_model_load`]; `pre` and `post` must point to
// `n * 3 * h * w` floats and `out_masks` to `n * h * w` writable bytes.
enum RnStatus rn_model_predict(const struct RnModel *model,
                               const float *pre,
                               const float *post,
                               size_t n,
                               size_t h,
                               size_t w,
                               enum RnFusion fusion,
                               uint8_t *out_masks);

// # Safety
// `model` must come from [`rn_model_load`] or be null.
void rn_model_free(struct RnModel *model);

// Writes `count` synthetic scene pairs of `image_size` pixels to `dir`
// with the default generator settings.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum RnStatus rn_generate_dataset(const char *dir, size_t count, uint64_t seed, size_t image_size);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RESCUENET_H */
