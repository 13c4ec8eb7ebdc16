#ifndef SLR_H
#define SLR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SlrAverage {
  SLR_AVERAGE_MACRO = 0,
  SLR_AVERAGE_MICRO = 1,
  SLR_AVERAGE_WEIGHTED = 2,
} SlrAverage;

// Status codes. The nonzero values match the `slr` command's exit codes.
typedef enum SlrStatus {
  SLR_STATUS_OK = 0,
  SLR_STATUS_CONFIG = 2,
  SLR_STATUS_DATA = 3,
  SLR_STATUS_NUMERIC = 4,
  SLR_STATUS_IO = 5,
  SLR_STATUS_NULL_ARGUMENT = 6,
  SLR_STATUS_PANIC = 7,
} SlrStatus;

// Opaque model handle.
typedef struct SlrModel SlrModel;

typedef struct SlrAttribution {
  double base_value;
  double explained_output;
  double residual;
} SlrAttribution;

typedef struct SlrMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
} SlrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next `slr_*` call on the same thread.
const char *slr_last_error(void);

// Library version as a static NUL-terminated string.
const char *slr_version(void);

// Loads a checkpoint directory written by `slr train`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out_model` writable.
enum SlrStatus slr_model_load(const char *dir, struct SlrModel **out_model);

// Builds an untrained model: a random-weight backbone of `architecture`
// at `side` x `side` plus a freshly initialised head, both from `seed`.
//
// # Safety
// `architecture` must be a NUL-terminated string and `out_model` writable.
enum SlrStatus slr_model_build(const char *architecture,
                               size_t side,
                               size_t classes,
                               uint64_t seed,
                               struct SlrModel **out_model);

// Releases a model. Null is accepted.
//
// # Safety
// `model` must come from `slr_model_load` or `slr_model_build` and not have
// been freed already.
void slr_model_free(struct SlrModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t slr_model_classes(const struct SlrModel *model);

// Name of class `k`, or null when out of range. Owned by the handle.
//
// # Safety
// `model` must be null or a live handle.
const char *slr_model_class_name(const struct SlrModel *model, size_t k);

// Expected image shape (height, width, channels).
//
// # Safety
// `model` must be a live handle; the outputs must be writable.
enum SlrStatus slr_model_input_shape(const struct SlrModel *model,
                                     size_t *height,
                                     size_t *width,
                                     size_t *channels);

// Trainable (head) and non-trainable (backbone) parameter counts.
//
// # Safety
// `model` must be a live handle; the outputs must be writable.
enum SlrStatus slr_model_param_counts(const struct SlrModel *model,
                                      size_t *trainable,
                                      size_t *non_trainable);

// Class probabilities for `n` images into `probs` (`n * classes` doubles,
// row-major).
//
// # Safety
// `images` must hold `n * height * width * channels` doubles and `probs`
// must have room for `probs_len` doubles.
enum SlrStatus slr_model_predict(const struct SlrModel *model,
                                 const double *images,
                                 size_t n,
                                 double *probs,
                                 size_t probs_len);

// Expected-gradients attribution of class `class` for one image against
// `background_n` background images. `values` receives one double per input
// element.
//
// # Safety
// `image` holds one image, `background` holds `background_n` images,
// `values` has room for `values_len` doubles and `result` is writable.
enum SlrStatus slr_model_attribute(const struct SlrModel *model,
                                   const double *image,
                                   const double *background,
                                   size_t background_n,
                                   size_t class_,
                                   size_t n_samples,
                                   uint64_t seed,
                                   double *values,
                                   size_t values_len,
                                   struct SlrAttribution *result);

// Softmax of `k` logits into `probs`.
//
// # Safety
// Both arrays must hold `k` doubles.
enum SlrStatus slr_softmax(const double *logits, size_t k, double *probs);

// Cross entropy of `probs` against the label-smoothed target for `label`.
//
// # Safety
// `probs` must hold `k` doubles and `loss` must be writable.
enum SlrStatus slr_cross_entropy_lsr(const double *probs,
                                     size_t k,
                                     size_t label,
                                     double epsilon,
                                     double *loss);

// Accuracy and averaged precision, recall and F1 for `n` label pairs.
//
// # Safety
// `y_true` and `y_pred` must hold `n` values and `metrics` must be writable.
enum SlrStatus slr_metrics(const size_t *y_true,
                           const size_t *y_pred,
                           size_t n,
                           size_t classes,
                           enum SlrAverage average,
                           struct SlrMetrics *metrics);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SLR_H */
