#ifndef NSSEG_H
#define NSSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NssStatus {
  NSS_STATUS_OK = 0,
  NSS_STATUS_INVALID_ARGUMENT = 1,
  NSS_STATUS_NUMERIC = 2,
  NSS_STATUS_STORAGE = 3,
  NSS_STATUS_FORMAT = 4,
  NSS_STATUS_CONFIG = 5,
  NSS_STATUS_UNDEFINED_METRIC = 6,
  NSS_STATUS_NULL_POINTER = 7,
  NSS_STATUS_PANIC = 8,
} NssStatus;

// A trained or freshly initialized segmentation model.
typedef struct NssModel NssModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or an empty string.
// The pointer stays valid until the next failing call on the same thread.
const char *nss_last_error(void);

// Library version as a static NUL-terminated string.
const char *nss_version(void);

// Load a checkpoint file into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum NssStatus nss_model_load(const char *path, struct NssModel **out);

// Create a model with the default architecture, initialized from `seed`.
// A `zero` of true gives all-zero parameters instead.
//
// # Safety
// `out` must be a valid pointer.
enum NssStatus nss_model_new(uint64_t seed, bool zero, struct NssModel **out);

// Release a handle. Null is accepted and ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void nss_model_free(struct NssModel *model);

// # Safety
// `model` and `path` must be valid.
enum NssStatus nss_model_save(const struct NssModel *model, const char *path);

// Number of trainable parameters.
//
// # Safety
// `model` must be a valid handle or null (which yields 0).
size_t nss_model_num_params(const struct NssModel *model);

// Write the 16-hex-digit checkpoint id and a NUL into `buf` (17 bytes).
//
// # Safety
// `buf` must hold `len` bytes.
enum NssStatus nss_model_id(const struct NssModel *model, char *buf, size_t len);

// Per-pixel lesion probabilities of one frame, written to `probs`
// (`height * width` values). Also returns the frame score (max pixel)
// through `score` when it is non-null.
//
// # Safety
// Buffers must hold `height * width` elements.
enum NssStatus nss_model_forward(const struct NssModel *model,
                                 const double *frame,
                                 size_t height,
                                 size_t width,
                                 double *probs,
                                 double *score);

// `out = in ^ gamma` per pixel.
//
// # Safety
// Buffers must hold `height * width` elements.
enum NssStatus nss_power_law(const double *frame,
                             size_t height,
                             size_t width,
                             double gamma,
                             double *out);

// `out = gain * ln(1 + in)` per pixel, clamped to [0, 1].
//
// # Safety
// Buffers must hold `height * width` elements.
enum NssStatus nss_log_correction(const double *frame,
                                  size_t height,
                                  size_t width,
                                  double gain,
                                  double *out);

// Trinarize a probability map: in a positive frame POS above `k_pos`,
// NEG below `k_neg`, IGNORE between (bounds inclusive); a negative frame is
// all NEG.
//
// # Safety
// Buffers must hold `height * width` elements.
enum NssStatus nss_pixel_pseudolabels(const double *probs,
                                      size_t height,
                                      size_t width,
                                      bool is_positive,
                                      double k_pos,
                                      double k_neg,
                                      uint8_t *labels);

// Number of frames the ranker marks positive: `ceil(n * c / 100)`.
size_t nss_positive_count(size_t n, double percentile_c);

// Retrieval average precision of `n` scored binary items.
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be valid.
enum NssStatus nss_average_precision(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out);

// ROC-AUC (Mann-Whitney, ties count one half) of `n` scored binary items.
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be valid.
enum NssStatus nss_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Write the bundled benchmark under `out_dir`, including its
// `experiment.toml`.
//
// # Safety
// `out_dir` must be a NUL-terminated string.
enum NssStatus nss_generate_benchmark(const char *out_dir);

// Run the experiment described by `config_path` into `out_dir`. On success
// `*test_stack_ap` (when non-null) receives the test stack AP of the last
// model.
//
// # Safety
// Strings must be NUL-terminated; `test_stack_ap` may be null.
enum NssStatus nss_run_experiment(const char *config_path,
                                  const char *out_dir,
                                  double *test_stack_ap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NSSEG_H */
