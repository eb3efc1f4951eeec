#ifndef SAT_FFI_H
#define SAT_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SatStatus {
  SAT_STATUS_OK = 0,
  // Null pointer, bad UTF-8 or an undersized output buffer.
  SAT_STATUS_INVALID_ARGUMENT = 1,
  SAT_STATUS_DIMENSION = 2,
  SAT_STATUS_CONTRACT = 3,
  SAT_STATUS_CONFIG = 4,
  SAT_STATUS_DATA = 5,
  SAT_STATUS_NUMERICAL = 6,
  SAT_STATUS_FORMAT = 7,
  SAT_STATUS_IO = 8,
  SAT_STATUS_INTERNAL = 9,
} SatStatus;

typedef enum SatScoreMode {
  SAT_SCORE_MODE_EXPECTED = 0,
  SAT_SCORE_MODE_ARGMAX = 1,
} SatScoreMode;

// Opaque dataset handle.
typedef struct SatDataset SatDataset;

// Opaque trained-model handle.
typedef struct SatModelHandle SatModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next `sat_*` call on the same thread.
const char *sat_last_error(void);

// Library version as a static NUL-terminated string.
const char *sat_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void sat_string_free(char *s);

// Generates a synthetic dataset from a JSON data configuration (`"{}"` for defaults).
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum SatStatus sat_dataset_generate(const char *config_json, struct SatDataset **out);

// # Safety
// `dir` must be a NUL-terminated path; `out` must be writable.
enum SatStatus sat_dataset_load(const char *dir, struct SatDataset **out);

// # Safety
// `ds` must be a live dataset handle; `dir` a NUL-terminated path.
enum SatStatus sat_dataset_save(const struct SatDataset *ds, const char *dir);

// # Safety
// `ds` must be a live dataset handle; `num_samples` and `num_regions` writable.
enum SatStatus sat_dataset_shape(const struct SatDataset *ds,
                                 size_t *num_samples,
                                 size_t *num_regions);

// Copies the labels of sample `index` into `labels[0..num_regions]`.
//
// # Safety
// `ds` must be a live dataset handle; `labels` must hold `len` values.
enum SatStatus sat_dataset_labels(const struct SatDataset *ds,
                                  size_t index,
                                  uint32_t *labels,
                                  size_t len);

// # Safety
// `ds` must be null or a handle from this library that has not been freed.
void sat_dataset_free(struct SatDataset *ds);

// Trains with a JSON run configuration, writing artifacts under `out_dir`.
//
// # Safety
// String arguments must be NUL-terminated; `ds` a live dataset handle.
enum SatStatus sat_train(const char *config_json, const struct SatDataset *ds, const char *out_dir);

// Loads the model stored in a checkpoint file.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum SatStatus sat_model_load(const char *path, struct SatModelHandle **out);

// # Safety
// `model` must be a live model handle; `out` writable.
enum SatStatus sat_model_num_regions(const struct SatModelHandle *model, size_t *out);

// Predicted scores for sample `index` of `ds`, one per region.
//
// # Safety
// Handles must be live; `scores` must hold `len` values.
enum SatStatus sat_model_predict(const struct SatModelHandle *model,
                                 const struct SatDataset *ds,
                                 size_t index,
                                 enum SatScoreMode mode,
                                 uint32_t *scores,
                                 size_t len);

// Evaluates `model` on `ds` with the default age map. On success `*report_json`
// holds a report to be released with [`sat_string_free`].
//
// # Safety
// Handles must be live; `thetas` must hold `num_thetas` values; `report_json` writable.
enum SatStatus sat_model_evaluate(const struct SatModelHandle *model,
                                  const struct SatDataset *ds,
                                  const double *thetas,
                                  size_t num_thetas,
                                  enum SatScoreMode mode,
                                  char **report_json);

// # Safety
// `model` must be null or a handle from this library that has not been freed.
void sat_model_free(struct SatModelHandle *model);

// Total maturity score of five region scores.
//
// # Safety
// `scores` must hold `len` values; `out` writable.
enum SatStatus sat_sauvegrain_sum(const double *scores, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAT_FFI_H */
