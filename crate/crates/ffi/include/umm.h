#ifndef UMM_H
#define UMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum UmmStatus {
  UMM_STATUS_OK = 0,
  UMM_STATUS_NULL_POINTER = 1,
  UMM_STATUS_INVALID_ARGUMENT = 2,
  UMM_STATUS_DIMENSION_MISMATCH = 3,
  // Non-finite values, non-SPD matrices, rank deficiency and similar.
  UMM_STATUS_NUMERICAL = 4,
  UMM_STATUS_INVALID_SPEC = 5,
  UMM_STATUS_INVALID_CONFIG = 6,
  UMM_STATUS_IO = 7,
  UMM_STATUS_FORMAT = 8,
  UMM_STATUS_UNSUPPORTED = 9,
  UMM_STATUS_BUFFER_TOO_SMALL = 10,
  // A Rust panic was caught at the boundary.
  UMM_STATUS_PANIC = 11,
} UmmStatus;

// Which side of the network split a feature request refers to.
typedef enum UmmLayer {
  // Output of the frozen early part `f_e`.
  UMM_LAYER_EARLY = 0,
  // Output of the full extractor.
  UMM_LAYER_LAST = 1,
} UmmLayer;

typedef enum UmmRateMode {
  UMM_RATE_MODE_EXACT = 0,
  UMM_RATE_MODE_TRACE = 1,
} UmmRateMode;

// Opaque generated or loaded dataset.
typedef struct UmmDataset UmmDataset;

// Opaque extractor plus optional projection head.
typedef struct UmmNetwork UmmNetwork;

// Scalar knobs of the synthetic data generator.
typedef struct UmmScmParams {
  size_t d_r;
  size_t d_ur;
  // `0` selects `2 (d_r + d_ur)`.
  size_t d_x;
  size_t k;
  double sigma_a;
  double dependence;
  double ur_scale;
  double r_gain;
} UmmScmParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *umm_version(void);

// Static name of a status code.
const char *umm_status_name(enum UmmStatus status);

// Message of the last failed call on this thread (empty after a success).
// Valid until the next call into the library from the same thread.
const char *umm_last_error_message(void);

// Generator defaults.
struct UmmScmParams umm_scm_params_default(void);

// Builds a generator from `params` and `spec_seed` and draws `n` samples
// with `data_seed`.
//
// # Safety
// `params` must point to a valid struct and `out` to writable storage.
enum UmmStatus umm_dataset_generate(const struct UmmScmParams *params,
                                    uint64_t spec_seed,
                                    size_t n,
                                    uint64_t data_seed,
                                    struct UmmDataset **out);

// Loads a dataset directory written by `umm gen-data` or
// [`umm_dataset_save`].
//
// # Safety
// `dir` must be a NUL-terminated string and `out` writable.
enum UmmStatus umm_dataset_load(const char *dir, struct UmmDataset **out);

// # Safety
// `dataset` must be a live handle and `dir` a NUL-terminated string.
enum UmmStatus umm_dataset_save(const struct UmmDataset *dataset, const char *dir);

// # Safety
// `dataset` must be null or a handle not yet freed.
void umm_dataset_free(struct UmmDataset *dataset);

// Feature dimension, sample count and class count.
//
// # Safety
// `dataset` must be a live handle; outputs must be writable.
enum UmmStatus umm_dataset_shape(const struct UmmDataset *dataset,
                                 size_t *d_x,
                                 size_t *n,
                                 size_t *k);

// Copies the observations (`n x d_x`, sample-major).
//
// # Safety
// `dataset` must be a live handle; `buf` must hold `capacity` doubles.
enum UmmStatus umm_dataset_copy_x(const struct UmmDataset *dataset, double *buf, size_t capacity);

// Copies the `n` class labels.
//
// # Safety
// `dataset` must be a live handle; `buf` must hold `capacity` elements.
enum UmmStatus umm_dataset_copy_labels(const struct UmmDataset *dataset,
                                       size_t *buf,
                                       size_t capacity);

// Loads a checkpoint by path prefix (`prefix.mlpc`, optional `prefix.head`).
//
// # Safety
// `prefix` must be a NUL-terminated string and `out` writable.
enum UmmStatus umm_network_load(const char *prefix, struct UmmNetwork **out);

// # Safety
// `network` must be a live handle and `prefix` a NUL-terminated string.
enum UmmStatus umm_network_save(const struct UmmNetwork *network, const char *prefix);

// # Safety
// `network` must be null or a handle not yet freed.
void umm_network_free(struct UmmNetwork *network);

// Input, early-layer and output widths.
//
// # Safety
// `network` must be a live handle; outputs must be writable.
enum UmmStatus umm_network_shape(const struct UmmNetwork *network,
                                 size_t *d_in,
                                 size_t *d_early,
                                 size_t *d_out);

// Features of `n` inputs (`n x d_in`) at `layer`, written sample-major
// (`n x d_early` or `n x d_out`).
//
// # Safety
// `network` must be a live handle; `x` must hold `n * d_in` doubles and
// `out` `capacity` doubles.
enum UmmStatus umm_network_features(const struct UmmNetwork *network,
                                    const double *x,
                                    size_t n,
                                    size_t d_in,
                                    enum UmmLayer layer,
                                    double *out,
                                    size_t capacity);

// Coding rate `R(Z, eps)` of `n` feature vectors of width `m`
// (`n x m`, used as given).
//
// # Safety
// `z` must hold `n * m` doubles; `out` must be writable.
enum UmmStatus umm_coding_rate(const double *z,
                               size_t n,
                               size_t m,
                               double eps,
                               enum UmmRateMode mode,
                               double *out);

// Monitoring ΔR: features are unit-normalized, membership is the anchored
// softmax assignment, exact mode.
//
// # Safety
// `z` must hold `n * m` doubles; `out` must be writable.
enum UmmStatus umm_delta_r(const double *z, size_t n, size_t m, double eps, double *out);

// Held-out accuracy of the seeded linear probe on `n x d` features.
//
// # Safety
// `features` must hold `n * d` doubles, `labels` `n` entries; `accuracy`
// must be writable.
enum UmmStatus umm_linear_probe(const double *features,
                                size_t n,
                                size_t d,
                                const size_t *labels,
                                uint64_t seed,
                                double *accuracy);

// Leave-one-out k-NN accuracy (cosine distance) on `n x d` features.
//
// # Safety
// As for [`umm_linear_probe`].
enum UmmStatus umm_knn_accuracy(const double *features,
                                size_t n,
                                size_t d,
                                const size_t *labels,
                                size_t k,
                                double *accuracy);

// Runs a CLI command (`gen-data`, `pretrain`, `monitor`, `umm`, `eval`,
// `report`) with `config_text` in the `key=value` config format. Outputs go
// to the configured `out` directory.
//
// # Safety
// Both arguments must be NUL-terminated strings.
enum UmmStatus umm_run(const char *command, const char *config_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UMM_H */
