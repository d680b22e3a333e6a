#ifndef MAGSR_H
#define MAGSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum MagsrStatus {
  MAGSR_STATUS_OK = 0,
  MAGSR_STATUS_INVALID_ARGUMENT = 1,
  // Unreadable, truncated or corrupt file.
  MAGSR_STATUS_IO = 2,
  // Well-formed input with the wrong schema or version.
  MAGSR_STATUS_SCHEMA = 3,
  // Operation not valid for this object, e.g. variance from a mean-only model.
  MAGSR_STATUS_STATE = 4,
  // Numerical domain error, e.g. a non-positive variance.
  MAGSR_STATUS_DOMAIN = 5,
  MAGSR_STATUS_NULL_POINTER = 6,
  // A Rust panic was caught at the boundary.
  MAGSR_STATUS_PANIC = 7,
} MagsrStatus;

// Layers of an uncertainty-map handle.
typedef enum MagsrLayer {
  MAGSR_LAYER_MEAN = 0,
  MAGSR_LAYER_EPISTEMIC = 1,
  MAGSR_LAYER_ALEATORIC = 2,
  MAGSR_LAYER_TOTAL = 3,
} MagsrLayer;

// Predictive mean and variance maps from MC-dropout inference.
typedef struct MagsrMaps MagsrMaps;

// A trained network loaded from a weight snapshot.
typedef struct MagsrModel MagsrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failing call on this thread; empty after a success.
// The pointer stays valid until the next `magsr_*` call on this thread.
const char *magsr_last_error(void);

// Library version as a static NUL-terminated string.
const char *magsr_version(void);

// Normalized `size`×`size` Gaussian weights into `out` (length `size²`).
//
// # Safety
// `out` must point to `out_len` writable doubles.
enum MagsrStatus magsr_gaussian_kernel(size_t size, double sigma, double *out, size_t out_len);

// Gaussian smoothing then block averaging of an HR grid.
//
// `sigma <= 0` selects `scale_factor / 2`; `kernel_size == 0` selects
// `2·ceil(2·sigma) + 1`. `lr_len` must equal
// `(height / scale_factor) · (width / scale_factor)`.
//
// # Safety
// `hr` must point to `height·width` readable doubles and `lr` to `lr_len`
// writable doubles.
enum MagsrStatus magsr_degrade(const double *hr,
                               size_t height,
                               size_t width,
                               size_t scale_factor,
                               double sigma,
                               size_t kernel_size,
                               double *lr,
                               size_t lr_len);

// Heteroskedastic Gaussian NLL averaged over `n` pixels, and optionally
// its gradients with respect to `mean` and `variance`.
//
// # Safety
// The three inputs must each point to `n` readable doubles; `loss` must
// be writable; `grad_mean` and `grad_variance` may be null, otherwise
// they must point to `n` writable doubles.
enum MagsrStatus magsr_heteroskedastic_nll(const double *mean,
                                           const double *variance,
                                           const double *target,
                                           size_t n,
                                           double *loss,
                                           double *grad_mean,
                                           double *grad_variance);

// Splits `samples` (mean, variance) pairs into predictive mean, epistemic,
// aleatoric and total variance.
//
// `means` and `variances` hold the samples back to back, each
// `height·width` long. Any of the four outputs may be null.
//
// # Safety
// `means` and `variances` must point to `samples·height·width` readable
// doubles; non-null outputs must point to `height·width` writable doubles.
enum MagsrStatus magsr_decompose(const double *means,
                                 const double *variances,
                                 size_t samples,
                                 size_t height,
                                 size_t width,
                                 double *mean_out,
                                 double *epistemic_out,
                                 double *aleatoric_out,
                                 double *total_out);

// Loads a weight snapshot into a new handle stored in `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum MagsrStatus magsr_model_load(const char *path, struct MagsrModel **out);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must come from `magsr_model_load` and not be used afterwards.
void magsr_model_free(struct MagsrModel *model);

// Per-axis upscale factor and whether the model predicts a variance.
//
// # Safety
// `model` must be a live handle; the outputs must be writable.
enum MagsrStatus magsr_model_info(const struct MagsrModel *model,
                                  size_t *scale_factor,
                                  int *has_variance);

// One forward pass. `stochastic != 0` samples dropout masks from `seed`.
//
// Outputs are `(height·s)·(width·s)` long; `variance_out` may be null and
// must be null for a mean-only model.
//
// # Safety
// `model` must be a live handle, `lr` must point to `height·width`
// readable doubles, and non-null outputs to `out_len` writable doubles.
enum MagsrStatus magsr_model_forward(const struct MagsrModel *model,
                                     const double *lr,
                                     size_t height,
                                     size_t width,
                                     int stochastic,
                                     uint64_t seed,
                                     double *mean_out,
                                     double *variance_out,
                                     size_t out_len);

// `samples` MC-dropout passes decomposed into uncertainty maps.
//
// # Safety
// `model` must be a live handle, `lr` must point to `height·width`
// readable doubles and `out` must be writable.
enum MagsrStatus magsr_infer(const struct MagsrModel *model,
                             const double *lr,
                             size_t height,
                             size_t width,
                             size_t samples,
                             uint64_t base_seed,
                             struct MagsrMaps **out);

// Shape of the maps and the number of samples behind them.
//
// # Safety
// `maps` must be a live handle; the outputs must be writable.
enum MagsrStatus magsr_maps_info(const struct MagsrMaps *maps,
                                 size_t *height,
                                 size_t *width,
                                 size_t *samples);

// Copies one layer (a [`MagsrLayer`] value) into `out`, which must hold
// `height·width` doubles.
//
// # Safety
// `maps` must be a live handle and `out` must point to `out_len`
// writable doubles.
enum MagsrStatus magsr_maps_copy(const struct MagsrMaps *maps,
                                 int layer,
                                 double *out,
                                 size_t out_len);

// Releases a maps handle. Null is ignored.
//
// # Safety
// `maps` must come from `magsr_infer` and not be used afterwards.
void magsr_maps_free(struct MagsrMaps *maps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAGSR_H */
