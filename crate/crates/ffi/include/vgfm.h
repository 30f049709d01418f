#ifndef VGFM_H
#define VGFM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum VgfmStatus {
  VGFM_STATUS_OK = 0,
  VGFM_STATUS_NULL_POINTER = 1,
  VGFM_STATUS_INVALID_ARGUMENT = 2,
  VGFM_STATUS_PARSE = 3,
  VGFM_STATUS_IO = 4,
  VGFM_STATUS_SHAPE = 5,
  VGFM_STATUS_NUMERICAL = 6,
  VGFM_STATUS_NOT_CONVERGED = 7,
  VGFM_STATUS_CHECKPOINT = 8,
  VGFM_STATUS_PANIC = 9,
} VgfmStatus;

/**
 * Snapshot series.
 */
typedef struct VgfmDataset VgfmDataset;

/**
 * Trained velocity and growth networks.
 */
typedef struct VgfmModel VgfmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *vgfm_last_error_message(void);

/**
 * Reads a snapshot CSV.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum VgfmStatus vgfm_dataset_load_csv(const char *path, struct VgfmDataset **out);

/**
 * Builds a dataset with snapshot times `0..num_times` from unit-weight
 * points. `points` holds the snapshots back to back, `counts[t] x dim` each.
 *
 * # Safety
 * `counts` must hold `num_times` entries and `points` their sum times `dim`.
 */
enum VgfmStatus vgfm_dataset_new(size_t num_times,
                                 const size_t *counts,
                                 size_t dim,
                                 const double *points,
                                 struct VgfmDataset **out);

/**
 * # Safety
 * `ds` must come from this library and not be used afterwards. Null is ignored.
 */
void vgfm_dataset_free(struct VgfmDataset *ds);

/**
 * Number of snapshots and their dimension.
 *
 * # Safety
 * `ds` must be a live handle; outputs must be writable.
 */
enum VgfmStatus vgfm_dataset_shape(const struct VgfmDataset *ds, size_t *num_times, size_t *dim);

/**
 * Number of cells in snapshot `t`.
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
enum VgfmStatus vgfm_dataset_count(const struct VgfmDataset *ds, size_t t, size_t *out);

/**
 * Trains a model. `config_json` may be null (defaults) or a JSON object with
 * training configuration keys; keys it omits keep their defaults.
 *
 * # Safety
 * `ds` must be a live handle, `config_json` null or nul-terminated, `out` writable.
 */
enum VgfmStatus vgfm_train(const struct VgfmDataset *ds,
                           const char *config_json,
                           struct VgfmModel **out);

/**
 * Randomly initialized networks for `dim`-dimensional data.
 *
 * # Safety
 * `out` must be writable.
 */
enum VgfmStatus vgfm_model_init(size_t dim,
                                size_t width,
                                size_t depth,
                                uint64_t seed,
                                struct VgfmModel **out);

/**
 * # Safety
 * `path` nul-terminated, `out` writable.
 */
enum VgfmStatus vgfm_model_load(const char *path, struct VgfmModel **out);

/**
 * # Safety
 * `model` must be a live handle, `path` nul-terminated.
 */
enum VgfmStatus vgfm_model_save(const struct VgfmModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void vgfm_model_free(struct VgfmModel *model);

/**
 * # Safety
 * `model` must be a live handle, `out` writable.
 */
enum VgfmStatus vgfm_model_dim(const struct VgfmModel *model, size_t *out);

/**
 * Velocity at `n` points (`x` is `n x dim`) into `out` (`n x dim`).
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum VgfmStatus vgfm_model_velocity(const struct VgfmModel *model,
                                    const double *x,
                                    size_t n,
                                    double t,
                                    double *out);

/**
 * Growth rate at `n` points into `out` (`n`).
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum VgfmStatus vgfm_model_growth(const struct VgfmModel *model,
                                  const double *x,
                                  size_t n,
                                  double t,
                                  double *out);

/**
 * Integrates `n` particles from `t0` to `t1`; writes final positions
 * (`n x dim`) and log-weights (`n`, starting from 0).
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum VgfmStatus vgfm_model_simulate(const struct VgfmModel *model,
                                    const double *x,
                                    size_t n,
                                    double t0,
                                    double t1,
                                    size_t steps_per_unit,
                                    double *out_x,
                                    double *out_log_w);

/**
 * Exact W1 with Euclidean cost between `a` (`na x dim`, weights `wa`, null
 * for uniform) and `b` (`nb x dim`, uniform). Weights are normalized.
 *
 * # Safety
 * Buffers must hold the stated number of doubles; `out` writable.
 */
enum VgfmStatus vgfm_w1(const double *a,
                        size_t na,
                        const double *wa,
                        const double *b,
                        size_t nb,
                        size_t dim,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VGFM_H */
