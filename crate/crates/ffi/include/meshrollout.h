#ifndef MESHROLLOUT_H
#define MESHROLLOUT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which half of a dataset to address.
 */
typedef enum MrSplit {
  MR_SPLIT_TRAIN = 0,
  MR_SPLIT_TEST = 1,
} MrSplit;

/**
 * Result codes of every exported function.
 */
typedef enum MrStatus {
  MR_STATUS_OK = 0,
  MR_STATUS_NULL_POINTER = 1,
  MR_STATUS_INVALID_ARGUMENT = 2,
  MR_STATUS_CONFIG = 3,
  MR_STATUS_IO = 4,
  MR_STATUS_CHECKPOINT = 5,
  MR_STATUS_NUMERIC = 6,
  MR_STATUS_BUFFER_TOO_SMALL = 7,
  MR_STATUS_PANIC = 8,
  MR_STATUS_INTERNAL = 9,
} MrStatus;

/**
 * Generated train and test trajectories.
 */
typedef struct MrDataset MrDataset;

/**
 * A model with its parameters and normalization statistics.
 */
typedef struct MrModel MrModel;

/**
 * Rollout metrics on a dataset split.
 */
typedef struct MrMetrics {
  double one_step_rmse;
  double rollout_rmse;
  uint64_t diverged;
} MrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread, NUL-terminated, into
 * `buf`. `required` receives the needed size including the terminator.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null with `len = 0`.
 */
enum MrStatus mr_last_error_message(char *buf, size_t len, size_t *required);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mr_version(void);

/**
 * Generates a dataset from a TOML dataset description (empty for the
 * defaults).
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum MrStatus mr_dataset_generate(const char *toml, struct MrDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from [`mr_dataset_generate`], freed once.
 */
void mr_dataset_free(struct MrDataset *ds);

/**
 * Number of trajectories in one split.
 *
 * # Safety
 * `ds` must be a live dataset handle; `out` valid for writes.
 */
enum MrStatus mr_dataset_len(const struct MrDataset *ds, enum MrSplit split, size_t *out);

/**
 * Node count, stored states and components per node of a trajectory.
 *
 * # Safety
 * `ds` must be a live dataset handle; outputs valid for writes.
 */
enum MrStatus mr_trajectory_shape(const struct MrDataset *ds,
                                  enum MrSplit split,
                                  size_t index,
                                  size_t *nodes,
                                  size_t *steps,
                                  size_t *components);

/**
 * Copies the node-major `nodes × components` state at step `t` into `buf`.
 *
 * # Safety
 * `ds` must be a live dataset handle; `buf` valid for `len` doubles.
 */
enum MrStatus mr_trajectory_state(const struct MrDataset *ds,
                                  enum MrSplit split,
                                  size_t index,
                                  size_t t,
                                  double *buf,
                                  size_t len);

/**
 * Trains a model on the training split of `ds` according to an experiment
 * TOML (its dataset section is ignored) with the given seed.
 *
 * # Safety
 * `toml` must be NUL-terminated, `ds` a live handle, `out` valid for writes.
 */
enum MrStatus mr_model_train(const char *toml,
                             const struct MrDataset *ds,
                             uint64_t seed,
                             struct MrModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` valid for writes.
 */
enum MrStatus mr_model_load(const char *path, struct MrModel **out);

/**
 * Writes the model's checkpoint, including optimizer state, to `path`.
 *
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum MrStatus mr_model_save(const struct MrModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed once.
 */
void mr_model_free(struct MrModel *model);

/**
 * Trainable scalar count of a model.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum MrStatus mr_model_num_parameters(const struct MrModel *model, size_t *out);

/**
 * One-step and all-rollout RMSE on a split. `horizon = 0` rolls out each
 * trajectory to its end.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out` valid for writes.
 */
enum MrStatus mr_model_evaluate(const struct MrModel *model,
                                const struct MrDataset *ds,
                                enum MrSplit split,
                                size_t horizon,
                                struct MrMetrics *out);

/**
 * Runs the numerical theory suites; `passed` and `total` count checks.
 *
 * # Safety
 * Outputs must be valid for writes.
 */
enum MrStatus mr_verify(uint64_t seed, size_t *passed, size_t *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MESHROLLOUT_H */
