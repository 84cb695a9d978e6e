#ifndef FLUENCE_H
#define FLUENCE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FluenceStatus {
  FLUENCE_STATUS_OK = 0,
  FLUENCE_STATUS_VALIDATION = 1,
  FLUENCE_STATUS_IO = 2,
  FLUENCE_STATUS_NUMERICAL = 3,
  FLUENCE_STATUS_NULL_POINTER = 4,
  FLUENCE_STATUS_BUFFER_TOO_SMALL = 5,
  FLUENCE_STATUS_PANIC = 6,
} FluenceStatus;

typedef struct FluenceEmbeddings FluenceEmbeddings;

typedef struct FluenceModel FluenceModel;

typedef struct FluenceRunSet FluenceRunSet;

/*
 Fit settings. Obtain defaults from `fluence_fit_config_default`.
 */
typedef struct FluenceFitConfig {
  uintptr_t order;
  uintptr_t proj_dim;
  bool share_projections;
  double l2_lambda;
  double learning_rate;
  uintptr_t warmup_steps;
  uintptr_t max_epochs;
  uintptr_t batch_size;
  /*
   0 disables early stopping.
   */
  uintptr_t early_stop_patience;
  uint64_t seed;
} FluenceFitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failed call on this thread, or NULL. The
 pointer stays valid until the next call on the same thread.
 */
const char *fluence_last_error(void);

struct FluenceFitConfig fluence_fit_config_default(void);

/*
 Loads a run file or a directory of run files.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum FluenceStatus fluence_runs_load(const char *path, struct FluenceRunSet **out);

/*
 # Safety
 `runs` must be a live handle and `out` writable.
 */
enum FluenceStatus fluence_runs_len(const struct FluenceRunSet *runs, uintptr_t *out);

/*
 # Safety
 `runs` must be NULL or a handle not yet freed.
 */
void fluence_runs_free(struct FluenceRunSet *runs);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum FluenceStatus fluence_embeddings_load(const char *path, struct FluenceEmbeddings **out);

/*
 # Safety
 `emb` must be a live handle and `out` writable.
 */
enum FluenceStatus fluence_embeddings_dim(const struct FluenceEmbeddings *emb, uintptr_t *out);

/*
 # Safety
 `emb` must be NULL or a handle not yet freed.
 */
void fluence_embeddings_free(struct FluenceEmbeddings *emb);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum FluenceStatus fluence_model_load(const char *path, struct FluenceModel **out);

/*
 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum FluenceStatus fluence_model_save(const struct FluenceModel *model, const char *path);

/*
 # Safety
 `model` must be NULL or a handle not yet freed.
 */
void fluence_model_free(struct FluenceModel *model);

/*
 Fits the simulator. `metric` may be NULL for test loss.

 # Safety
 Handles must be live, `config` readable, `metric` NULL or a
 NUL-terminated string, and `out` writable.
 */
enum FluenceStatus fluence_fit(const struct FluenceRunSet *train,
                               const struct FluenceRunSet *val,
                               const struct FluenceEmbeddings *emb,
                               const struct FluenceFitConfig *config,
                               const char *metric,
                               struct FluenceModel **out);

/*
 Rolls the model out for `test_id` on run `run_index` into `values`.
 `out_len` always receives the trajectory length; if it exceeds
 `capacity` nothing is written and `BufferTooSmall` is returned.

 # Safety
 Handles must be live, `test_id` a NUL-terminated string, `values`
 writable for `capacity` doubles and `out_len` writable.
 */
enum FluenceStatus fluence_rollout(const struct FluenceModel *model,
                                   const struct FluenceRunSet *runs,
                                   uintptr_t run_index,
                                   const struct FluenceEmbeddings *emb,
                                   const char *test_id,
                                   double *values,
                                   uintptr_t capacity,
                                   uintptr_t *out_len);

/*
 Writes the `order` lag factors `A[i][j]` into `alpha` and the additive
 factor into `beta`.

 # Safety
 Handles must be live, ids NUL-terminated strings, `alpha` writable for
 `capacity` doubles and `beta` writable.
 */
enum FluenceStatus fluence_influence_factors(const struct FluenceModel *model,
                                             const struct FluenceEmbeddings *emb,
                                             const char *train_id,
                                             const char *test_id,
                                             double *alpha,
                                             uintptr_t capacity,
                                             double *beta);

/*
 All-steps MSE of `pred` against `truth`, skipping the first `order` steps.

 # Safety
 `pred` and `truth` must be readable for `len` doubles, `out` writable.
 */
enum FluenceStatus fluence_all_steps_mse(const double *pred,
                                         const double *truth,
                                         uintptr_t len,
                                         uintptr_t order,
                                         double *out);

/*
 Tie-corrected Spearman correlation of two samples.

 # Safety
 `xs` and `ys` must be readable for `len` doubles, `out` writable.
 */
enum FluenceStatus fluence_spearman(const double *xs, const double *ys, uintptr_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLUENCE_H */
