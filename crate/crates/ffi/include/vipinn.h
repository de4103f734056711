#ifndef VIPINN_H
#define VIPINN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum VipinnStatus {
  VIPINN_STATUS_OK = 0,
  VIPINN_STATUS_NULL_POINTER = 1,
  VIPINN_STATUS_INVALID_ARGUMENT = 2,
  VIPINN_STATUS_CONFIG = 3,
  /*
   The run stopped on a non-finite loss or gradient.
   */
  VIPINN_STATUS_DIVERGED = 4,
  /*
   The L2-error is undefined because the reference is zero.
   */
  VIPINN_STATUS_UNDEFINED_L2 = 5,
  VIPINN_STATUS_OUT_OF_RANGE = 6,
  VIPINN_STATUS_IO = 7,
  /*
   A panic was caught; the handle involved should be freed.
   */
  VIPINN_STATUS_INTERNAL = 8,
} VipinnStatus;

/*
 Opaque training configuration.
 */
typedef struct VipinnConfig VipinnConfig;

/*
 Opaque result of one training run.
 */
typedef struct VipinnRun VipinnRun;

/*
 One recorded checkpoint.
 */
typedef struct VipinnCheckpoint {
  uint64_t iteration;
  /*
   `L_r`, `L_b`, `L_0`
   */
  double terms[3];
  /*
   `L'_r`, `L'_b`, `L'_0`
   */
  double aux_terms[3];
  double mse;
  double l2;
  double wall_ms;
} VipinnCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *vipinn_last_error(void);

/*
 Library version, a static NUL-terminated string.
 */
const char *vipinn_version(void);

/*
 Creates a config with a benchmark's published settings.

 `problem` is one of `advection`, `burgers`, `convection_diffusion`,
 `poisson`, `wave`; `method` is `m1` to `m5` with default parameters.

 # Safety
 `problem` and `method` must be NUL-terminated strings; `out` must be
 writable.
 */
enum VipinnStatus vipinn_config_new(const char *problem,
                                    const char *method,
                                    struct VipinnConfig **out);

/*
 Parses a single-method experiment file given as TOML text.

 # Safety
 `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum VipinnStatus vipinn_config_from_toml(const char *toml, struct VipinnConfig **out);

/*
 Releases a config. Null is ignored.

 # Safety
 `config` must come from this library and not be used afterwards.
 */
void vipinn_config_free(struct VipinnConfig *config);

/*
 # Safety
 `config` must be a live handle.
 */
enum VipinnStatus vipinn_config_set_iterations(struct VipinnConfig *config, uint64_t iterations);

/*
 # Safety
 `config` must be a live handle.
 */
enum VipinnStatus vipinn_config_set_counts(struct VipinnConfig *config,
                                           uint64_t collocation,
                                           uint64_t boundary,
                                           uint64_t initial,
                                           uint64_t extra);

/*
 # Safety
 `config` must be a live handle.
 */
enum VipinnStatus vipinn_config_set_network(struct VipinnConfig *config,
                                            uint64_t hidden_layers,
                                            uint64_t neurons);

/*
 # Safety
 `config` must be a live handle.
 */
enum VipinnStatus vipinn_config_set_metric_interval(struct VipinnConfig *config, uint64_t interval);

/*
 Evaluation grid size (ignored for Burgers).

 # Safety
 `config` must be a live handle.
 */
enum VipinnStatus vipinn_config_set_test_points(struct VipinnConfig *config, uint64_t points);

/*
 # Safety
 `config` must be a live handle.
 */
enum VipinnStatus vipinn_config_set_learning_rate(struct VipinnConfig *config, double lr);

/*
 Trains one network with initialisation seed `seed`. `cache_dir` (may be
 null) is where the Burgers reference is cached. A run that diverges
 still produces a handle; query it with [`vipinn_run_final_metrics`].

 # Safety
 `config` must be a live handle, `cache_dir` null or a NUL-terminated
 string, and `out` writable.
 */
enum VipinnStatus vipinn_train(const struct VipinnConfig *config,
                               uint64_t seed,
                               const char *cache_dir,
                               struct VipinnRun **out);

/*
 Releases a run. Null is ignored.

 # Safety
 `run` must come from [`vipinn_train`] and not be used afterwards.
 */
void vipinn_run_free(struct VipinnRun *run);

/*
 Final MSE and L2-error. Returns [`VipinnStatus::Diverged`] (and writes
 the iteration to `diverged_at` when non-null) if the run failed.

 # Safety
 `run` must be a live handle; `mse` and `l2` writable; `diverged_at`
 null or writable.
 */
enum VipinnStatus vipinn_run_final_metrics(const struct VipinnRun *run,
                                           double *mse,
                                           double *l2,
                                           uint64_t *diverged_at);

/*
 Number of recorded checkpoints, 0 for a null handle.

 # Safety
 `run` must be null or a live handle.
 */
size_t vipinn_run_checkpoint_count(const struct VipinnRun *run);

/*
 # Safety
 `run` must be a live handle and `out` writable.
 */
enum VipinnStatus vipinn_run_checkpoint(const struct VipinnRun *run,
                                        size_t index,
                                        struct VipinnCheckpoint *out);

/*
 Number of test grid points, 0 for a null handle.

 # Safety
 `run` must be null or a live handle.
 */
size_t vipinn_run_grid_len(const struct VipinnRun *run);

/*
 Copies the test grid (`t`, `x`, reference) and the final mean and
 variance predictions, each `len` values in grid order. Any output
 pointer may be null to skip it. Fails if `len` differs from
 [`vipinn_run_grid_len`] or the run diverged before producing
 predictions.

 # Safety
 `run` must be a live handle and every non-null pointer must have room
 for `len` values.
 */
enum VipinnStatus vipinn_run_field(const struct VipinnRun *run,
                                   size_t len,
                                   double *t,
                                   double *x,
                                   double *reference,
                                   double *mean,
                                   double *variance);

/*
 MSE and relative L2-error of `len` predictions. With a zero reference
 the MSE is still written and [`VipinnStatus::UndefinedL2`] returned.

 # Safety
 `predictions` and `references` must hold `len` values; `mse` and `l2`
 must be writable.
 */
enum VipinnStatus vipinn_metrics(const double *predictions,
                                 const double *references,
                                 size_t len,
                                 double *mse,
                                 double *l2);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIPINN_H */
