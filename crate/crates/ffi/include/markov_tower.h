#ifndef MARKOV_TOWER_H
#define MARKOV_TOWER_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtStatus {
  MT_STATUS_OK = 0,
  MT_STATUS_NULL_POINTER = 1,
  MT_STATUS_INVALID_ARGUMENT = 2,
  MT_STATUS_CONFIG = 3,
  MT_STATUS_VERIFICATION = 4,
  MT_STATUS_NUMERICAL = 5,
  MT_STATUS_IO = 6,
  MT_STATUS_OUT_OF_RANGE = 7,
  MT_STATUS_BUFFER_TOO_SMALL = 8,
  MT_STATUS_PANIC = 9,
} MtStatus;

/**
 * A map model.
 */
typedef struct MtModel MtModel;

/**
 * A finished tower.
 */
typedef struct MtTower MtTower;

/**
 * Tower parameters. A NaN `p` selects the base point automatically.
 */
typedef struct MtTowerConfig {
  double delta0;
  double delta1;
  uint32_t r0;
  uint32_t n_max;
  uint32_t particles;
  double p;
} MtTowerConfig;

/**
 * One partition element: its arc at time zero and return time.
 */
typedef struct MtElement {
  double lo;
  double hi;
  uint32_t return_time;
  double log_measure;
} MtElement;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty when none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mt_last_error_message(void);

/**
 * Creates a model by catalog name (`doubling`, `lsv`, `gauss`, `viana`).
 * A NaN `alpha` or zero `k_max` keeps the model default.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MtStatus mt_model_new(const char *name, double alpha, uint32_t k_max, struct MtModel **out);

/**
 * # Safety
 * `model` must come from [`mt_model_new`] and not be used afterwards.
 */
void mt_model_free(struct MtModel *model);

/**
 * Evaluates a one-dimensional model at `x`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MtStatus mt_model_evaluate(const struct MtModel *model, double x, double *out);

/**
 * Writes the branch pre-images of `y` into `buf`. `len` receives the
 * number of pre-images, also when `cap` is too small.
 *
 * # Safety
 * `buf` must hold `cap` doubles; other pointers must be valid.
 */
enum MtStatus mt_model_preimages(const struct MtModel *model,
                                 double y,
                                 double *buf,
                                 size_t cap,
                                 size_t *len);

/**
 * Default tower parameters.
 */
struct MtTowerConfig mt_tower_config_default(void);

/**
 * Builds a tower with the model's default expansion settings.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MtStatus mt_tower_run(const struct MtModel *model,
                           const struct MtTowerConfig *cfg,
                           struct MtTower **out);

/**
 * # Safety
 * `tower` must come from [`mt_tower_run`] and not be used afterwards.
 */
void mt_tower_free(struct MtTower *tower);

/**
 * # Safety
 * Pointers must be valid.
 */
enum MtStatus mt_tower_element_count(const struct MtTower *tower, size_t *out);

/**
 * # Safety
 * Pointers must be valid.
 */
enum MtStatus mt_tower_element(const struct MtTower *tower, size_t index, struct MtElement *out);

/**
 * Number of recorded steps, including step zero.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MtStatus mt_tower_step_count(const struct MtTower *tower, size_t *out);

/**
 * Measure of the unpartitioned part `Delta_n` after step `n`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MtStatus mt_tower_leb_delta(const struct MtTower *tower, size_t n, double *out);

/**
 * Fraction of the base left unpartitioned at the last step.
 *
 * # Safety
 * Pointers must be valid.
 */
enum MtStatus mt_tower_unpartitioned_fraction(const struct MtTower *tower, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARKOV_TOWER_H */
