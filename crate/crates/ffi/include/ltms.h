#ifndef LTMS_H
#define LTMS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LtmsStatus {
  LTMS_STATUS_OK = 0,
  LTMS_STATUS_NULL_ARGUMENT = 1,
  LTMS_STATUS_INVALID_ARGUMENT = 2,
  LTMS_STATUS_DATA_ERROR = 3,
  LTMS_STATUS_NUMERIC_ERROR = 4,
  LTMS_STATUS_BUFFER_TOO_SMALL = 5,
  LTMS_STATUS_PANIC = 6,
} LtmsStatus;

/**
 * Opaque model handle.
 */
typedef struct LtmsModel LtmsModel;

/**
 * Opaque prediction handle.
 */
typedef struct LtmsPrediction LtmsPrediction;

/**
 * Shape of a model's inputs and outputs.
 */
typedef struct LtmsDims {
  size_t hidden;
  size_t modes;
  size_t observed;
  size_t predicted;
} LtmsDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ltms_last_error(void);

/**
 * Fresh model with the default configuration and the given seed.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum LtmsStatus ltms_model_new_default(uint64_t seed, struct LtmsModel **out);

/**
 * Model restored from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LtmsStatus ltms_model_load(const char *path, struct LtmsModel **out);

/**
 * Writes the model parameters to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum LtmsStatus ltms_model_save(const struct LtmsModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void ltms_model_free(struct LtmsModel *model);

/**
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum LtmsStatus ltms_model_dims(const struct LtmsModel *model, struct LtmsDims *out);

/**
 * Number of trainable parameters.
 *
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum LtmsStatus ltms_model_param_count(const struct LtmsModel *model, size_t *out);

/**
 * Predicts every agent present at the last observed step.
 *
 * `positions` holds `agents * steps * 2` world coordinates, agent-major;
 * `valid` holds `agents * steps` flags (nonzero means observed). Only the
 * first `observed` steps are read. `lanes` holds `lane_count * 4` values
 * `(x0, y0, x1, y1)` and `lane_flags` one bitmask per lane (1 turn,
 * 2 intersection, 4 traffic control); both may be null when `lane_count`
 * is zero.
 *
 * # Safety
 * Every non-null pointer must reference at least the stated number of
 * elements and `out` must be writable.
 */
enum LtmsStatus ltms_predict(const struct LtmsModel *model,
                             const double *positions,
                             const uint8_t *valid,
                             size_t agents,
                             size_t steps,
                             double sample_rate_hz,
                             const double *lanes,
                             const uint8_t *lane_flags,
                             size_t lane_count,
                             struct LtmsPrediction **out);

/**
 * # Safety
 * `pred` must come from this library or be null.
 */
void ltms_prediction_free(struct LtmsPrediction *pred);

/**
 * Number of predicted agents.
 *
 * # Safety
 * `pred` must come from this library and `out` be writable.
 */
enum LtmsStatus ltms_prediction_agents(const struct LtmsPrediction *pred, size_t *out);

/**
 * Input agent index of output `slot`.
 *
 * # Safety
 * `pred` must come from this library and `out` be writable.
 */
enum LtmsStatus ltms_prediction_agent_index(const struct LtmsPrediction *pred,
                                            size_t slot,
                                            size_t *out);

/**
 * World-frame mode locations of `slot` as `modes * predicted * 2` values.
 * `refined` selects the refined trajectories instead of the proposals.
 *
 * # Safety
 * `pred` must come from this library and `buf` hold `len` doubles.
 */
enum LtmsStatus ltms_prediction_locations(const struct LtmsPrediction *pred,
                                          size_t slot,
                                          bool refined,
                                          double *buf,
                                          size_t len);

/**
 * Mode probabilities of `slot`.
 *
 * # Safety
 * `pred` must come from this library and `buf` hold `len` doubles.
 */
enum LtmsStatus ltms_prediction_probabilities(const struct LtmsPrediction *pred,
                                              size_t slot,
                                              double *buf,
                                              size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LTMS_H */
