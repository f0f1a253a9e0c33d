#ifndef DEEPIDE_H
#define DEEPIDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DeepideActivation {
  DEEPIDE_ACTIVATION_SIGMOID = 0,
  DEEPIDE_ACTIVATION_TANH = 1,
  DEEPIDE_ACTIVATION_SMOOTHED_RELU = 2,
  DEEPIDE_ACTIVATION_IDENTITY = 3,
} DeepideActivation;

typedef enum DeepideLoss {
  DEEPIDE_LOSS_MSE = 0,
  DEEPIDE_LOSS_CROSS_ENTROPY = 1,
} DeepideLoss;

typedef enum DeepidePredictor {
  DEEPIDE_PREDICTOR_IDENTITY = 0,
  DEEPIDE_PREDICTOR_LOGISTIC = 1,
  DEEPIDE_PREDICTOR_SOFTMAX = 2,
} DeepidePredictor;

typedef enum DeepideStatus {
  DEEPIDE_STATUS_OK = 0,
  DEEPIDE_STATUS_NULL_POINTER = 1,
  DEEPIDE_STATUS_INVALID_ARGUMENT = 2,
  DEEPIDE_STATUS_GRID_MISMATCH = 3,
  DEEPIDE_STATUS_SHAPE_MISMATCH = 4,
  DEEPIDE_STATUS_NON_FINITE = 5,
  DEEPIDE_STATUS_NO_CONVERGENCE = 6,
  DEEPIDE_STATUS_NUMERICAL = 7,
  DEEPIDE_STATUS_DUPLICATE_DATA = 8,
  DEEPIDE_STATUS_IO = 9,
  DEEPIDE_STATUS_PARSE = 10,
  DEEPIDE_STATUS_PANIC = 11,
} DeepideStatus;

/**
 * Opaque classifier `(w, μ)`.
 */
typedef struct DeepideClassifier DeepideClassifier;

/**
 * Opaque control path `(a, b)` on a uniform time grid.
 */
typedef struct DeepideControl DeepideControl;

/**
 * Opaque spatial grid.
 */
typedef struct DeepideGrid DeepideGrid;

/**
 * Opaque validated training set.
 */
typedef struct DeepideTrainingSet DeepideTrainingSet;

/**
 * Admissible control box `[a_min, a_max] × [b_min, b_max]`.
 */
typedef struct DeepideBox {
  double a_min;
  double a_max;
  double b_min;
  double b_max;
} DeepideBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *deepide_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *deepide_last_error_message(void);

void deepide_clear_last_error(void);

/**
 * Uniform tensor grid on `[lower, upper]` with `counts[i]` cells per axis.
 *
 * # Safety
 * `lower`, `upper` and `counts` must point to `dim` readable elements.
 */
enum DeepideStatus deepide_grid_uniform(size_t dim,
                                        const double *lower,
                                        const double *upper,
                                        const size_t *counts,
                                        struct DeepideGrid **out);

/**
 * Number of cells, 0 for NULL.
 *
 * # Safety
 * `grid` must be NULL or a live handle.
 */
size_t deepide_grid_len(const struct DeepideGrid *grid);

/**
 * # Safety
 * `grid` must be NULL or a handle not yet freed.
 */
void deepide_grid_free(struct DeepideGrid *grid);

/**
 * Training set from `n` initial states on `y` and `n` targets on `u`.
 *
 * # Safety
 * `init` must hold `n · len(y)` values and `targets` `n · len(u)` values.
 */
enum DeepideStatus deepide_training_set_new(const struct DeepideGrid *y,
                                            const struct DeepideGrid *u,
                                            size_t n,
                                            const double *init,
                                            const double *targets,
                                            struct DeepideTrainingSet **out);

/**
 * Loads a bundle directory or `bundle.json`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
enum DeepideStatus deepide_training_set_load(const char *path, struct DeepideTrainingSet **out);

/**
 * # Safety
 * `data` must be NULL or a live handle.
 */
size_t deepide_training_set_len(const struct DeepideTrainingSet *data);

/**
 * Cells of the label grid `Y` of a training set, 0 for NULL.
 *
 * # Safety
 * `data` must be NULL or a live handle.
 */
size_t deepide_training_set_grid_len(const struct DeepideTrainingSet *data);

/**
 * # Safety
 * `data` must be NULL or a handle not yet freed.
 */
void deepide_training_set_free(struct DeepideTrainingSet *data);

/**
 * Zero controls on `steps` uniform intervals of `[0, t_end]` over the label
 * grid of `data`.
 *
 * # Safety
 * `data` must be a live handle.
 */
enum DeepideStatus deepide_control_zeros(const struct DeepideTrainingSet *data,
                                         double t_end,
                                         size_t steps,
                                         struct DeepideControl **out);

/**
 * # Safety
 * `ctrl` must be NULL or a handle not yet freed.
 */
void deepide_control_free(struct DeepideControl *ctrl);

/**
 * Identity classifier `W f = f` on the label grid (requires `U = Y`).
 *
 * # Safety
 * `data` must be a live handle.
 */
enum DeepideStatus deepide_classifier_identity(const struct DeepideTrainingSet *data,
                                               struct DeepideClassifier **out);

/**
 * # Safety
 * `cls` must be NULL or a handle not yet freed.
 */
void deepide_classifier_free(struct DeepideClassifier *cls);

/**
 * Euler-propagates the training data; writes the terminal states
 * (`len(data) × grid_len` values) into `terminal`.
 *
 * # Safety
 * Handles must be live; `terminal` must have room for `len` values.
 */
enum DeepideStatus deepide_forward(const struct DeepideTrainingSet *data,
                                   const struct DeepideControl *ctrl,
                                   enum DeepideActivation activation,
                                   double *terminal,
                                   size_t len);

/**
 * Loss and the four stationarity residuals `‖D_aJ‖, ‖D_bJ‖, ‖D_wJ‖, ‖D_μJ‖`.
 *
 * # Safety
 * Handles must be live; `residuals` must have room for 4 values.
 */
enum DeepideStatus deepide_evaluate(const struct DeepideTrainingSet *data,
                                    const struct DeepideControl *ctrl,
                                    const struct DeepideClassifier *cls,
                                    enum DeepideActivation activation,
                                    enum DeepidePredictor predictor,
                                    enum DeepideLoss loss,
                                    double *out_loss,
                                    double *residuals);

/**
 * Backtracking gradient flow; replaces `ctrl` and `cls` in place with the
 * trained values and stores the final loss.
 *
 * # Safety
 * Handles must be live and not aliased by another thread.
 */
enum DeepideStatus deepide_train(const struct DeepideTrainingSet *data,
                                 struct DeepideControl *ctrl,
                                 struct DeepideClassifier *cls,
                                 enum DeepideActivation activation,
                                 enum DeepidePredictor predictor,
                                 enum DeepideLoss loss,
                                 double step,
                                 size_t iters,
                                 double *out_loss);

/**
 * `H_HJB(v, r)` for `n` states and co-states on `grid`.
 *
 * # Safety
 * `v` and `r` must each hold `n · grid_len` values.
 */
enum DeepideStatus deepide_hjb_hamiltonian(const struct DeepideGrid *grid,
                                           size_t n,
                                           const double *v,
                                           const double *r,
                                           struct DeepideBox bounds,
                                           enum DeepideActivation activation,
                                           double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPIDE_H */
