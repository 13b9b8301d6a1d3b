/* C interface to the counterfactual-attribution library. */

#ifndef DAC_H
#define DAC_H

/* Generated by the dac-ffi build script from src/lib.rs; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code returned by every fallible `dac_*` call.
 */
typedef enum DacStatus {
  /**
   * The call succeeded and all outputs were written.
   */
  DAC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  DAC_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument failed validation (bad length, unknown method, class
   * out of range, …); see `dac_last_error`.
   */
  DAC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The checkpoint could not be read or failed structural validation.
   */
  DAC_STATUS_LOAD_FAILED = 3,
  /**
   * Inference, attribution, or evaluation failed on valid-looking
   * arguments (e.g. uninitialized batch-norm statistics).
   */
  DAC_STATUS_COMPUTE_FAILED = 4,
  /**
   * An internal invariant was violated; the library caught a panic at
   * the boundary instead of unwinding into the caller.
   */
  DAC_STATUS_INTERNAL_PANIC = 5,
} DacStatus;

/**
 * Opaque handle to a loaded model checkpoint.
 */
typedef struct DacModel DacModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string; never null.
 */
const char *dac_version(void);

/**
 * Message describing the most recent failure on the calling thread, or an
 * empty string if none. The pointer is invalidated by the next failing
 * `dac_*` call on this thread; copy the string if it must outlive that.
 */
const char *dac_last_error(void);

/**
 * Load a checkpoint from `path` (NUL-terminated UTF-8) and store the new
 * handle in `*out`. On failure `*out` is left untouched. The handle must
 * be released with `dac_model_free`.
 */
enum DacStatus dac_model_load(const char *path, struct DacModel **out);

/**
 * Release a handle returned by `dac_model_load`. Null is a no-op. The
 * handle must not be used afterwards.
 */
void dac_model_free(struct DacModel *model);

/**
 * Side length of the square input the model expects; 0 if `model` is null.
 */
size_t dac_model_input_size(const struct DacModel *model);

/**
 * Number of output classes; 0 if `model` is null.
 */
size_t dac_model_num_classes(const struct DacModel *model);

/**
 * Run the model on one image of `input_size * input_size` pixels and write
 * the class probabilities (softmax, summing to 1) into `probs_out`, whose
 * length must equal the number of classes.
 */
enum DacStatus dac_model_predict(const struct DacModel *model,
                                 const double *pixels,
                                 size_t pixels_len,
                                 double *probs_out,
                                 size_t probs_len);

/**
 * Compute one attribution map for a real/counterfactual image pair and
 * write it (row-major, possibly signed) into `map_out`.
 *
 * `method` is one of `ingrads`, `d-ingrads`, `ig`, `d-ig`, `dl`, `d-dl`,
 * `gc`, `d-gc`, `ggc`, `d-ggc`, `residual`, `random`. Standard methods
 * explain `real` at `class_real`; discriminative ones contrast against
 * `counterfactual` at `class_counterfactual`. `ig_steps` is consumed only
 * by `ig`/`d-ig` (and must be ≥ 1 there); `random_seed` only by `random`.
 * Both image buffers and `map_out` must hold `input_size * input_size`
 * values.
 */
enum DacStatus dac_attribute(const struct DacModel *model,
                             const char *method,
                             const double *real,
                             const double *counterfactual,
                             size_t pixels_len,
                             size_t class_real,
                             size_t class_counterfactual,
                             size_t ig_steps,
                             uint64_t random_seed,
                             double *map_out,
                             size_t map_len);

/**
 * Score one real/counterfactual pair under an attribution map: sweep mask
 * thresholds over the map's magnitudes, build hybrids, and integrate the
 * class-probability gain. Writes the curve area to `auc_out` and the
 * minimal sufficient mask's pixel fraction / objective value to
 * `min_fraction_out` / `min_score_out`.
 *
 * `map` may come from `dac_attribute` or elsewhere; signed values are
 * reduced to magnitudes. `method` labels the map and must name a known
 * method. `n_thresholds` must be ≥ 2. All three out pointers are required.
 */
enum DacStatus dac_evaluate_pair(const struct DacModel *model,
                                 const char *method,
                                 const double *real,
                                 const double *counterfactual,
                                 size_t pixels_len,
                                 size_t class_real,
                                 size_t class_counterfactual,
                                 const double *map,
                                 size_t map_len,
                                 size_t n_thresholds,
                                 double *auc_out,
                                 double *min_fraction_out,
                                 double *min_score_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DAC_H */
