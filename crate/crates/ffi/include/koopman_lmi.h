#ifndef KOOPMAN_LMI_H
#define KOOPMAN_LMI_H

/* Generated by cbindgen from koopman-lmi-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  KM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  KM_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  KM_STATUS_UTF8 = 2,
  /**
   * Invalid configuration or unknown option.
   */
  KM_STATUS_CONFIG = 3,
  /**
   * Data loading, schema, or dimension error.
   */
  KM_STATUS_DATA = 4,
  /**
   * Semidefinite solver failure.
   */
  KM_STATUS_SOLVER = 5,
  /**
   * Operation requires an asymptotically stable system.
   */
  KM_STATUS_UNSTABLE = 6,
  /**
   * Filesystem or serialization error.
   */
  KM_STATUS_IO = 7,
  /**
   * Internal panic; a bug in the library.
   */
  KM_STATUS_INTERNAL = 8,
} KmStatus;

/**
 * Opaque dataset of recorded episodes.
 */
typedef struct KmDataset KmDataset;

/**
 * Opaque fitted Koopman model.
 */
typedef struct KmModel KmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call from the same thread.
 */
const char *km_last_error_message(void);

/**
 * Load an episode CSV file (`episode`, `t`, `x0..`, `u0..` columns).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 * The returned handle must be released with `km_dataset_free`.
 */
KmStatus km_dataset_load_csv(const char *path, KmDataset **out);

/**
 * Generate a synthetic dataset from a JSON-encoded generator spec (the
 * `data.synthetic` object of the experiment config).
 *
 * # Safety
 * `spec_json` must be a valid NUL-terminated string and `out` a valid
 * pointer. The returned handle must be released with `km_dataset_free`.
 */
KmStatus km_dataset_generate(const char *spec_json, KmDataset **out);

/**
 * Write a dataset in the episode CSV format.
 *
 * # Safety
 * `dataset` must be a live handle from this library; `path` a valid string.
 */
KmStatus km_dataset_save_csv(const KmDataset *dataset, const char *path);

/**
 * Number of episodes in the dataset; zero for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle from this library.
 */
size_t km_dataset_n_episodes(const KmDataset *dataset);

/**
 * Release a dataset handle (null is ignored).
 *
 * # Safety
 * `dataset` must be null or an unreleased handle from this library.
 */
void km_dataset_free(KmDataset *dataset);

/**
 * Fit a Koopman model on the dataset. `config_toml` is the experiment
 * config (its `lifting`, `regression`, and `solver` sections drive the fit;
 * the `data` section is ignored here).
 *
 * # Safety
 * `dataset` must be a live handle, `config_toml` a valid string, `out` a
 * valid pointer. The returned handle must be released with `km_model_free`.
 */
KmStatus km_fit(const KmDataset *dataset, const char *config_toml, KmModel **out);

/**
 * Load a model from its JSON container.
 *
 * # Safety
 * `path` must be a valid string and `out` a valid pointer. The returned
 * handle must be released with `km_model_free`.
 */
KmStatus km_model_load_json(const char *path, KmModel **out);

/**
 * Save a model to its JSON container.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid string.
 */
KmStatus km_model_save_json(const KmModel *model, const char *path);

/**
 * Serialize a model to a JSON string owned by the library; release it with
 * `km_string_free`.
 *
 * # Safety
 * `model` must be a live handle and `out_json` a valid pointer.
 */
KmStatus km_model_to_json(const KmModel *model, char **out_json);

/**
 * Spectral radius of the model's `A` block.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
KmStatus km_model_spectral_radius(const KmModel *model, double *out);

/**
 * H-infinity norm of the model's state-space realization to relative
 * tolerance `tol`. Fails with `KM_STATUS_UNSTABLE` for unstable models.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
KmStatus km_model_hinf_norm(const KmModel *model, double tol, double *out);

/**
 * Multi-step prediction of one episode: root-mean-square error and the
 * divergence flag.
 *
 * # Safety
 * `model` and `dataset` must be live handles; `out_rms` and `out_diverged`
 * valid pointers.
 */
KmStatus km_model_predict_rms(const KmModel *model,
                              const KmDataset *dataset,
                              uint64_t episode_id,
                              double *out_rms,
                              int *out_diverged);

/**
 * Release a model handle (null is ignored).
 *
 * # Safety
 * `model` must be null or an unreleased handle from this library.
 */
void km_model_free(KmModel *model);

/**
 * Release a string allocated by this library (null is ignored).
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void km_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPMAN_LMI_H */
