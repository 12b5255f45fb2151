#ifndef NISHIMORI_LAB_H
#define NISHIMORI_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum NlStatus {
  NL_STATUS_OK = 0,
  NL_STATUS_NULL_POINTER = 1,
  NL_STATUS_INVALID_UTF8 = 2,
  NL_STATUS_INVALID_CONFIG = 3,
  NL_STATUS_INVALID_ARGUMENT = 4,
  NL_STATUS_ENUMERATION_LIMIT = 5,
  NL_STATUS_NUMERICAL = 6,
  NL_STATUS_IO = 7,
  NL_STATUS_BUFFER_TOO_SMALL = 8,
  NL_STATUS_CHECKS_FAILED = 9,
  NL_STATUS_PANIC = 10,
} NlStatus;

/**
 * A planted instance: σ*, parameters and base data.
 */
typedef struct NlInstance NlInstance;

/**
 * A posterior over one instance and one side-channel realisation.
 */
typedef struct NlPosterior NlPosterior;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *nl_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next call into the library.
 */
const char *nl_last_error(void);

/**
 * Generates a planted instance from a model config (`{prior, channel, N, seed}` JSON).
 *
 * # Safety
 * `model_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NlStatus nl_instance_new(const char *model_json, struct NlInstance **out);

/**
 * # Safety
 * `inst` must come from this library and not be used afterwards. Null is ignored.
 */
void nl_instance_free(struct NlInstance *inst);

/**
 * Number of spins, 0 for a null handle.
 *
 * # Safety
 * `inst` must be null or a live handle.
 */
size_t nl_instance_n(const struct NlInstance *inst);

/**
 * Copies σ* into `out` (capacity `len`).
 *
 * # Safety
 * `inst` must be a live handle and `out` must hold `len` doubles.
 */
enum NlStatus nl_instance_signal(const struct NlInstance *inst, double *out, size_t len);

/**
 * Writes the instance to the binary container format.
 *
 * # Safety
 * `inst` must be a live handle and `path` a NUL-terminated string.
 */
enum NlStatus nl_instance_save(const struct NlInstance *inst, const char *path);

/**
 * Reads an instance written by [`nl_instance_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NlStatus nl_instance_load(const char *path, struct NlInstance **out);

/**
 * Exact posterior of an instance. With a non-null `perturbation_json`, side
 * channels are built at the configured λ and drawn from its `noise_seed`.
 *
 * # Safety
 * `inst` must be a live handle, `perturbation_json` null or NUL-terminated, `out` valid.
 */
enum NlStatus nl_posterior_new(const struct NlInstance *inst,
                               const char *perturbation_json,
                               struct NlPosterior **out);

/**
 * # Safety
 * `post` must come from this library and not be used afterwards. Null is ignored.
 */
void nl_posterior_free(struct NlPosterior *post);

/**
 * `ln Z` of the posterior.
 *
 * # Safety
 * `post` must be a live handle and `out` a valid pointer.
 */
enum NlStatus nl_posterior_log_partition(const struct NlPosterior *post, double *out);

/**
 * Posterior means `⟨σᵢ⟩` into `out` (capacity `len` ≥ N).
 *
 * # Safety
 * `post` must be a live handle and `out` must hold `len` doubles.
 */
enum NlStatus nl_posterior_site_means(const struct NlPosterior *post, double *out, size_t len);

/**
 * `(1/N)Σᵢ Πℓ (σᵢ^ℓ)^{kℓ}` for `n_replicas` row-major replicas of length `n`.
 * `powers` may be null (all ones) or hold `n_replicas` exponents.
 *
 * # Safety
 * `replicas` must hold `n_replicas * n` doubles; `powers` null or `n_replicas` values; `out` valid.
 */
enum NlStatus nl_multioverlap(const double *replicas,
                              size_t n_replicas,
                              size_t n,
                              const uint32_t *powers,
                              double *out);

/**
 * Runs an experiment config (the CLI `run` command) and writes its outputs to
 * `output_dir`. Returns [`NlStatus::ChecksFailed`] when any check fails.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum NlStatus nl_run_config(const char *config_json, const char *output_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NISHIMORI_LAB_H */
