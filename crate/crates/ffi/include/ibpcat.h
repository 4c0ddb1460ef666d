#ifndef IBPCAT_H
#define IBPCAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum IbpStatus {
  IBP_STATUS_OK = 0,
  IBP_STATUS_NULL_POINTER = 1,
  IBP_STATUS_INVALID_ARGUMENT = 2,
  IBP_STATUS_DIMENSION = 3,
  IBP_STATUS_PARSE = 4,
  IBP_STATUS_IO = 5,
  IBP_STATUS_NOT_CONVERGED = 6,
  IBP_STATUS_NUMERICAL = 7,
  IBP_STATUS_PANIC = 8,
} IbpStatus;

/**
 * Categorical observations, N rows by D dimensions.
 */
typedef struct IbpDataset IbpDataset;

/**
 * Binary feature matrix Z.
 */
typedef struct IbpFeatures IbpFeatures;

/**
 * Completed Gibbs chain.
 */
typedef struct IbpGibbsResult IbpGibbsResult;

/**
 * Completed variational run.
 */
typedef struct IbpViResult IbpViResult;

/**
 * Settings of [`ibp_gibbs_run`].
 */
typedef struct IbpGibbsConfig {
  size_t n_iterations;
  size_t burn_in;
  size_t k_init;
  double p_init;
  double alpha;
  double sigma_b_sq;
  uint64_t seed;
  /**
   * Upper bound on the number of features; 0 means unbounded.
   */
  size_t max_features;
} IbpGibbsConfig;

/**
 * Settings of [`ibp_vi_run`].
 */
typedef struct IbpViConfig {
  size_t truncation;
  double alpha;
  double sigma_b_sq;
  uint64_t seed;
  size_t max_cycles;
  double tolerance;
} IbpViConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The string stays
 * valid until the next failing call on the same thread.
 */
const char *ibp_last_error(void);

/**
 * Builds a dataset from row-major 1-based categories.
 *
 * # Safety
 * `cardinalities` must point to `n_cols` values and `data` to
 * `n_rows * n_cols` values; `out` must be writable.
 */
enum IbpStatus ibp_dataset_new(size_t n_rows,
                               size_t n_cols,
                               const size_t *cardinalities,
                               const uint32_t *data,
                               struct IbpDataset **out);

/**
 * Reads a dataset CSV (`R:` header, 1-based categories).
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum IbpStatus ibp_dataset_load(const char *path, struct IbpDataset **out);

/**
 * # Safety
 * `dataset` must be a live handle or null.
 */
size_t ibp_dataset_n_rows(const struct IbpDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null.
 */
size_t ibp_dataset_n_cols(const struct IbpDataset *dataset);

/**
 * # Safety
 * `dataset` must come from this library and not be used afterwards.
 */
void ibp_dataset_free(struct IbpDataset *dataset);

/**
 * Builds Z from row-major 0/1 entries.
 *
 * # Safety
 * `entries` must point to `n_rows * k` bytes; `out` must be writable.
 */
enum IbpStatus ibp_features_new(size_t n_rows,
                                size_t k,
                                const uint8_t *entries,
                                struct IbpFeatures **out);

/**
 * # Safety
 * `features` must be a live handle or null.
 */
size_t ibp_features_n_rows(const struct IbpFeatures *features);

/**
 * Number of feature columns.
 *
 * # Safety
 * `features` must be a live handle or null.
 */
size_t ibp_features_k(const struct IbpFeatures *features);

/**
 * Copies Z row-major into `buffer`, which must hold exactly N·K bytes.
 *
 * # Safety
 * `buffer` must point to `len` writable bytes.
 */
enum IbpStatus ibp_features_copy(const struct IbpFeatures *features, uint8_t *buffer, size_t len);

/**
 * # Safety
 * `features` must come from this library and not be used afterwards.
 */
void ibp_features_free(struct IbpFeatures *features);

/**
 * Σ_d log p(x_·d | Z) under the Laplace approximation.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum IbpStatus ibp_log_marginal(const struct IbpDataset *dataset,
                                const struct IbpFeatures *features,
                                double sigma_b_sq,
                                double *out);

/**
 * Settings of the image experiment with the given seed.
 */
struct IbpGibbsConfig ibp_gibbs_config_default(uint64_t seed);

/**
 * Runs the collapsed Gibbs sampler.
 *
 * # Safety
 * `dataset` and `config` must be valid; `out` must be writable.
 */
enum IbpStatus ibp_gibbs_run(const struct IbpDataset *dataset,
                             const struct IbpGibbsConfig *config,
                             struct IbpGibbsResult **out);

/**
 * Number of recorded sweeps.
 *
 * # Safety
 * `result` must be a live handle or null.
 */
size_t ibp_gibbs_n_iterations(const struct IbpGibbsResult *result);

/**
 * Copies K₊ and Σ_d log p(x_·d | Z) after every sweep; both buffers must
 * hold exactly [`ibp_gibbs_n_iterations`] values.
 *
 * # Safety
 * Buffers must point to `len` writable values.
 */
enum IbpStatus ibp_gibbs_trace(const struct IbpGibbsResult *result,
                               size_t *k_active,
                               double *log_marginal,
                               size_t len);

/**
 * Final Z of the chain as a new handle.
 *
 * # Safety
 * `result` must be live; `out` must be writable.
 */
enum IbpStatus ibp_gibbs_final_features(const struct IbpGibbsResult *result,
                                        struct IbpFeatures **out);

/**
 * # Safety
 * `result` must come from this library and not be used afterwards.
 */
void ibp_gibbs_result_free(struct IbpGibbsResult *result);

/**
 * Runs variational inference from a random start.
 *
 * # Safety
 * `dataset` and `config` must be valid; `out` must be writable.
 */
enum IbpStatus ibp_vi_run(const struct IbpDataset *dataset,
                          const struct IbpViConfig *config,
                          struct IbpViResult **out);

/**
 * Length of the bound trace (initial bound plus one entry per cycle).
 *
 * # Safety
 * `result` must be a live handle or null.
 */
size_t ibp_vi_bound_len(const struct IbpViResult *result);

/**
 * # Safety
 * `bounds` must point to `len` writable values.
 */
enum IbpStatus ibp_vi_bounds(const struct IbpViResult *result, double *bounds, size_t len);

/**
 * Copies ν row-major (N × truncation).
 *
 * # Safety
 * `nu` must point to `len` writable values.
 */
enum IbpStatus ibp_vi_nu(const struct IbpViResult *result, double *nu, size_t len);

/**
 * Z with z_nk = 1 iff ν_nk > threshold.
 *
 * # Safety
 * `result` must be live; `out` must be writable.
 */
enum IbpStatus ibp_vi_binarize(const struct IbpViResult *result,
                               double threshold,
                               struct IbpFeatures **out);

/**
 * # Safety
 * `result` must come from this library and not be used afterwards.
 */
void ibp_vi_result_free(struct IbpViResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IBPCAT_H */
