#ifndef FAYHERRIOT_H
#define FAYHERRIOT_H

/* This file is generated by cbindgen from fayherriot-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every fallible call.
typedef enum FhStatus {
  FH_STATUS_OK = 0,
  FH_STATUS_NULL_POINTER = 1,
  FH_STATUS_INVALID_ARGUMENT = 2,
  FH_STATUS_NUMERIC_ERROR = 3,
  FH_STATUS_IMPROPER_POSTERIOR = 4,
  FH_STATUS_SINGULAR = 5,
  FH_STATUS_PANIC = 6,
} FhStatus;

// Estimation method selector for `fh_fit`.
typedef enum FhMethod {
  FH_METHOD_ML = 0,
  FH_METHOD_REML = 1,
  // Power adjustment; pass the exponent as `power_s`.
  FH_METHOD_ADJ_POWER = 2,
  FH_METHOD_MULTI_GOAL = 3,
} FhMethod;

// Prior selector for `fh_posterior_summary`.
typedef enum FhPrior {
  FH_PRIOR_FLAT = 0,
  FH_PRIOR_MULTI_GOAL = 1,
  // General multi-goal prior built from a power adjustment; pass the
  // exponent as `power_s`.
  FH_PRIOR_GENERAL_MG = 2,
  FH_PRIOR_GANESH_LAHIRI_UNIFORM = 3,
} FhPrior;

// Opaque dataset handle.
typedef struct fh_dataset fh_dataset;

// Posterior summaries for one area.
typedef struct FhPosteriorSummary {
  double e_b;
  double v_b;
  double e_theta;
  double v_theta;
  uint64_t node_count;
  double a_lo;
  double a_hi;
} FhPosteriorSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string; do not free.
const char *fh_version(void);

// The last error message raised on this thread, or null. The caller owns
// the returned string and must release it with `fh_string_free`.
char *fh_last_error_message(void);

// Frees a string returned by this library.
//
// # Safety
// `s` must be null or a pointer previously returned by
// `fh_last_error_message`, not yet freed.
void fh_string_free(char *s);

// Builds a dataset from caller arrays: `y` and `d` of length `m`, `x` in
// row-major order with `m * p` entries, and optionally `area_ids` as `m`
// nul-terminated strings (null for generated ids). Returns null on error.
//
// # Safety
// The array pointers must be valid for the stated lengths; `area_ids`,
// when non-null, must point to `m` valid C strings.
struct fh_dataset *fh_dataset_new(size_t m,
                                  size_t p,
                                  const double *y,
                                  const double *d,
                                  const double *x,
                                  const char *const *area_ids);

// Releases a dataset handle.
//
// # Safety
// `ds` must be null or a pointer from `fh_dataset_new`, not yet freed.
void fh_dataset_free(struct fh_dataset *ds);

// Number of areas in the dataset (0 for null).
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t fh_dataset_m(const struct fh_dataset *ds);

// Fits the variance component under `method` and fills per-area arrays
// (each of length `m`, each optional): the variance-component estimate,
// the shrinkage factor and the EBLUP.
//
// # Safety
// `ds` must be a live dataset handle; each non-null output must point to
// `m` writable doubles.
enum FhStatus fh_fit(const struct fh_dataset *ds,
                     enum FhMethod method,
                     double power_s,
                     double *out_a_hat,
                     double *out_b_hat,
                     double *out_theta_hat);

// Taylor-series MSE of the multi-goal EBLUP, one value per area.
//
// # Safety
// `ds` must be a live dataset handle; `out_mse` must point to `m`
// writable doubles.
enum FhStatus fh_taylor_mse(const struct fh_dataset *ds, double *out_mse);

// Posterior summaries of `(B_i, theta_i)` for one area. `power_s` is the
// exponent for `GeneralMg` and ignored otherwise; `quad_tol <= 0` selects
// the default quadrature tolerance.
//
// # Safety
// `ds` must be a live dataset handle and `out` a writable summary struct.
enum FhStatus fh_posterior_summary(const struct fh_dataset *ds,
                                   enum FhPrior prior,
                                   double power_s,
                                   size_t area,
                                   double quad_tol,
                                   struct FhPosteriorSummary *out);

// Single parametric bootstrap MSE of the multi-goal EBLUP. Fills the
// per-area estimates and, optionally, their Monte Carlo standard errors.
//
// # Safety
// `ds` must be a live dataset handle; `out_estimate` (and `out_stderr`
// when non-null) must point to `m` writable doubles.
enum FhStatus fh_bootstrap_mse(const struct fh_dataset *ds,
                               size_t replicates,
                               uint64_t seed,
                               double *out_estimate,
                               double *out_stderr);

// Posterior-propriety flags for the power adjustment `(A + D_i)^s`: used
// raw as a prior, and wrapped in the general multi-goal prior. Flags are
// written as 0/1.
//
// # Safety
// Non-null outputs must be writable.
enum FhStatus fh_check_propriety(double s,
                                 size_t m,
                                 size_t p,
                                 int32_t *out_proper_raw,
                                 int32_t *out_proper_general_mg);

// Adjustment-factor gradient for the nested error regression model along
// direction `(k_v, k_e)`; writes the two components to `out_grad`.
//
// # Safety
// `n` must point to `m` unit counts; `out_grad` to two writable doubles.
enum FhStatus fh_nerm_adjustment_gradient(const uint64_t *n,
                                          size_t m,
                                          double sigma_v2,
                                          double sigma_e2,
                                          size_t area,
                                          double k_v,
                                          double k_e,
                                          double *out_grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAYHERRIOT_H */
