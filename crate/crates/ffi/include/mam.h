#ifndef MAM_H
#define MAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum MamStatus {
  MAM_STATUS_OK = 0,
  MAM_STATUS_NULL_POINTER = 1,
  MAM_STATUS_INVALID_INPUT = 2,
  MAM_STATUS_NUMERICAL = 3,
  MAM_STATUS_IO = 4,
  MAM_STATUS_PANIC = 5,
} MamStatus;

// Opaque handle to a fitted marginal additive model.
typedef struct MamFit MamFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failure on this thread; empty if none. The pointer
// stays valid until the next failing call on the same thread.
const char *mam_last_error(void);

// Library version as a static NUL-terminated string.
const char *mam_version(void);

// Fits a model from a CSV data file and a JSON model configuration.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be writable.
enum MamStatus mam_fit_new(const char *data_path, const char *config_path, struct MamFit **out);

// Loads a fit from the JSON artifact written by `mam fit`.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum MamStatus mam_fit_from_json(const char *json, struct MamFit **out);

// Releases a fit handle. Null is ignored.
//
// # Safety
// `fit` must come from this library and not be used afterwards.
void mam_fit_free(struct MamFit *fit);

// Serializes the fit as JSON into a newly allocated string.
//
// # Safety
// `fit` must be a live handle; `out` must be writable.
enum MamStatus mam_fit_summary_json(const struct MamFit *fit, char **out);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be used afterwards.
void mam_string_free(char *s);

// Number of reportable terms (linear terms first, then smooths).
//
// # Safety
// `fit` must be a live handle; `out` must be writable.
enum MamStatus mam_fit_n_terms(const struct MamFit *fit, size_t *out);

// Number of covariates expected per row by `mam_fit_marginalize`.
//
// # Safety
// `fit` must be a live handle; `out` must be writable.
enum MamStatus mam_fit_n_covariates(const struct MamFit *fit, size_t *out);

// Marginal curve of term `term` at `n` grid values: estimates and standard
// errors including the variance-component correction.
//
// # Safety
// `grid`, `estimate` and `se` must each hold `n` doubles.
enum MamStatus mam_fit_marginal_curve(const struct MamFit *fit,
                                      size_t term,
                                      const double *grid,
                                      size_t n,
                                      double *estimate,
                                      double *se);

// Pseudo-outcomes and marginal predictions at `n` covariate rows given
// row-major in `rows` (`n` x `p`, `p` = `mam_fit_n_covariates`).
//
// # Safety
// `rows` must hold `n * p` doubles; each output must hold `n` doubles.
enum MamStatus mam_fit_marginalize(const struct MamFit *fit,
                                   const double *rows,
                                   size_t n,
                                   size_t p,
                                   double *lambda_hat,
                                   double *estimate,
                                   double *se);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAM_H */
