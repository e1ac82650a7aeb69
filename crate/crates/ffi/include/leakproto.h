#ifndef LEAKPROTO_H
#define LEAKPROTO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of values in one latent (4 × 32 × 32, channel-major).
 */
#define LP_LATENT_LEN 4096

typedef enum LpStatus {
  LP_OK = 0,
  LP_ERR_NULL = 1,
  LP_ERR_CONFIG = 2,
  LP_ERR_DATA = 3,
  LP_ERR_NUMERIC = 4,
  LP_ERR_IO = 5,
  LP_ERR_PANIC = 6,
} LpStatus;

/**
 * Gaussian KDE over a fixed support set.
 */
typedef struct LpKde LpKde;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct LpModel LpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *lp_last_error(void);

/**
 * Cosine-schedule coefficients at integer step `t` of `total_steps`
 * (other schedule parameters at their defaults).
 *
 * # Safety
 * `alpha` and `sigma` must be valid for writes.
 */
enum LpStatus lp_alpha_sigma(size_t t, size_t total_steps, double *alpha, double *sigma);

/**
 * Loads the best model from a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum LpStatus lp_model_load(const char *path, struct LpModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`lp_model_load`] not yet freed.
 */
void lp_model_free(struct LpModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t lp_model_embed_dim(const struct LpModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t lp_model_num_classes(const struct LpModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t lp_model_num_steps(const struct LpModel *model);

/**
 * Frozen embedding of one VAE-scaled latent. With `attention` the embedding is
 * attention-pooled and gated; otherwise it is the plain mean over timesteps.
 * `out` receives [`lp_model_embed_dim`] values.
 *
 * # Safety
 * `latent` must hold `len` values and `out` must hold `out_len` values.
 */
enum LpStatus lp_model_embed(const struct LpModel *model,
                             const double *latent,
                             size_t len,
                             uint64_t noise_seed,
                             bool attention,
                             double *out,
                             size_t out_len);

/**
 * Class posteriors and temporal attention weights for one latent; writes the
 * argmax class to `predicted`. `attn` may be null.
 *
 * # Safety
 * `posteriors` must hold `num_classes` values, `attn` (if non-null) `num_steps`.
 */
enum LpStatus lp_model_attribute(const struct LpModel *model,
                                 const double *latent,
                                 size_t len,
                                 uint64_t noise_seed,
                                 double *posteriors,
                                 size_t num_classes,
                                 double *attn,
                                 size_t num_steps,
                                 size_t *predicted);

/**
 * Fits a KDE on `n` row-major support vectors of width `dim`. A non-positive
 * `bandwidth` selects Scott's rule.
 *
 * # Safety
 * `support` must hold `n·dim` values; `out` must be valid for writes.
 */
enum LpStatus lp_kde_fit(const double *support,
                         size_t n,
                         size_t dim,
                         double bandwidth,
                         struct LpKde **out);

/**
 * # Safety
 * `kde` must be null or a handle from [`lp_kde_fit`] not yet freed.
 */
void lp_kde_free(struct LpKde *kde);

/**
 * # Safety
 * `kde` must be a live handle.
 */
double lp_kde_bandwidth(const struct LpKde *kde);

/**
 * Log-density of one query vector.
 *
 * # Safety
 * `query` must hold `dim` values; `out` must be valid for writes.
 */
enum LpStatus lp_kde_score(const struct LpKde *kde, const double *query, size_t dim, double *out);

/**
 * ROC AUC of `pos` (higher is positive) against `neg`; ties count one half.
 *
 * # Safety
 * Arrays must hold the given counts; `out` must be valid for writes.
 */
enum LpStatus lp_roc_auc(const double *pos,
                         size_t npos,
                         const double *neg,
                         size_t nneg,
                         double *out);

/**
 * Equal error rate of closed (accepted above threshold) against open scores.
 * `threshold` may be null.
 *
 * # Safety
 * Arrays must hold the given counts; `eer` must be valid for writes.
 */
enum LpStatus lp_eer(const double *closed,
                     size_t nclosed,
                     const double *open,
                     size_t nopen,
                     double *eer,
                     double *threshold);

/**
 * Histogram overlap of the two score groups on `bins` shared bins.
 *
 * # Safety
 * Arrays must hold the given counts; `out` must be valid for writes.
 */
enum LpStatus lp_ovl(const double *closed,
                     size_t nclosed,
                     const double *open,
                     size_t nopen,
                     size_t bins,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEAKPROTO_H */
