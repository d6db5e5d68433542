#ifndef CONFORMAL_KIT_H
#define CONFORMAL_KIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CkStatus {
  CK_STATUS_OK = 0,
  CK_STATUS_NULL_POINTER = 1,
  CK_STATUS_INVALID_ARGUMENT = 2,
  CK_STATUS_INVALID_ALPHA = 3,
  CK_STATUS_INVALID_PROBABILITIES = 4,
  CK_STATUS_INVALID_LABEL = 5,
  CK_STATUS_SHAPE_MISMATCH = 6,
  CK_STATUS_INSUFFICIENT_DATA = 7,
  CK_STATUS_PARSE = 8,
  CK_STATUS_PANIC = 9,
} CkStatus;

typedef enum CkKind {
  CK_KIND_NAIVE = 0,
  CK_KIND_COVARIATE = 1,
  CK_KIND_KMEANS = 2,
  CK_KIND_NCP = 3,
} CkKind;

/**
 * Opaque fitted calibrator.
 */
typedef struct CkCalibrator CkCalibrator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next library call on this thread.
 */
const char *ck_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ck_version(void);

/**
 * Hinge score `1 - probs[label]`.
 *
 * # Safety
 * `probs` must point to `n_classes` doubles; `out` must be writable.
 */
enum CkStatus ck_nonconformity_score(const double *probs,
                                     size_t n_classes,
                                     size_t label,
                                     double *out);

/**
 * The `ceil((n + 1)(1 - alpha))`-th smallest score, or infinite when that
 * rank exceeds `n`.
 *
 * # Safety
 * `scores` must point to `n` doubles; the outputs must be writable.
 */
enum CkStatus ck_conformal_quantile(const double *scores,
                                    size_t n,
                                    double alpha,
                                    double *out_threshold,
                                    bool *out_infinite);

/**
 * Smallest score whose normalized cumulative weight reaches `1 - alpha`.
 *
 * # Safety
 * `scores` and `weights` must point to `n` doubles; the outputs must be writable.
 */
enum CkStatus ck_weighted_quantile(const double *scores,
                                   const double *weights,
                                   size_t n,
                                   double alpha,
                                   double *out_threshold,
                                   bool *out_infinite);

/**
 * Split conformal calibrator with the `(n + 1)`-corrected quantile.
 *
 * # Safety
 * `probs` must point to `n * n_classes` doubles and `labels` to `n` labels.
 */
enum CkStatus ck_calibrator_fit_naive(const double *probs,
                                      const size_t *labels,
                                      size_t n,
                                      size_t n_classes,
                                      double alpha,
                                      struct CkCalibrator **out);

/**
 * Per-cluster calibrator over k-means clusters of the embeddings. `k = 0`
 * picks the number of clusters from `n`.
 *
 * # Safety
 * Array sizes as in [`ck_calibrator_fit_naive`], plus `n * dim` embedding values.
 */
enum CkStatus ck_calibrator_fit_kmeans(const double *probs,
                                       const size_t *labels,
                                       const double *embeddings,
                                       size_t n,
                                       size_t n_classes,
                                       size_t dim,
                                       double alpha,
                                       size_t k,
                                       uint64_t seed,
                                       struct CkCalibrator **out);

/**
 * Neighborhood calibrator with uniform weights over the `k` nearest embeddings.
 *
 * # Safety
 * As for [`ck_calibrator_fit_kmeans`].
 */
enum CkStatus ck_calibrator_fit_ncp(const double *probs,
                                    const size_t *labels,
                                    const double *embeddings,
                                    size_t n,
                                    size_t n_classes,
                                    size_t dim,
                                    double alpha,
                                    size_t k,
                                    struct CkCalibrator **out);

/**
 * Weighted calibrator with KDE density ratios between the calibration and
 * `n_test` unlabeled test embeddings. `bandwidth` is 0 for Scott's rule, 1 for
 * Silverman's; ratios are clipped to `[1 / clip, clip]`.
 *
 * # Safety
 * As for [`ck_calibrator_fit_kmeans`], plus `n_test * dim` test embedding values.
 */
enum CkStatus ck_calibrator_fit_covariate(const double *probs,
                                          const size_t *labels,
                                          const double *embeddings,
                                          size_t n,
                                          size_t n_classes,
                                          size_t dim,
                                          const double *test_embeddings,
                                          size_t n_test,
                                          double alpha,
                                          uint32_t bandwidth,
                                          double clip,
                                          struct CkCalibrator **out);

/**
 * Parses a calibrator serialized by [`ck_calibrator_to_json`] or written by
 * the `calibrate` stage of the command-line pipeline.
 *
 * # Safety
 * `json` must be a NUL-terminated string.
 */
enum CkStatus ck_calibrator_from_json(const char *json, struct CkCalibrator **out);

/**
 * Serializes a calibrator; release the string with [`ck_string_free`].
 *
 * # Safety
 * `calibrator` must be a live handle; `out` must be writable.
 */
enum CkStatus ck_calibrator_to_json(const struct CkCalibrator *calibrator, char **out);

/**
 * A new handle with the same scores and locality, re-thresholded at `alpha`.
 *
 * # Safety
 * `calibrator` must be a live handle; `out` must be writable.
 */
enum CkStatus ck_calibrator_with_alpha(const struct CkCalibrator *calibrator,
                                       double alpha,
                                       struct CkCalibrator **out);

/**
 * # Safety
 * `calibrator` must be a live handle; `out` must be writable.
 */
enum CkStatus ck_calibrator_kind(const struct CkCalibrator *calibrator, enum CkKind *out);

/**
 * # Safety
 * `calibrator` must be a live handle; the outputs must be writable.
 */
enum CkStatus ck_calibrator_info(const struct CkCalibrator *calibrator,
                                 double *out_alpha,
                                 size_t *out_n_classes,
                                 size_t *out_n_cal);

/**
 * Prediction set for one query. `mask` receives `n_classes` bytes, 1 for
 * labels in the set. `embedding` may be null when `dim` is 0 and the
 * calibrator does not use embeddings.
 *
 * # Safety
 * `probs` must point to `n_classes` doubles, `embedding` to `dim` doubles,
 * `mask` to `n_classes` writable bytes; the other outputs must be writable.
 */
enum CkStatus ck_calibrator_predict(const struct CkCalibrator *calibrator,
                                    const double *probs,
                                    size_t n_classes,
                                    const double *embedding,
                                    size_t dim,
                                    uint8_t *mask,
                                    double *out_threshold,
                                    bool *out_infinite);

/**
 * Releases a calibrator. Null is ignored.
 *
 * # Safety
 * `calibrator` must be null or a handle not yet freed.
 */
void ck_calibrator_free(struct CkCalibrator *calibrator);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void ck_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFORMAL_KIT_H */
