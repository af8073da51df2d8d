#ifndef RANCTX_H
#define RANCTX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RanctxStatus {
  RANCTX_STATUS_OK = 0,
  RANCTX_STATUS_NULL_POINTER = 1,
  RANCTX_STATUS_INVALID_ARGUMENT = 2,
  RANCTX_STATUS_SHAPE = 3,
  RANCTX_STATUS_MODEL = 4,
  RANCTX_STATUS_IO = 5,
  RANCTX_STATUS_DEGENERATE_CONTEXT = 6,
  RANCTX_STATUS_EMPTY_NEIGHBORHOOD = 7,
  RANCTX_STATUS_NON_FINITE = 8,
  RANCTX_STATUS_PANIC = 9,
  RANCTX_STATUS_OTHER = 10,
} RanctxStatus;

// Outcome of the entropy and historical-error pre-filter.
typedef enum RanctxFilter {
  RANCTX_FILTER_PASSED = 0,
  RANCTX_FILTER_LOW_ENTROPY = 1,
  RANCTX_FILTER_HIGH_HISTORICAL_ERROR = 2,
  RANCTX_FILTER_DEGENERATE_CONTEXT = 3,
} RanctxFilter;

// A trained predictor.
typedef struct RanctxModel RanctxModel;

// One target cell and its `k` neighbors. `T1 = lookback + 1` and
// `L = horizon` come from the model.
typedef struct RanctxSample {
  // `T1` values.
  const double *target_context;
  // `k * T1` values, neighbor-major.
  const double *neighbor_context;
  // `k * L` values, neighbor-major.
  const double *neighbor_prediction;
  // `L` observed target values; only read by [`ranctx_judge`].
  const double *target_prediction;
  // `2 * (k + 1)` attribute indices: antenna (0..8) then band (8..15),
  // target first, then each neighbor.
  const uint32_t *attributes;
} RanctxSample;

// Caller-owned output buffers. Any pointer may be null to skip that output.
typedef struct RanctxPrediction {
  // `L` values.
  double *x_hat;
  // `L` values.
  double *sigma_hat;
  // `k` values.
  double *alpha;
  // `k` values.
  double *sc;
  // `k` values.
  double *sh;
} RanctxPrediction;

typedef struct RanctxDetectorParams {
  double lambda;
  double percentile;
  double gamma;
  double sigma_floor;
  bool entropy_normalized;
} RanctxDetectorParams;

typedef struct RanctxVerdict {
  enum RanctxFilter filter;
  // NaN for a degenerate context.
  double entropy;
  // NaN for a degenerate context.
  double h_err_percentile;
} RanctxVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Description of the last failure on this thread, or null. The string stays
// valid until the next failing call on the same thread.
const char *ranctx_last_error(void);

// Library version as a static NUL-terminated string.
const char *ranctx_version(void);

// Loads a model file. On success `*out` owns a handle to be released with
// [`ranctx_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum RanctxStatus ranctx_model_load(const char *path, struct RanctxModel **out);

// Parses a model from its JSON text.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum RanctxStatus ranctx_model_from_json(const char *json, struct RanctxModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from a load function and not be used afterwards.
void ranctx_model_free(struct RanctxModel *model);

// Window sizes of a model: lookback `T`, horizon `L` and neighbor count `k`.
//
// # Safety
// All pointers must be valid; outputs may be null.
enum RanctxStatus ranctx_model_dims(const struct RanctxModel *model,
                                    size_t *lookback,
                                    size_t *horizon,
                                    size_t *k);

// Predicts the target over the prediction window.
//
// # Safety
// Input arrays must hold the sizes documented on [`RanctxSample`]; non-null
// outputs must hold `L` or `k` values.
enum RanctxStatus ranctx_predict(const struct RanctxModel *model,
                                 const struct RanctxSample *sample,
                                 struct RanctxPrediction out);

// Default detector thresholds.
struct RanctxDetectorParams ranctx_detector_defaults(void);

// Runs the predictor and the pre-filter on one sample and writes the
// anomaly score of each of the `L` hours to `scores` (may be null). Scores
// are written even when the sample is filtered out; they are NaN for a
// degenerate context. `params` may be null for the defaults.
//
// # Safety
// As for [`ranctx_predict`]; `sample->target_prediction` must hold `L`
// values and `verdict` must be valid.
enum RanctxStatus ranctx_judge(const struct RanctxModel *model,
                               const struct RanctxSample *sample,
                               const struct RanctxDetectorParams *params,
                               struct RanctxVerdict *verdict,
                               double *scores);

// Entropy of `k` attention coefficients, divided by `ln k` when
// `normalized`.
//
// # Safety
// `alpha` must hold `k` values and `out` must be valid.
enum RanctxStatus ranctx_attention_entropy(const double *alpha,
                                           size_t k,
                                           bool normalized,
                                           double *out);

// `|x_hat - x| / max(sigma_hat, sigma_floor)` for `len` hours.
//
// # Safety
// Every array must hold `len` values.
enum RanctxStatus ranctx_anomaly_scores(const double *x_hat,
                                        const double *sigma_hat,
                                        const double *x_true,
                                        size_t len,
                                        double sigma_floor,
                                        double *out);

// `ln(1 + v)` for a utilization `v` in percent.
//
// # Safety
// `out` must be valid.
enum RanctxStatus ranctx_log_normalize(double v, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANCTX_H */
