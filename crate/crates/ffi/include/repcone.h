#ifndef REPCONE_H
#define REPCONE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a call. Zero is success; the rest mirror the library's error
// categories.
typedef enum RcStatus {
  RC_STATUS_OK = 0,
  RC_STATUS_NULL_ARGUMENT = 1,
  RC_STATUS_INVALID_UTF8 = 2,
  RC_STATUS_FORMAT = 3,
  RC_STATUS_CORRUPTION = 4,
  RC_STATUS_VALIDATION = 5,
  RC_STATUS_MISSING_LABELS = 6,
  RC_STATUS_EMPTY_SET = 7,
  RC_STATUS_DIMENSION = 8,
  RC_STATUS_UNDEFINED_CORRELATION = 9,
  RC_STATUS_NON_FINITE = 10,
  RC_STATUS_SPEC = 11,
  RC_STATUS_MISSING_FILE = 12,
  RC_STATUS_IO = 13,
  RC_STATUS_JSON = 14,
  RC_STATUS_PANIC = 15,
} RcStatus;

// A fitted class cone.
typedef struct RcCone RcCone;

// A loaded embedding set.
typedef struct RcEmbeddings RcEmbeddings;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none failed.
// The pointer stays valid until the next failing call on the same thread.
const char *rc_last_error_message(void);

// Reads an EMBV1 file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum RcStatus rc_embeddings_load(const char *path, struct RcEmbeddings **out);

// Builds a set from `rows × dim` row-major values. `labels` may be null
// for an unlabeled set; otherwise it holds `rows` entries.
//
// # Safety
// `data` must hold `rows * dim` values, `labels` (if not null) `rows`
// values, and `out` must be writable.
enum RcStatus rc_embeddings_from_rows(const double *data,
                                      size_t rows,
                                      size_t dim,
                                      const uint32_t *labels,
                                      struct RcEmbeddings **out);

// # Safety
// `set` must come from this library and not be freed twice. Null is a no-op.
void rc_embeddings_free(struct RcEmbeddings *set);

// Row count, or 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
size_t rc_embeddings_len(const struct RcEmbeddings *set);

// Vector dimension, or 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
size_t rc_embeddings_dim(const struct RcEmbeddings *set);

// Fits the cone of `class_id` covering a `coverage` fraction of its rows.
//
// # Safety
// `set` must be a live handle and `out` writable.
enum RcStatus rc_fit_cone(const struct RcEmbeddings *set,
                          uint32_t class_id,
                          double coverage,
                          struct RcCone **out);

// # Safety
// `cone` must come from this library and not be freed twice. Null is a no-op.
void rc_cone_free(struct RcCone *cone);

// Axis dimension, or 0 for a null handle.
//
// # Safety
// `cone` must be null or a live handle.
size_t rc_cone_dim(const struct RcCone *cone);

// Copies the unit axis into `out`, which holds `len` values.
//
// # Safety
// `cone` must be a live handle and `out` must hold `len` values.
enum RcStatus rc_cone_axis(const struct RcCone *cone, double *out, size_t len);

// Cosine of the cone's half-angle, or NaN for a null handle.
//
// # Safety
// `cone` must be null or a live handle.
double rc_cone_aperture(const struct RcCone *cone);

// Rows inside the fitted cone, or 0 for a null handle.
//
// # Safety
// `cone` must be null or a live handle.
size_t rc_cone_kept_count(const struct RcCone *cone);

// Cosine between `v` and the cone axis.
//
// # Safety
// `v` must hold `len` values, `cone` must be live and `out` writable.
enum RcStatus rc_relative_position(const double *v,
                                   size_t len,
                                   const struct RcCone *cone,
                                   double *out);

// Pearson correlation of two length-`n` series.
//
// # Safety
// `x` and `y` must hold `n` values and `out` must be writable.
enum RcStatus rc_pearson(const double *x, const double *y, size_t n, double *out);

// Topological-order coefficient of one class. `before` and `after` are
// row-aligned `rows × dim` row-major matrices; `axis` has `dim` values.
//
// # Safety
// Buffers must hold the stated number of values and `out` be writable.
enum RcStatus rc_topo_pearson(const double *before,
                              const double *after,
                              size_t rows,
                              size_t dim,
                              const double *axis,
                              size_t n,
                              double *out);

// Examples replayed per event for replay interval `interval` and rate
// `rate`. An interval of 0 means no replay and yields 0.
//
// # Safety
// `out` must be writable.
enum RcStatus rc_replay_quota(uint64_t interval, double rate, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPCONE_H */
