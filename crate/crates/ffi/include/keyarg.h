#ifndef KEYARG_H
#define KEYARG_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KeyargStatus {
  KEYARG_STATUS_OK = 0,
  KEYARG_STATUS_NULL_POINTER = 1,
  KEYARG_STATUS_INVALID_ARGUMENT = 2,
  KEYARG_STATUS_NOT_FOUND = 3,
  KEYARG_STATUS_CONFLICT = 4,
  KEYARG_STATUS_PANIC = 5,
} KeyargStatus;

typedef enum KeyargLabel {
  KEYARG_LABEL_UNLABELED = 0,
  KEYARG_LABEL_SIMILAR = 1,
  KEYARG_LABEL_DISSIMILAR = 2,
} KeyargLabel;

/**
 * Opaque consolidation state. Pairs are addressed by their input index.
 */
typedef struct KeyargScheduler KeyargScheduler;

typedef struct KeyargStats {
  size_t total_pairs;
  size_t human_queries;
  size_t propagated;
  double delta;
  double tau;
} KeyargStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *keyarg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *keyarg_version(void);

/**
 * # Safety
 * `u` and `v` must each point to `len` readable doubles; `out` must be writable.
 */
enum KeyargStatus keyarg_cosine_similarity(const double *u,
                                           const double *v,
                                           size_t len,
                                           double *out);

/**
 * Topic similarity 1 / (1 + d) of two topic count vectors.
 *
 * # Safety
 * `a` and `b` must each point to `len` readable counts; `out` must be writable.
 */
enum KeyargStatus keyarg_topic_similarity(const uint32_t *a,
                                          const uint32_t *b,
                                          size_t len,
                                          double *out);

/**
 * # Safety
 * Both strings must be NUL-terminated UTF-8; `out` must be writable.
 */
enum KeyargStatus keyarg_overlap_ratio(const char *opinion, const char *argument, double *out);

/**
 * PABAK over an `items` x `raters` row-major matrix of 0/1 votes.
 *
 * # Safety
 * `votes` must point to `items * raters` readable bytes; `out` must be writable.
 */
enum KeyargStatus keyarg_pabak(const uint8_t *votes, size_t items, size_t raters, double *out);

/**
 * ICC(3,k) over an `items` x `raters` row-major matrix.
 *
 * # Safety
 * `matrix` must point to `items * raters` readable doubles; `out` must be writable.
 */
enum KeyargStatus keyarg_icc3k(const double *matrix, size_t items, size_t raters, double *out);

/**
 * Holm-adjusted p-values, written to `out` in input order.
 *
 * # Safety
 * `p` must point to `len` readable doubles and `out` to `len` writable ones.
 */
enum KeyargStatus keyarg_holm(const double *p, size_t len, double *out);

/**
 * Builds a scheduler over `len` pairs with scores `s1[k]`, `s2[k]`.
 *
 * # Safety
 * `s1` and `s2` must point to `len` readable doubles; `out` must be writable.
 * Free the handle with [`keyarg_scheduler_free`].
 */
enum KeyargStatus keyarg_scheduler_new(const double *s1,
                                       const double *s2,
                                       size_t len,
                                       struct KeyargScheduler **out);

/**
 * # Safety
 * `handle` must come from [`keyarg_scheduler_new`] and not be used afterwards.
 */
void keyarg_scheduler_free(struct KeyargScheduler *handle);

/**
 * Writes up to `cap` pair indices awaiting a human query, one per active
 * path, and their count to `out_len`. A count of 0 means labeling is done.
 *
 * # Safety
 * `handle` must be live; `out` must have room for `cap` indices.
 */
enum KeyargStatus keyarg_scheduler_pending(struct KeyargScheduler *handle_ptr,
                                           size_t *out,
                                           size_t cap,
                                           size_t *out_len);

/**
 * Records the votes for pair `index` and writes its majority label.
 *
 * # Safety
 * `handle` must be live; `votes` must point to `n_votes` readable bytes.
 */
enum KeyargStatus keyarg_scheduler_submit(struct KeyargScheduler *handle_ptr,
                                          size_t index,
                                          const uint8_t *votes,
                                          size_t n_votes,
                                          enum KeyargLabel *out_label);

/**
 * # Safety
 * `handle` must be live; `out` must be writable.
 */
enum KeyargStatus keyarg_scheduler_label(struct KeyargScheduler *handle_ptr,
                                         size_t index,
                                         enum KeyargLabel *out);

/**
 * # Safety
 * `handle` must be live; `out` must be writable.
 */
enum KeyargStatus keyarg_scheduler_stats(struct KeyargScheduler *handle_ptr,
                                         struct KeyargStats *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KEYARG_H */
