#ifndef RCMD_H
#define RCMD_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Transport method selector.
 */
typedef enum RcmdMethod {
  RCMD_METHOD_AVG = 0,
  RCMD_METHOD_RCMD1 = 1,
  RCMD_METHOD_RCMD2 = 2,
  RCMD_METHOD_RCMD = 3,
  RCMD_METHOD_EXACT = 4,
} RcmdMethod;

/**
 * Status codes returned by every fallible function.
 */
typedef enum RcmdStatus {
  RCMD_STATUS_OK = 0,
  RCMD_STATUS_NULL_POINTER = 1,
  RCMD_STATUS_INVALID_UTF8 = 2,
  RCMD_STATUS_IO = 3,
  RCMD_STATUS_PARSE = 4,
  /**
   * Embedding data failed validation: shape, zero rows, non-finite values.
   */
  RCMD_STATUS_INVALID_DATA = 5,
  RCMD_STATUS_NOT_FOUND = 6,
  /**
   * The exact solver refused a problem above its size limit.
   */
  RCMD_STATUS_SCALE_EXCEEDED = 7,
  /**
   * Solver or numeric failure.
   */
  RCMD_STATUS_NUMERIC = 8,
  RCMD_STATUS_INVALID_ARGUMENT = 9,
  RCMD_STATUS_BUFFER_TOO_SMALL = 10,
  RCMD_STATUS_PANIC = 11,
} RcmdStatus;

/**
 * A set of sentences keyed by id.
 */
typedef struct RcmdCorpus RcmdCorpus;

/**
 * One sentence: an `L x D` matrix of token vectors.
 */
typedef struct RcmdMatrix RcmdMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null if none. Valid until
 * the next failing call on the same thread.
 */
const char *rcmd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rcmd_version(void);

/**
 * Load a corpus; `.jsonl`/`.json` paths are read as JSON lines, anything
 * else as the binary format.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RcmdStatus rcmd_corpus_load(const char *path, struct RcmdCorpus **out);

/**
 * # Safety
 * `corpus` must come from [`rcmd_corpus_load`] and not be freed twice. Null is ignored.
 */
void rcmd_corpus_free(struct RcmdCorpus *corpus);

/**
 * Number of sentences, or 0 for a null handle.
 *
 * # Safety
 * `corpus` must be null or a live handle.
 */
size_t rcmd_corpus_len(const struct RcmdCorpus *corpus);

/**
 * Copy sentence `id` out of a corpus into a new matrix handle.
 *
 * # Safety
 * `corpus` must be a live handle, `id` NUL-terminated, `out` valid.
 */
enum RcmdStatus rcmd_corpus_get(const struct RcmdCorpus *corpus,
                                const char *id,
                                struct RcmdMatrix **out);

/**
 * Build a matrix from `len * dim` row-major values.
 *
 * # Safety
 * `id` must be NUL-terminated; `data` must point to `len * dim` doubles.
 */
enum RcmdStatus rcmd_matrix_new(const char *id,
                                const double *data,
                                size_t len,
                                size_t dim,
                                struct RcmdMatrix **out);

/**
 * # Safety
 * `m` must come from this library and not be freed twice. Null is ignored.
 */
void rcmd_matrix_free(struct RcmdMatrix *m);

/**
 * Token count, or 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t rcmd_matrix_len(const struct RcmdMatrix *m);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
size_t rcmd_matrix_dim(const struct RcmdMatrix *m);

/**
 * Sentence similarity; `method` is an [`RcmdMethod`] value. For
 * [`RcmdMethod::Exact`] this is `1 - d_EMD`.
 *
 * # Safety
 * `a` and `b` must be live handles and `out` valid.
 */
enum RcmdStatus rcmd_similarity(const struct RcmdMatrix *a,
                                const struct RcmdMatrix *b,
                                uint32_t method,
                                double *out);

/**
 * Transport distance; `method` is an [`RcmdMethod`] value.
 *
 * # Safety
 * `a` and `b` must be live handles and `out` valid.
 */
enum RcmdStatus rcmd_distance(const struct RcmdMatrix *a,
                              const struct RcmdMatrix *b,
                              uint32_t method,
                              double *out);

/**
 * Write the `L1 x L2` token contribution matrix row-major into `buf`.
 * `written` receives `L1 * L2`; when `cap` is smaller nothing is written and
 * [`RcmdStatus::BufferTooSmall`] is returned, so callers can size a buffer.
 *
 * # Safety
 * `a`, `b` must be live handles, `buf` must hold `cap` doubles (may be null
 * when `cap` is 0), `written` must be valid.
 */
enum RcmdStatus rcmd_contributions(const struct RcmdMatrix *a,
                                   const struct RcmdMatrix *b,
                                   uint32_t method,
                                   double *buf,
                                   size_t cap,
                                   size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RCMD_H */
