#ifndef SGMC_H
#define SGMC_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgmcStatus {
  SGMC_STATUS_OK = 0,
  SGMC_STATUS_NULL_POINTER = 1,
  /**
   * An argument broke a precondition (index out of range, bad split).
   */
  SGMC_STATUS_INVALID_ARGUMENT = 2,
  SGMC_STATUS_SHAPE = 3,
  SGMC_STATUS_CONFIG = 4,
  SGMC_STATUS_FORMAT = 5,
  SGMC_STATUS_IO = 6,
  /**
   * A zero-norm channel or representation.
   */
  SGMC_STATUS_DEGENERATE = 7,
  SGMC_STATUS_DIVERGENCE = 8,
  /**
   * The output buffer is shorter than the result.
   */
  SGMC_STATUS_BUFFER_TOO_SMALL = 9,
  SGMC_STATUS_PANIC = 10,
} SgmcStatus;

/**
 * A loaded or generated corpus.
 */
typedef struct SgmcCorpus SgmcCorpus;

/**
 * A trained encoder and projector, in eval mode.
 */
typedef struct SgmcModel SgmcModel;

/**
 * Parameters of the synthetic corpus generator.
 */
typedef struct SgmcSyntheticSpec {
  size_t n_clips;
  size_t n_subjects;
  size_t n_channels;
  size_t n_times;
  size_t n_classes;
  size_t latent_dim;
  size_t components;
  double band_start;
  double band_width;
  double band_gap;
  double mixing_scale;
  double offset_scale;
  double background;
  double noise;
  uint64_t seed;
} SgmcSyntheticSpec;

/**
 * Extents of a corpus. `n_classes` is 0 when the corpus has no labels.
 */
typedef struct SgmcCorpusDims {
  size_t n_clips;
  size_t n_subjects;
  size_t n_channels;
  size_t n_times;
  size_t n_classes;
} SgmcCorpusDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator. `buf` may be null to
 * query the length. The message is empty after a successful call.
 */
size_t sgmc_last_error(char *buf, size_t len);

/**
 * The generator defaults.
 */
struct SgmcSyntheticSpec sgmc_synthetic_spec_default(void);

/**
 * Generates a labelled synthetic corpus. The caller owns `*out`.
 */
enum SgmcStatus sgmc_corpus_generate(const struct SgmcSyntheticSpec *spec, struct SgmcCorpus **out);

/**
 * Reads a corpus file and its metadata sidecar. The caller owns `*out`.
 */
enum SgmcStatus sgmc_corpus_read(const char *path, struct SgmcCorpus **out);

enum SgmcStatus sgmc_corpus_write(const struct SgmcCorpus *corpus, const char *path);

enum SgmcStatus sgmc_corpus_dims(const struct SgmcCorpus *corpus, struct SgmcCorpusDims *out);

/**
 * Copies the `[C, M]` window of one clip and subject into `out`.
 */
enum SgmcStatus sgmc_corpus_window(const struct SgmcCorpus *corpus,
                                   size_t clip,
                                   size_t subject,
                                   float *out,
                                   size_t out_len);

enum SgmcStatus sgmc_corpus_label(const struct SgmcCorpus *corpus, size_t clip, uint32_t *out);

/**
 * Releases a corpus. Null is ignored.
 */
void sgmc_corpus_free(struct SgmcCorpus *corpus);

/**
 * Loads a model from a checkpoint file. The caller owns `*out`.
 */
enum SgmcStatus sgmc_model_load(const char *path, struct SgmcModel **out);

/**
 * Width `D` of the encoder representation.
 */
enum SgmcStatus sgmc_model_representation_dim(const struct SgmcModel *model, size_t *out);

/**
 * Width `H` of the group representation.
 */
enum SgmcStatus sgmc_model_output_dim(const struct SgmcModel *model, size_t *out);

/**
 * Encodes `n` windows of `[n_channels, n_times]` stored back to back in
 * `data` into `[n, D]` representations.
 */
enum SgmcStatus sgmc_model_encode(const struct SgmcModel *model,
                                  const float *data,
                                  size_t n,
                                  size_t n_channels,
                                  size_t n_times,
                                  float *out,
                                  size_t out_len);

/**
 * Projects `q` member representations `[q, D]` to one group vector `[H]`.
 */
enum SgmcStatus sgmc_model_project_group(const struct SgmcModel *model,
                                         const float *reps,
                                         size_t q,
                                         float *out,
                                         size_t out_len);

/**
 * Releases a model. Null is ignored.
 */
void sgmc_model_free(struct SgmcModel *model);

/**
 * Group NT-Xent loss for `[p, h]` representations of the A and B sides.
 */
enum SgmcStatus sgmc_group_ntxent_loss(const double *za,
                                       const double *zb,
                                       size_t p,
                                       size_t h,
                                       double temperature,
                                       double *out);

/**
 * Swaps the first `split` time points of two `[n_channels, n_times]`
 * windows. `out_a` receives `b[..split]` then `a[split..]` per channel and
 * `out_b` the complement.
 */
enum SgmcStatus sgmc_crossover(const float *a,
                               const float *b,
                               size_t n_channels,
                               size_t n_times,
                               size_t split,
                               float *out_a,
                               float *out_b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SGMC_H */
