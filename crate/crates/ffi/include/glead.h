/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef GLEAD_H
#define GLEAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GleadStatus {
  GLEAD_STATUS_OK = 0,
  GLEAD_STATUS_NULL_POINTER = 1,
  GLEAD_STATUS_INVALID_ARGUMENT = 2,
  GLEAD_STATUS_CONFIG = 3,
  GLEAD_STATUS_IO = 4,
  GLEAD_STATUS_FORMAT = 5,
  GLEAD_STATUS_DATASET = 6,
  GLEAD_STATUS_NUMERICAL = 7,
  GLEAD_STATUS_DIVERGED = 8,
  GLEAD_STATUS_BUFFER_TOO_SMALL = 9,
  GLEAD_STATUS_PANIC = 10,
} GleadStatus;

// A run configuration.
typedef struct GleadConfig GleadConfig;

// Networks restored from a checkpoint.
typedef struct GleadModel GleadModel;

// A training session kept in memory.
typedef struct GleadTrainer GleadTrainer;

// Scalars of one training iteration.
typedef struct GleadStepStats {
  uint64_t images_shown;
  double score_real;
  double score_fake;
  double loss_g;
  double loss_d;
  double rec_real;
  double rec_fake;
  bool r1_applied;
} GleadStepStats;

// Outcome of [`glead_train_run`]. Metric fields are NaN when the run was
// not evaluated.
typedef struct GleadRunSummary {
  uint64_t images_shown;
  bool finished;
  bool diverged;
  double fid;
  double precision;
  double recall;
  double reconstruction;
} GleadRunSummary;

typedef struct GleadModelInfo {
  size_t resolution;
  size_t z_dim;
  size_t w_dim;
  // Decoder resolution, 0 when the decoder only predicts `w`.
  size_t f_resolution;
  bool has_decoder;
  uint64_t images_shown;
} GleadModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *glead_version(void);

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call into this library from the
// same thread.
const char *glead_last_error(void);

// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum GleadStatus glead_config_default(struct GleadConfig **out);

// Parse `key = value` lines; unknown or invalid settings are errors.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a valid pointer.
enum GleadStatus glead_config_parse(const char *text, struct GleadConfig **out);

// Change one setting. The whole configuration is validated when a
// trainer is created.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be
// NUL-terminated strings.
enum GleadStatus glead_config_set(struct GleadConfig *cfg, const char *key, const char *value);

// Write the configuration as text into `buf` (NUL-terminated). `*needed`
// receives the required size including the terminator; pass a NULL
// `buf` to query it.
//
// # Safety
// `buf` must be NULL or point to `len` writable bytes; `needed` must be
// NULL or valid.
enum GleadStatus glead_config_to_text(const struct GleadConfig *cfg,
                                      char *buf,
                                      size_t len,
                                      size_t *needed);

// # Safety
// `cfg` must be NULL or a handle from this library not yet freed.
void glead_config_free(struct GleadConfig *cfg);

// Build networks, optimizers and the dataset for a fresh run.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum GleadStatus glead_trainer_new(const struct GleadConfig *cfg, struct GleadTrainer **out);

// One generator update followed by one discriminator update.
//
// # Safety
// `t` must be a live handle; `stats` must be NULL or valid.
enum GleadStatus glead_trainer_step(struct GleadTrainer *t, struct GleadStepStats *stats);

// # Safety
// `t` must be NULL or a live handle.
uint64_t glead_trainer_images_shown(const struct GleadTrainer *t);

// Save the full training state; [`glead_trainer_resume`] continues it.
//
// # Safety
// `t` must be a live handle and `path` a NUL-terminated string.
enum GleadStatus glead_trainer_save(const struct GleadTrainer *t, const char *path);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GleadStatus glead_trainer_resume(const char *path, struct GleadTrainer **out);

// # Safety
// `t` must be NULL or a handle from this library not yet freed.
void glead_trainer_free(struct GleadTrainer *t);

// Train into `out_dir` with logs, evaluations and checkpoints, resuming
// from the newest checkpoint there if `resume` is set. `max_iterations`
// of 0 means no limit. A diverged run returns `GLEAD_STATUS_OK` with
// `diverged` set.
//
// # Safety
// `cfg` must be a live handle, `out_dir` a NUL-terminated string and
// `summary` NULL or valid.
enum GleadStatus glead_train_run(const struct GleadConfig *cfg,
                                 const char *out_dir,
                                 bool resume,
                                 uint64_t max_iterations,
                                 bool skip_eval,
                                 struct GleadRunSummary *summary);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GleadStatus glead_model_load(const char *path, struct GleadModel **out);

// # Safety
// `m` must be a live handle and `info` a valid pointer.
enum GleadStatus glead_model_info(const struct GleadModel *m, struct GleadModelInfo *info);

// Generate `n` images with the averaged generator. The same `seed` gives
// the same images as the training sample grids.
//
// # Safety
// `m` must be a live handle; `out` must hold `out_len` floats.
enum GleadStatus glead_model_generate(const struct GleadModel *m,
                                      uint64_t seed,
                                      size_t n,
                                      float *out,
                                      size_t out_len);

// Discriminator logits for `n` images, one per image.
//
// # Safety
// `m` must be a live handle, `images` must hold `n * 3 * R * R` floats
// and `out` must hold `out_len` floats.
enum GleadStatus glead_model_score(const struct GleadModel *m,
                                   const float *images,
                                   size_t n,
                                   float *out,
                                   size_t out_len);

// Reconstruct images through the discriminator's decoder and the frozen
// generator.
//
// # Safety
// `m` must be a live handle, `images` must hold `n * 3 * R * R` floats
// and `out` must hold `out_len` floats.
enum GleadStatus glead_model_reconstruct(const struct GleadModel *m,
                                         const float *images,
                                         size_t n,
                                         float *out,
                                         size_t out_len);

// # Safety
// `m` must be NULL or a handle from this library not yet freed.
void glead_model_free(struct GleadModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLEAD_H */
