#ifndef VESDN_H
#define VESDN_H

#include <stddef.h>
#include <stdint.h>

// Result codes. Values 1 to 3 match the command-line exit codes.
typedef enum VesdnStatus {
  VESDN_STATUS_OK = 0,
  VESDN_STATUS_CONFIG = 1,
  VESDN_STATUS_DATA = 2,
  VESDN_STATUS_NUMERICAL = 3,
  VESDN_STATUS_NULL_POINTER = 4,
  VESDN_STATUS_BUFFER_SIZE = 5,
  VESDN_STATUS_PANIC = 6,
} VesdnStatus;

// A trained model (full training state).
typedef struct VesdnModel VesdnModel;

// A paired feature pack.
typedef struct VesdnPack VesdnPack;

typedef struct VesdnSynthParams {
  size_t k_seen;
  size_t k_unseen;
  size_t n_per_class;
  size_t d_sem;
  size_t d_dom;
  size_t d_v;
  size_t d_b;
  double noise_sigma;
  uint64_t seed;
} VesdnSynthParams;

typedef struct VesdnPackShape {
  size_t rows;
  size_t num_classes;
  size_t num_unseen;
  size_t visual_dim;
  size_t neural_dim;
} VesdnPackShape;

typedef struct VesdnModelDims {
  size_t visual_dim;
  size_t neural_dim;
  size_t semantic_dim;
  size_t num_classes;
} VesdnModelDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vesdn_version(void);

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next library call on the same thread.
const char *vesdn_last_error(void);

struct VesdnSynthParams vesdn_synth_params_default(void);

// # Safety
// `params` must point to a valid struct and `out` to writable storage.
enum VesdnStatus vesdn_pack_synth(const struct VesdnSynthParams *params, struct VesdnPack **out);

// # Safety
// `dir` must be a NUL-terminated path and `out` writable.
enum VesdnStatus vesdn_pack_load(const char *dir, struct VesdnPack **out);

// # Safety
// `pack` must come from this library; `dir` must be a NUL-terminated path.
enum VesdnStatus vesdn_pack_save(const struct VesdnPack *pack, const char *dir);

// # Safety
// `pack` must come from this library and `out` be writable.
enum VesdnStatus vesdn_pack_shape(const struct VesdnPack *pack, struct VesdnPackShape *out);

// # Safety
// `pack` must be NULL or a handle from this library not yet freed.
void vesdn_pack_free(struct VesdnPack *pack);

// Trains on the seen classes of `pack`. `config_json` holds training
// options (missing keys take defaults) and may be NULL. When
// `checkpoint_dir` is non-NULL the latest state is written there after
// every epoch.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum VesdnStatus vesdn_model_train(const struct VesdnPack *pack,
                                   const char *config_json,
                                   const char *checkpoint_dir,
                                   struct VesdnModel **out);

// # Safety
// `dir` must be a NUL-terminated path and `out` writable.
enum VesdnStatus vesdn_model_load(const char *dir, struct VesdnModel **out);

// # Safety
// `model` must come from this library; `dir` must be a NUL-terminated path.
enum VesdnStatus vesdn_model_save(const struct VesdnModel *model, const char *dir);

// # Safety
// `model` must come from this library and `out` be writable.
enum VesdnStatus vesdn_model_dims(const struct VesdnModel *model, struct VesdnModelDims *out);

// # Safety
// `model` must be NULL or a handle from this library not yet freed.
void vesdn_model_free(struct VesdnModel *model);

// Semantic features of `n` visual rows (row-major `n × dim`) into `out`
// (`n × semantic_dim`).
//
// # Safety
// Buffers must hold the stated number of elements.
enum VesdnStatus vesdn_encode_visual(const struct VesdnModel *model,
                                     const float *rows,
                                     size_t n,
                                     size_t dim,
                                     float *out,
                                     size_t out_len);

// Semantic features of `n` neural rows into `out` (`n × semantic_dim`).
//
// # Safety
// Buffers must hold the stated number of elements.
enum VesdnStatus vesdn_encode_neural(const struct VesdnModel *model,
                                     const float *rows,
                                     size_t n,
                                     size_t dim,
                                     float *out,
                                     size_t out_len);

// Zero-shot classification of `n` neural rows against `u` visual template
// rows labelled by `class_ids`. Writes one class id per row to
// `predictions`; if `scores` is non-NULL it receives the `n × u` cosine
// scores with columns in ascending class-id order.
//
// # Safety
// Buffers must hold the stated number of elements.
enum VesdnStatus vesdn_zero_shot_predict(const struct VesdnModel *model,
                                         const float *neural,
                                         size_t n,
                                         size_t neural_dim,
                                         const float *templates,
                                         const int32_t *class_ids,
                                         size_t u,
                                         size_t visual_dim,
                                         int32_t *predictions,
                                         float *scores);

// Unseen-class top-1 and top-5 accuracy of `model` on `pack`.
//
// # Safety
// Handles must come from this library; outputs must be writable.
enum VesdnStatus vesdn_model_evaluate(const struct VesdnModel *model,
                                      const struct VesdnPack *pack,
                                      double *top1,
                                      double *top5);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VESDN_H */
