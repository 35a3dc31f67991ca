#ifndef IKRL_H
#define IKRL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum IkrlStatus {
  IKRL_STATUS_OK = 0,
  IKRL_STATUS_NULL_POINTER = 1,
  IKRL_STATUS_INVALID_ARGUMENT = 2,
  IKRL_STATUS_IO = 3,
  IKRL_STATUS_FORMAT = 4,
  IKRL_STATUS_DIMENSION = 5,
  IKRL_STATUS_NON_FINITE = 6,
  IKRL_STATUS_MISSING_FEATURES = 7,
  IKRL_STATUS_BUFFER_TOO_SMALL = 8,
  IKRL_STATUS_PANIC = 9,
} IkrlStatus;

typedef enum IkrlAggregation {
  IKRL_AGGREGATION_ATT = 0,
  IKRL_AGGREGATION_AVG = 1,
  IKRL_AGGREGATION_MAX = 2,
} IkrlAggregation;

typedef enum IkrlNorm {
  IKRL_NORM_L1 = 0,
  IKRL_NORM_L2 = 1,
} IkrlNorm;

typedef enum IkrlMode {
  IKRL_MODE_SBR = 0,
  IKRL_MODE_IBR = 1,
  IKRL_MODE_UNION = 2,
} IkrlMode;

// Image features loaded from a feature file.
typedef struct IkrlFeatures IkrlFeatures;

// Trained parameters loaded from a checkpoint.
typedef struct IkrlModel IkrlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *ikrl_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *ikrl_version(void);

// Loads a checkpoint into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum IkrlStatus ikrl_model_load(const char *path, struct IkrlModel **out);

// # Safety
// `model` must come from [`ikrl_model_load`] and not be used afterwards.
// Null is ignored.
void ikrl_model_free(struct IkrlModel *model);

// # Safety
// `model` must be a live handle; each output pointer must be valid or null
// (null outputs are skipped).
enum IkrlStatus ikrl_model_dims(const struct IkrlModel *model,
                                size_t *num_entities,
                                size_t *num_relations,
                                size_t *entity_dim,
                                size_t *image_dim);

// Loads a feature file into a new features handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum IkrlStatus ikrl_features_load(const char *path, struct IkrlFeatures **out);

// # Safety
// `features` must come from [`ikrl_features_load`] and not be used
// afterwards. Null is ignored.
void ikrl_features_free(struct IkrlFeatures *features);

// Total training energy of `(h, r, t)`: the sum of the structure/structure,
// structure/image, image/structure and image/image translation terms.
//
// # Safety
// Handles must be live and `out` valid.
enum IkrlStatus ikrl_energy(const struct IkrlModel *model,
                            const struct IkrlFeatures *features,
                            size_t head,
                            size_t relation,
                            size_t tail,
                            uint32_t aggregation_mode,
                            uint32_t norm_kind,
                            double *out);

// Evaluation score of `(h, r, t)`; lower is more plausible. `features` may
// be null in structure mode. `alpha` is used only in union mode.
//
// # Safety
// `model` must be live, `features` live or null, `out` valid.
enum IkrlStatus ikrl_dissimilarity(const struct IkrlModel *model,
                                   const struct IkrlFeatures *features,
                                   size_t head,
                                   size_t relation,
                                   size_t tail,
                                   uint32_t mode,
                                   double alpha,
                                   uint32_t aggregation_mode,
                                   uint32_t norm_kind,
                                   double *out);

// Writes the aggregated image representation of `entity` into `buf`, which
// must hold exactly the model's entity dimension.
//
// # Safety
// Handles must be live and `buf` must point to `len` writable doubles.
enum IkrlStatus ikrl_entity_ibr(const struct IkrlModel *model,
                                const struct IkrlFeatures *features,
                                size_t entity,
                                uint32_t aggregation_mode,
                                double *buf,
                                size_t len);

// Attention weights over `entity`'s images, in stored image order.
// `count` receives the number of images; if `len` is smaller the call
// fails with `BufferTooSmall` and writes nothing else.
//
// # Safety
// Handles must be live, `count` valid and `buf` must point to `len`
// writable doubles (it may be null when `len` is 0).
enum IkrlStatus ikrl_attention(const struct IkrlModel *model,
                               const struct IkrlFeatures *features,
                               size_t entity,
                               double *buf,
                               size_t len,
                               size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IKRL_H */
