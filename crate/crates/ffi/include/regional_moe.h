#ifndef REGIONAL_MOE_H
#define REGIONAL_MOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function of the library.
typedef enum RmStatus {
  RM_STATUS_OK = 0,
  RM_STATUS_NULL_POINTER = 1,
  RM_STATUS_INVALID_UTF8 = 2,
  RM_STATUS_IO = 3,
  RM_STATUS_JSON = 4,
  RM_STATUS_CSV = 5,
  RM_STATUS_SCHEMA = 6,
  RM_STATUS_DATA = 7,
  RM_STATUS_DIMENSION_MISMATCH = 8,
  RM_STATUS_INVALID_CONFIG = 9,
  RM_STATUS_NO_AVAILABLE_EXPERTS = 10,
  RM_STATUS_NON_FINITE = 11,
  RM_STATUS_EMPTY_INPUT = 12,
  RM_STATUS_BUFFER_TOO_SMALL = 13,
  RM_STATUS_NOT_A_MIXTURE_MODEL = 14,
  RM_STATUS_PANIC = 15,
} RmStatus;

// Opaque handle to a trained model bundle.
typedef struct RmModel RmModel;

// Opaque handle to a feature schema.
typedef struct RmSchema RmSchema;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next library call on the same thread.
const char *rm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *rm_version(void);

// Loads a schema JSON file. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum RmStatus rm_schema_load(const char *path, struct RmSchema **out);

// # Safety
// `schema` must come from [`rm_schema_load`] and not be used afterwards. Null is ignored.
void rm_schema_free(struct RmSchema *schema);

// Dense feature count (after one-hot expansion); 0 for a null handle.
//
// # Safety
// `schema` must be null or a live handle.
size_t rm_schema_num_features(const struct RmSchema *schema);

// # Safety
// `schema` must be null or a live handle.
size_t rm_schema_num_modalities(const struct RmSchema *schema);

// Number of (modality, region) blocks, one expert each.
//
// # Safety
// `schema` must be null or a live handle.
size_t rm_schema_num_experts(const struct RmSchema *schema);

// # Safety
// `schema` must be null or a live handle.
size_t rm_schema_num_classes(const struct RmSchema *schema);

// Loads a model bundle JSON file. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum RmStatus rm_model_load(const char *path, struct RmModel **out);

// # Safety
// `model` must come from [`rm_model_load`] and not be used afterwards. Null is ignored.
void rm_model_free(struct RmModel *model);

// # Safety
// `model` must be null or a live handle.
size_t rm_model_num_features(const struct RmModel *model);

// # Safety
// `model` must be null or a live handle.
size_t rm_model_num_modalities(const struct RmModel *model);

// # Safety
// `model` must be null or a live handle.
size_t rm_model_num_classes(const struct RmModel *model);

// Expert count of a mixture model; 0 for baselines and null handles.
//
// # Safety
// `model` must be null or a live handle.
size_t rm_model_num_experts(const struct RmModel *model);

// Class probabilities for one raw (unnormalized) subject.
//
// `features` holds the dense feature vector in schema order; values of
// unavailable modalities are ignored. `available` holds one 0/1 flag per
// modality. `probs_out` receives `n_classes` values.
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum RmStatus rm_model_predict(const struct RmModel *model,
                               const double *features,
                               size_t n_features,
                               const uint8_t *available,
                               size_t n_modalities,
                               double *probs_out,
                               size_t n_classes);

// Final per-expert gate weights for one raw subject (mixture models only).
//
// # Safety
// Pointers must reference arrays of the stated lengths.
enum RmStatus rm_model_gate_weights(const struct RmModel *model,
                                    const double *features,
                                    size_t n_features,
                                    const uint8_t *available,
                                    size_t n_modalities,
                                    double *weights_out,
                                    size_t n_experts);

// Macro one-vs-rest AUROC. `probs` is row-major `n_samples x n_classes`.
//
// # Safety
// Pointers must reference arrays of the stated lengths; `out` must be valid.
enum RmStatus rm_macro_auroc(const uint32_t *labels,
                             const double *probs,
                             size_t n_samples,
                             size_t n_classes,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REGIONAL_MOE_H */
