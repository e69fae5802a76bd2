#ifndef WDFQ_H
#define WDFQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define WDFQ_OK 0

// A required pointer argument was null.
#define WDFQ_E_NULL 1

// A string argument was not valid UTF-8.
#define WDFQ_E_UTF8 2

// The output buffer is too small; the required count is still written.
#define WDFQ_E_CAPACITY 3

// An internal panic was caught at the boundary.
#define WDFQ_E_PANIC 4

#define WDFQ_E_DIMENSION 10

#define WDFQ_E_SHAPE 11

#define WDFQ_E_CONFIG 12

#define WDFQ_E_UNSUPPORTED_OP 13

#define WDFQ_E_REGISTRY 14

#define WDFQ_E_ARGUMENT 15

#define WDFQ_E_INFEASIBLE 16

#define WDFQ_E_STATISTICS 17

#define WDFQ_E_NUMERIC 18

#define WDFQ_E_IMAGE_HEADER 20

#define WDFQ_E_PAIRING 21

#define WDFQ_E_EXTENT 22

#define WDFQ_E_TENSOR_FORMAT 23

#define WDFQ_E_DATASET 24

#define WDFQ_E_DIVERGENCE 30

#define WDFQ_E_IO 40

// Opaque pipeline instance.
typedef struct WdfqModel WdfqModel;

// Opaque dense `f64` tensor.
typedef struct WdfqTensor WdfqTensor;

// One detection with normalized center-size box.
typedef struct WdfqDetection {
  uint32_t cls;
  double score;
  double cx;
  double cy;
  double w;
  double h;
} WdfqDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if none. The pointer
// stays valid until the next failing call on the same thread.
const char *wdfq_last_error(void);

// Builds a model from configuration text (`key = value` lines).
//
// # Safety
// `config` must be a nul-terminated string and `out` a valid pointer.
int32_t wdfq_model_from_text(const char *config, struct WdfqModel **out);

// Builds a model from a configuration file.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
int32_t wdfq_model_load(const char *path, struct WdfqModel **out);

// # Safety
// `model` must come from a `wdfq_model_*` constructor and not be used
// afterwards. Null is ignored.
void wdfq_model_free(struct WdfqModel *model);

// Copies `data` into a new tensor of the given shape.
//
// # Safety
// `shape` must hold `rank` values and `data` their product.
int32_t wdfq_tensor_new(const size_t *shape,
                        size_t rank,
                        const double *data,
                        struct WdfqTensor **out);

// Reads a tensor file.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
int32_t wdfq_tensor_load(const char *path, struct WdfqTensor **out);

// # Safety
// `tensor` must be a live handle or null.
size_t wdfq_tensor_rank(const struct WdfqTensor *tensor);

// Writes up to `capacity` extents into `shape`.
//
// # Safety
// `tensor` must be a live handle and `shape` hold `capacity` values.
int32_t wdfq_tensor_shape(const struct WdfqTensor *tensor, size_t *shape, size_t capacity);

// # Safety
// `tensor` must be a live handle or null.
size_t wdfq_tensor_numel(const struct WdfqTensor *tensor);

// Row-major values, valid while the handle lives.
//
// # Safety
// `tensor` must be a live handle or null.
const double *wdfq_tensor_data(const struct WdfqTensor *tensor);

// # Safety
// `tensor` must come from this library and not be used afterwards. Null is
// ignored.
void wdfq_tensor_free(struct WdfqTensor *tensor);

// One-level Haar transform of a `[N, C, H, W]` tensor into four new handles.
//
// # Safety
// `x` must be a live handle and the four outputs valid pointers.
int32_t wdfq_dwt(const struct WdfqTensor *x,
                 struct WdfqTensor **ll,
                 struct WdfqTensor **lh,
                 struct WdfqTensor **hl,
                 struct WdfqTensor **hh);

// Loads an RGB / IR image pair as two `[1, 3, H, W]` tensors.
//
// # Safety
// Paths must be nul-terminated strings and outputs valid pointers.
int32_t wdfq_load_pair(const char *rgb_path,
                       const char *ir_path,
                       struct WdfqTensor **rgb,
                       struct WdfqTensor **ir);

// Runs detection. `count` receives the number of detections; at most
// `capacity` are written to `out`, and `WDFQ_E_CAPACITY` signals truncation.
//
// # Safety
// Handles must be live, `out` must hold `capacity` entries (or be null when
// `capacity` is 0) and `count` must be valid.
int32_t wdfq_infer(const struct WdfqModel *model,
                   const struct WdfqTensor *rgb,
                   const struct WdfqTensor *ir,
                   struct WdfqDetection *out,
                   size_t capacity,
                   size_t *count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WDFQ_H */
