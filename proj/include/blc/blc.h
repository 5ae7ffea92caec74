/* C interface to the bilinear-layer library. Opaque handles, status codes,
 * and a per-thread message for the most recent failure. */
#ifndef BLC_BLC_H
#define BLC_BLC_H

#include <stddef.h>

#if defined(BLC_BUILDING_LIBRARY)
#define BLC_API __attribute__((visibility("default")))
#else
#define BLC_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum blc_status {
  BLC_OK = 0,
  BLC_ERR_DIMENSION = 1,
  BLC_ERR_ARGUMENT = 2,
  BLC_ERR_CAPACITY = 3,
  BLC_ERR_CONVERGENCE = 4,
  BLC_ERR_TRAINING = 5,
  BLC_ERR_FORMAT = 6,
  BLC_ERR_LENGTH = 7,
  BLC_ERR_VERSION = 8,
  BLC_ERR_INTEGRITY = 9,
  BLC_ERR_CONSISTENCY = 10,
  BLC_ERR_PRECONDITION = 11,
  BLC_ERR_CONFIG = 12,
  BLC_ERR_IO = 13,
  BLC_ERR_INTERNAL = 14
} blc_status;

typedef enum blc_dtype { BLC_F32 = 0, BLC_F64 = 1 } blc_dtype;

typedef struct blc_tensor blc_tensor;
typedef struct blc_layer blc_layer;

BLC_API const char* blc_version(void);
BLC_API const char* blc_status_name(blc_status status);
/* Message of the last failed call on this thread; "" if none. */
BLC_API const char* blc_last_error(void);

/* Tensors: row-major, order 1..4. `data` may be NULL for zeros. */
BLC_API blc_status blc_tensor_create(const size_t* shape, size_t order, const double* data,
                                     blc_dtype dtype, blc_tensor** out);
BLC_API void blc_tensor_free(blc_tensor* t);
BLC_API size_t blc_tensor_order(const blc_tensor* t);
BLC_API size_t blc_tensor_extent(const blc_tensor* t, size_t axis);
BLC_API size_t blc_tensor_size(const blc_tensor* t);
BLC_API blc_dtype blc_tensor_dtype(const blc_tensor* t);
/* Copies min(n, size) values. */
BLC_API blc_status blc_tensor_copy_data(const blc_tensor* t, double* out, size_t n);

BLC_API blc_status blc_tensor_inner(const blc_tensor* u, const blc_tensor* v, size_t axis_u,
                                    size_t axis_v, blc_tensor** out);
BLC_API blc_status blc_mode_unfold(const blc_tensor* t, size_t axis, blc_tensor** out);
/* Max-abs error of the rank-truncated HOSVD reconstruction; ranks may be NULL (full). */
BLC_API blc_status blc_hosvd_error(const blc_tensor* t, const size_t* ranks, size_t n_ranks,
                                   double* max_abs_error);

BLC_API blc_status blc_tensor_read(const char* path, blc_tensor** out);
BLC_API blc_status blc_tensor_write(const blc_tensor* t, const char* path);

/* Bilinear layers from m x n weight tensors. */
BLC_API blc_status blc_layer_create(const blc_tensor* w1, const blc_tensor* w2,
                                    int one_plus_modifier, blc_layer** out);
BLC_API void blc_layer_free(blc_layer* layer);
BLC_API blc_status blc_layer_forward(const blc_layer* layer, const double* x, size_t n,
                                     double* y, size_t m);
BLC_API blc_status blc_layer_build_b(const blc_layer* layer, blc_tensor** out);
BLC_API blc_status blc_build_z(size_t m, blc_tensor** out);

/* Runs a command ("train", "verify", "expand", "analyze") from a JSON request.
 * On BLC_OK, *report receives the RunReport (free with blc_string_free) and
 * *verdict is 0, or 4 if a verification invariant failed. */
BLC_API blc_status blc_run(const char* command, const char* request_json, char** report,
                           int* verdict);
BLC_API void blc_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif
