#ifndef MSUNET_H
#define MSUNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum MsunetStatus {
  MSUNET_STATUS_OK = 0,
  MSUNET_STATUS_NULL_POINTER = 1,
  MSUNET_STATUS_INVALID_ARGUMENT = 2,
  MSUNET_STATUS_IO = 3,
  /*
   Malformed checkpoint or image file.
   */
  MSUNET_STATUS_FORMAT = 4,
  /*
   Buffer sizes do not match the model.
   */
  MSUNET_STATUS_SHAPE = 5,
  MSUNET_STATUS_NON_FINITE = 6,
  /*
   A Rust panic was caught; the handle should not be used further.
   */
  MSUNET_STATUS_INTERNAL = 7,
} MsunetStatus;

/*
 A loaded cascade and the configuration it was trained with.
 */
typedef struct MsunetModel MsunetModel;

typedef struct MsunetModelInfo {
  uint32_t stages;
  uint32_t input_width;
  uint32_t input_height;
  float threshold;
  uint64_t param_count;
} MsunetModelInfo;

typedef struct MsunetMetrics {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
  double ja;
  double di;
  double se;
  double sp;
  double ac;
} MsunetMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next failing call on the same thread.
 */
const char *msunet_last_error(void);

/*
 Static, NUL-terminated version string.
 */
const char *msunet_version(void);

/*
 Loads a checkpoint. On success `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MsunetStatus msunet_model_load(const char *path, struct MsunetModel **out);

/*
 Releases a handle from [`msunet_model_load`]. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void msunet_model_free(struct MsunetModel *model);

/*
 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum MsunetStatus msunet_model_info(const struct MsunetModel *model, struct MsunetModelInfo *out);

/*
 Segments one image at the model's input size.

 `rgb` holds `3 * height * width` planar floats in `[0, 1]` (all red, then
 green, then blue, rows top to bottom). `stage_maps`, if not null,
 receives `stages * height * width` probabilities; `mask`, if not null,
 receives `height * width` bytes, 1 for lesion and 0 otherwise.

 # Safety
 All non-null pointers must reference buffers of the sizes above.
 */
enum MsunetStatus msunet_model_predict(const struct MsunetModel *model,
                                       const float *rgb,
                                       uint32_t width,
                                       uint32_t height,
                                       float *stage_maps,
                                       uint8_t *mask);

/*
 Soft Jaccard distance between a 0/1 target and probabilities.

 # Safety
 `target` and `prob` must hold `len` floats; `out` must be valid.
 */
enum MsunetStatus msunet_jaccard_distance(const float *target,
                                          const float *prob,
                                          size_t len,
                                          double *out);

/*
 Confusion counts and the five metrics of a binary prediction. Inputs are
 `len` bytes each, 0 or 1.

 # Safety
 `pred` and `truth` must hold `len` bytes; `out` must be valid.
 */
enum MsunetStatus msunet_metrics(const uint8_t *pred,
                                 const uint8_t *truth,
                                 size_t len,
                                 struct MsunetMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSUNET_H */
