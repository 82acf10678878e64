/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef PBR_H
#define PBR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum PbrStatus {
  PBR_STATUS_OK = 0,
  PBR_STATUS_NULL_POINTER = 1,
  PBR_STATUS_INVALID_ARGUMENT = 2,
  PBR_STATUS_IO = 3,
  PBR_STATUS_CHECKPOINT = 4,
  PBR_STATUS_RUNTIME = 5,
  PBR_STATUS_PANIC = 6,
} PbrStatus;

// Detections of one image, each with one box per stage.
typedef struct PbrDetections PbrDetections;

// A trained detector.
typedef struct PbrDetector PbrDetector;

// Axis-aligned box in pixels, `x1 <= x2`, `y1 <= y2`.
typedef struct PbrBox {
  double x1;
  double y1;
  double x2;
  double y2;
} PbrBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *pbr_version(void);

// Message of the last failure on this thread, or NULL. Valid until the next failing call on this thread.
const char *pbr_last_error(void);

// Intersection over union of two boxes.
enum PbrStatus pbr_iou(const struct PbrBox *a, const struct PbrBox *b, double *out);

// Boundary-area shrink factor `1/2^t` of refinement stage `t >= 1`.
enum PbrStatus pbr_shrink_factor(size_t t, double *out);

// Side displacements `(l, r, u, b)` of `target` relative to the boundary areas of `bbox`.
enum PbrStatus pbr_encode_sigma(const struct PbrBox *bbox,
                                const struct PbrBox *target,
                                double shrink,
                                double img_w,
                                double img_h,
                                double *sigma_out);

// Box implied by side displacements `sigma[4]` on the boundary areas of `bbox`, reordered and clipped to the image.
enum PbrStatus pbr_decode_sigma(const struct PbrBox *bbox,
                                const double *sigma,
                                double shrink,
                                double img_w,
                                double img_h,
                                struct PbrBox *out);

// Loads a checkpoint directory written by `pbr train`.
enum PbrStatus pbr_detector_load(const char *dir, struct PbrDetector **out);

void pbr_detector_free(struct PbrDetector *det);

// Square input size in pixels the detector expects.
enum PbrStatus pbr_detector_image_size(const struct PbrDetector *det, size_t *out);

// Detects objects in an interleaved 8-bit RGB image of `width * height * 3` bytes.
enum PbrStatus pbr_detector_infer(const struct PbrDetector *det,
                                  const uint8_t *rgb,
                                  size_t width,
                                  size_t height,
                                  struct PbrDetections **out);

void pbr_detections_free(struct PbrDetections *dets);

// Number of detections; 0 for NULL.
size_t pbr_detections_len(const struct PbrDetections *dets);

// Number of boxes per detection (stage count); 0 for NULL or an empty set.
size_t pbr_detections_num_stages(const struct PbrDetections *dets);

// Detection `index` (score order) with its box after stage `stage` (0-based).
// Any of `bbox`, `category`, `score` may be NULL.
enum PbrStatus pbr_detections_get(const struct PbrDetections *dets,
                                  size_t index,
                                  size_t stage,
                                  struct PbrBox *bbox,
                                  size_t *category,
                                  double *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PBR_H */
