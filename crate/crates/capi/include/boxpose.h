/* C interface to the boxpose pose-estimation library. */

#ifndef BOXPOSE_H
#define BOXPOSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum bp_status {
  BP_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BP_NULL_POINTER = 1,
  /**
   * Arguments violate a precondition (bad sizes, non-rotation pose, …).
   */
  BP_INVALID_ARGUMENT = 2,
  /**
   * Geometric failure such as points behind the camera.
   */
  BP_GEOMETRY_ERROR = 3,
  /**
   * Numeric failure (degenerate PnP system, insufficient corners, …).
   */
  BP_NUMERIC_ERROR = 4,
} bp_status;

/**
 * Opaque corner-heatmap handle (8 channels, row-major).
 */
typedef struct bp_heatmap bp_heatmap;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bp_version(void);

/**
 * σ from the corner layout: `scale` × mean corner-to-centroid distance.
 * `corners_xy`: 16 doubles.
 */
enum bp_status bp_object_sigma(const double *corners_xy,
                               uint32_t width,
                               uint32_t height,
                               double scale,
                               double *sigma_out);

/**
 * Encode a width×height×8 corner heatmap. `corners_xy`: 16 doubles. The
 * handle written to `heatmap_out` must be freed with `bp_heatmap_free`.
 */
enum bp_status bp_heatmap_encode(const double *corners_xy,
                                 uint32_t width,
                                 uint32_t height,
                                 double sigma,
                                 struct bp_heatmap **heatmap_out);

/**
 * Decode corner locations and confidences. `corners_xy_out`: 16 doubles,
 * `confidence_out`: 8 doubles.
 */
enum bp_status bp_heatmap_decode(const struct bp_heatmap *heatmap,
                                 double *corners_xy_out,
                                 double *confidence_out);

enum bp_status bp_heatmap_size(const struct bp_heatmap *heatmap,
                               uint32_t *width_out,
                               uint32_t *height_out);

/**
 * Borrow the raw channel-last f32 values (height × width × 8). The pointer
 * is valid until the handle is freed.
 */
enum bp_status bp_heatmap_values(const struct bp_heatmap *heatmap,
                                 const float **values_out,
                                 uintptr_t *len_out);

/**
 * Release a heatmap handle. Null is a no-op.
 */
void bp_heatmap_free(struct bp_heatmap *heatmap);

/**
 * Estimate a camera-from-object pose from the 8 box corners. Inputs:
 * `corners3d` 24 doubles (object frame), `corners2d` 16 doubles (pixels),
 * `confidence` 8 doubles; corners below `min_conf` are dropped (at least 6
 * must survive). Outputs: `pose_out` 12 doubles (row-major [R|t]) and the
 * rms reprojection error.
 */
enum bp_status bp_estimate_pose(const double *corners3d,
                                const double *corners2d,
                                const double *confidence,
                                double fx,
                                double fy,
                                double cx,
                                double cy,
                                uint32_t width,
                                uint32_t height,
                                double min_conf,
                                double *pose_out,
                                double *rms_out);

/**
 * ADD: mean paired distance between transformed model points.
 * `points3d`: 3·n doubles.
 */
enum bp_status bp_add_metric(const double *gt_pose,
                             const double *pred_pose,
                             const double *points3d,
                             uintptr_t n_points,
                             double *metric_out);

/**
 * ADD-S: mean nearest-point distance (symmetric objects).
 */
enum bp_status bp_adds_metric(const double *gt_pose,
                              const double *pred_pose,
                              const double *points3d,
                              uintptr_t n_points,
                              double *metric_out);

/**
 * Mean 2D reprojection distance in pixels.
 */
enum bp_status bp_proj2d_metric(const double *gt_pose,
                                const double *pred_pose,
                                const double *points3d,
                                uintptr_t n_points,
                                double fx,
                                double fy,
                                double cx,
                                double cy,
                                uint32_t width,
                                uint32_t height,
                                double *metric_out);

/**
 * Normalized area under the accuracy curve on [0, max_threshold].
 */
enum bp_status bp_auc(const double *errors,
                      uintptr_t n_errors,
                      double max_threshold,
                      double *auc_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* BOXPOSE_H */
