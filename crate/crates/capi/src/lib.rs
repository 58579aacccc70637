//! C ABI over the boxpose library: heatmap codec, corner-based PnP, and
//! pose-error metrics. Every function returns a status code; outputs go
//! through caller-provided pointers. Heatmaps travel as opaque handles that
//! must be released with `bp_heatmap_free`.
//!
//! Conventions: poses are row-major 3×4 [R|t] (12 doubles); 2D corner sets
//! are 16 doubles (x, y per corner); 3D corner sets are 24 doubles; point
//! clouds are 3n doubles. The generated header lives in `include/boxpose.h`.

#![allow(non_camel_case_types)]

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{Matrix3, Vector2, Vector3};

use boxpose::eval::{add_metric, adds_metric, auc, proj2d_metric, EvalError};
use boxpose::geom::{BoundingBox3D, Intrinsics, PointCloud, Pose};
use boxpose::heatmap::{
    decode_corners, encode_heatmap_with_sigma, object_sigma_scaled, CornerHeatmap, Corners2D,
};
use boxpose::pnp::estimate_pose;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum bp_status {
    BP_OK = 0,
    /// A required pointer argument was null.
    BP_NULL_POINTER = 1,
    /// Arguments violate a precondition (bad sizes, non-rotation pose, …).
    BP_INVALID_ARGUMENT = 2,
    /// Geometric failure such as points behind the camera.
    BP_GEOMETRY_ERROR = 3,
    /// Numeric failure (degenerate PnP system, insufficient corners, …).
    BP_NUMERIC_ERROR = 4,
}

use bp_status::*;

/// Opaque corner-heatmap handle (8 channels, row-major).
pub struct bp_heatmap {
    inner: CornerHeatmap,
}

fn eval_status(e: EvalError) -> bp_status {
    match e {
        EvalError::Geom(_) => BP_GEOMETRY_ERROR,
        _ => BP_INVALID_ARGUMENT,
    }
}

fn guard(f: impl FnOnce() -> bp_status) -> bp_status {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(BP_NUMERIC_ERROR)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn read_corners2d(
    corners_xy: *const f64,
    width: u32,
    height: u32,
) -> Result<Corners2D, bp_status> {
    if width == 0 || height == 0 {
        return Err(BP_INVALID_ARGUMENT);
    }
    let raw = std::slice::from_raw_parts(corners_xy, 16);
    let mut points = [Vector2::zeros(); 8];
    for (i, p) in points.iter_mut().enumerate() {
        *p = Vector2::new(raw[2 * i], raw[2 * i + 1]);
    }
    Ok(Corners2D::new(points, width, height))
}

unsafe fn read_pose(pose: *const f64) -> Result<Pose, bp_status> {
    let p = std::slice::from_raw_parts(pose, 12);
    let rotation = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let translation = Vector3::new(p[3], p[7], p[11]);
    Pose::new(rotation, translation).map_err(|_| BP_INVALID_ARGUMENT)
}

unsafe fn read_points(points: *const f64, n_points: usize) -> PointCloud {
    let raw = std::slice::from_raw_parts(points, 3 * n_points);
    PointCloud::new(
        raw.chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect(),
    )
}

/// σ from the corner layout: `scale` × mean corner-to-centroid distance.
/// `corners_xy`: 16 doubles.
#[no_mangle]
pub unsafe extern "C" fn bp_object_sigma(
    corners_xy: *const f64,
    width: u32,
    height: u32,
    scale: f64,
    sigma_out: *mut f64,
) -> bp_status {
    if corners_xy.is_null() || sigma_out.is_null() {
        return BP_NULL_POINTER;
    }
    guard(|| {
        let corners = match read_corners2d(corners_xy, width, height) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match object_sigma_scaled(&corners, scale) {
            Ok(sigma) => {
                *sigma_out = sigma;
                BP_OK
            }
            Err(_) => BP_INVALID_ARGUMENT,
        }
    })
}

/// Encode a width×height×8 corner heatmap. `corners_xy`: 16 doubles. The
/// handle written to `heatmap_out` must be freed with `bp_heatmap_free`.
#[no_mangle]
pub unsafe extern "C" fn bp_heatmap_encode(
    corners_xy: *const f64,
    width: u32,
    height: u32,
    sigma: f64,
    heatmap_out: *mut *mut bp_heatmap,
) -> bp_status {
    if corners_xy.is_null() || heatmap_out.is_null() {
        return BP_NULL_POINTER;
    }
    guard(|| {
        let corners = match read_corners2d(corners_xy, width, height) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match encode_heatmap_with_sigma(&corners, (height, width), sigma) {
            Ok(inner) => {
                *heatmap_out = Box::into_raw(Box::new(bp_heatmap { inner }));
                BP_OK
            }
            Err(_) => BP_INVALID_ARGUMENT,
        }
    })
}

/// Decode corner locations and confidences. `corners_xy_out`: 16 doubles,
/// `confidence_out`: 8 doubles.
#[no_mangle]
pub unsafe extern "C" fn bp_heatmap_decode(
    heatmap: *const bp_heatmap,
    corners_xy_out: *mut f64,
    confidence_out: *mut f64,
) -> bp_status {
    if heatmap.is_null() || corners_xy_out.is_null() || confidence_out.is_null() {
        return BP_NULL_POINTER;
    }
    guard(|| {
        let (corners, confidence) = decode_corners(&(*heatmap).inner);
        let xy = std::slice::from_raw_parts_mut(corners_xy_out, 16);
        for (i, p) in corners.points.iter().enumerate() {
            xy[2 * i] = p.x;
            xy[2 * i + 1] = p.y;
        }
        std::slice::from_raw_parts_mut(confidence_out, 8).copy_from_slice(&confidence);
        BP_OK
    })
}

#[no_mangle]
pub unsafe extern "C" fn bp_heatmap_size(
    heatmap: *const bp_heatmap,
    width_out: *mut u32,
    height_out: *mut u32,
) -> bp_status {
    if heatmap.is_null() || width_out.is_null() || height_out.is_null() {
        return BP_NULL_POINTER;
    }
    *width_out = (*heatmap).inner.width;
    *height_out = (*heatmap).inner.height;
    BP_OK
}

/// Borrow the raw channel-last f32 values (height × width × 8). The pointer
/// is valid until the handle is freed.
#[no_mangle]
pub unsafe extern "C" fn bp_heatmap_values(
    heatmap: *const bp_heatmap,
    values_out: *mut *const f32,
    len_out: *mut usize,
) -> bp_status {
    if heatmap.is_null() || values_out.is_null() || len_out.is_null() {
        return BP_NULL_POINTER;
    }
    let values = &(*heatmap).inner.values;
    *values_out = values.as_ptr();
    *len_out = values.len();
    BP_OK
}

/// Release a heatmap handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn bp_heatmap_free(heatmap: *mut bp_heatmap) {
    if !heatmap.is_null() {
        drop(Box::from_raw(heatmap));
    }
}

/// Estimate a camera-from-object pose from the 8 box corners. Inputs:
/// `corners3d` 24 doubles (object frame), `corners2d` 16 doubles (pixels),
/// `confidence` 8 doubles; corners below `min_conf` are dropped (at least 6
/// must survive). Outputs: `pose_out` 12 doubles (row-major [R|t]) and the
/// rms reprojection error.
#[no_mangle]
pub unsafe extern "C" fn bp_estimate_pose(
    corners3d: *const f64,
    corners2d: *const f64,
    confidence: *const f64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    min_conf: f64,
    pose_out: *mut f64,
    rms_out: *mut f64,
) -> bp_status {
    if corners3d.is_null()
        || corners2d.is_null()
        || confidence.is_null()
        || pose_out.is_null()
        || rms_out.is_null()
    {
        return BP_NULL_POINTER;
    }
    guard(|| {
        let c3 = std::slice::from_raw_parts(corners3d, 24);
        let mut corners = [Vector3::zeros(); 8];
        for (i, c) in corners.iter_mut().enumerate() {
            *c = Vector3::new(c3[3 * i], c3[3 * i + 1], c3[3 * i + 2]);
        }
        let bbox = BoundingBox3D { corners };
        let corners2d = match read_corners2d(corners2d, width, height) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let mut conf = [0.0f64; 8];
        conf.copy_from_slice(std::slice::from_raw_parts(confidence, 8));
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        match estimate_pose(&corners2d, &conf, &bbox, &k, min_conf) {
            Ok((pose, rms)) => {
                let out = std::slice::from_raw_parts_mut(pose_out, 12);
                for i in 0..3 {
                    for j in 0..3 {
                        out[4 * i + j] = pose.rotation[(i, j)];
                    }
                    out[4 * i + 3] = pose.translation[i];
                }
                *rms_out = rms;
                BP_OK
            }
            Err(_) => BP_NUMERIC_ERROR,
        }
    })
}

unsafe fn metric_common(
    gt_pose: *const f64,
    pred_pose: *const f64,
    points3d: *const f64,
    n_points: usize,
    out: *mut f64,
    f: impl Fn(&Pose, &Pose, &PointCloud) -> Result<f64, EvalError>,
) -> bp_status {
    if gt_pose.is_null() || pred_pose.is_null() || points3d.is_null() || out.is_null() {
        return BP_NULL_POINTER;
    }
    guard(|| {
        let gt = match read_pose(gt_pose) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let pred = match read_pose(pred_pose) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cloud = read_points(points3d, n_points);
        match f(&gt, &pred, &cloud) {
            Ok(v) => {
                *out = v;
                BP_OK
            }
            Err(e) => eval_status(e),
        }
    })
}

/// ADD: mean paired distance between transformed model points.
/// `points3d`: 3·n doubles.
#[no_mangle]
pub unsafe extern "C" fn bp_add_metric(
    gt_pose: *const f64,
    pred_pose: *const f64,
    points3d: *const f64,
    n_points: usize,
    metric_out: *mut f64,
) -> bp_status {
    metric_common(gt_pose, pred_pose, points3d, n_points, metric_out, |g, p, c| {
        add_metric(g, p, c)
    })
}

/// ADD-S: mean nearest-point distance (symmetric objects).
#[no_mangle]
pub unsafe extern "C" fn bp_adds_metric(
    gt_pose: *const f64,
    pred_pose: *const f64,
    points3d: *const f64,
    n_points: usize,
    metric_out: *mut f64,
) -> bp_status {
    metric_common(gt_pose, pred_pose, points3d, n_points, metric_out, |g, p, c| {
        adds_metric(g, p, c)
    })
}

/// Mean 2D reprojection distance in pixels.
#[no_mangle]
pub unsafe extern "C" fn bp_proj2d_metric(
    gt_pose: *const f64,
    pred_pose: *const f64,
    points3d: *const f64,
    n_points: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    metric_out: *mut f64,
) -> bp_status {
    let k = Intrinsics {
        fx,
        fy,
        cx,
        cy,
        width,
        height,
    };
    metric_common(gt_pose, pred_pose, points3d, n_points, metric_out, move |g, p, c| {
        proj2d_metric(g, p, c, &k)
    })
}

/// Normalized area under the accuracy curve on [0, max_threshold].
#[no_mangle]
pub unsafe extern "C" fn bp_auc(
    errors: *const f64,
    n_errors: usize,
    max_threshold: f64,
    auc_out: *mut f64,
) -> bp_status {
    if errors.is_null() || auc_out.is_null() {
        return BP_NULL_POINTER;
    }
    guard(|| {
        let errs = std::slice::from_raw_parts(errors, n_errors);
        match auc(errs, max_threshold) {
            Ok(v) => {
                *auc_out = v;
                BP_OK
            }
            Err(_) => BP_INVALID_ARGUMENT,
        }
    })
}
