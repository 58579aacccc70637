//! SE(3) poses, pinhole projection, multiview point filtering and 3D box recovery.
//!
//! Conventions used across the whole crate:
//! - Poses are camera-from-object: `p_cam = R * p_obj + t`.
//! - Box corners follow the canonical bit-pattern order: corner index
//!   `i = 4*bx + 2*by + bz`, where bit `b` selects {min, max} on that axis
//!   (z varies fastest). Heatmap channel `i` always refers to corner `i`.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("rotation is not orthonormal with det +1 (defect {defect:.3e})")]
    InvalidRotation { defect: f64 },
    #[error("point has non-positive camera depth z = {z:.6}")]
    BehindCamera { z: f64 },
    #[error("box corner {index} has non-positive camera depth z = {z:.6}")]
    CornerBehindCamera { index: usize, z: f64 },
    #[error("bounding box fit needs at least 2 points, got {count}")]
    TooFewPoints { count: usize },
    #[error("bounding box extent along axis {axis} is degenerate ({extent:.3e} m)")]
    DegenerateBox { axis: usize, extent: f64 },
    #[error("rotation axis must be unit length, |axis| = {norm:.9}")]
    InvalidAxis { norm: f64 },
    #[error("crop {x},{y} {w}x{h} invalid for a {width}x{height} image")]
    InvalidCrop {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: u32,
        height: u32,
    },
}

/// Rigid camera-from-object transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validating constructor: rejects rotations that are not orthonormal
    /// with determinant +1 (both within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let defect = rotation_defect(&rotation);
        if defect > 1e-9 {
            return Err(GeomError::InvalidRotation { defect });
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Optical center in the object frame: -Rᵀ t.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Max-abs deviation of RᵀR from I, plus the det-from-+1 deviation.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ortho.max((r.determinant() - 1.0).abs())
}

/// Rotation matrix for the axis-angle vector `omega` (Rodrigues / exp map).
/// Near zero the series expansion keeps the map smooth.
pub fn rotation_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-12 {
        return Matrix3::identity() + k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + (k * k) * b
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Nearest rotation matrix (Frobenius sense) to an arbitrary 3x3 matrix:
/// SVD projection with the determinant forced to +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let d = (u * vt).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    u * fix * vt
}

/// Pinhole camera: fx, fy, cx, cy in pixels plus the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Perspective division of a camera-frame point; caller guarantees z > 0.
    pub fn project_cam(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    pub fn contains_pixel(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest pairwise distance; used as the object diameter in metrics.
    pub fn diameter(&self) -> f64 {
        let mut d = 0.0f64;
        for i in 0..self.points.len() {
            for j in (i + 1)..self.points.len() {
                d = d.max((self.points[i] - self.points[j]).norm());
            }
        }
        d
    }
}

/// Object region in one view: full bitmap or an axis-aligned pixel rectangle
/// (the synthetic default — cheap and exact for convex objects).
#[derive(Debug, Clone, PartialEq)]
pub enum DetectionMask {
    /// Closed rectangle [x0, x1] × [y0, y1] in pixel coordinates.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Bitmap {
        width: u32,
        height: u32,
        data: Vec<bool>,
    },
}

impl DetectionMask {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            DetectionMask::Rect { x0, y0, x1, y1 } => u >= *x0 && u <= *x1 && v >= *y0 && v <= *y1,
            DetectionMask::Bitmap {
                width,
                height,
                data,
            } => {
                // A pixel owns the unit square around its center.
                let px = u.round();
                let py = v.round();
                if px < 0.0 || py < 0.0 || px >= *width as f64 || py >= *height as f64 {
                    return false;
                }
                data[py as usize * *width as usize + px as usize]
            }
        }
    }
}

/// Eight ordered corners (canonical bit-pattern order, see module docs).
/// Fitted boxes are axis-aligned; rotated ones generally are not.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox3D {
    pub corners: [Vector3<f64>; 8],
}

/// The 12 box edges as corner-index pairs (indices differing in one bit).
pub const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (0, 2),
    (0, 4),
    (1, 3),
    (1, 5),
    (2, 3),
    (2, 6),
    (3, 7),
    (4, 5),
    (4, 6),
    (5, 7),
    (6, 7),
];

impl BoundingBox3D {
    /// Axis-aligned box from per-axis bounds, corners in canonical order.
    pub fn from_min_max(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        let mut corners = [Vector3::zeros(); 8];
        for (i, c) in corners.iter_mut().enumerate() {
            let bx = (i >> 2) & 1;
            let by = (i >> 1) & 1;
            let bz = i & 1;
            *c = Vector3::new(
                if bx == 1 { max.x } else { min.x },
                if by == 1 { max.y } else { min.y },
                if bz == 1 { max.z } else { min.z },
            );
        }
        BoundingBox3D { corners }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.corners.iter().sum::<Vector3<f64>>() / 8.0
    }
}

/// Project an object-frame point to pixel coordinates (may land outside the
/// image rectangle; that is the caller's concern).
pub fn project_point(
    pose: &Pose,
    k: &Intrinsics,
    p: &Vector3<f64>,
) -> Result<Vector2<f64>, GeomError> {
    let pc = pose.transform(p);
    if pc.z <= 0.0 {
        return Err(GeomError::BehindCamera { z: pc.z });
    }
    Ok(k.project_cam(&pc))
}

/// Project all 8 box corners, preserving corner order.
pub fn project_corners(
    pose: &Pose,
    k: &Intrinsics,
    bbox: &BoundingBox3D,
) -> Result<[Vector2<f64>; 8], GeomError> {
    let mut out = [Vector2::zeros(); 8];
    for (index, corner) in bbox.corners.iter().enumerate() {
        let pc = pose.transform(corner);
        if pc.z <= 0.0 {
            return Err(GeomError::CornerBehindCamera { index, z: pc.z });
        }
        out[index] = k.project_cam(&pc);
    }
    Ok(out)
}

/// Keep exactly the points whose projection falls inside the mask in EVERY
/// view. Points behind any camera count as outside. An empty result is the
/// caller's signal to handle (downstream box fitting rejects it anyway).
pub fn filter_points(
    cloud: &PointCloud,
    views: &[(Pose, Intrinsics, DetectionMask)],
) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            views.iter().all(|(pose, k, mask)| {
                let pc = pose.transform(p);
                pc.z > 0.0 && {
                    let uv = k.project_cam(&pc);
                    mask.contains(uv.x, uv.y)
                }
            })
        })
        .copied()
        .collect();
    PointCloud { points }
}

/// Centroid-centered axis-aligned bounding box of a cloud.
/// Returns the box (in the centered, object-centric frame) and the centroid
/// that was subtracted.
pub fn fit_bounding_box(cloud: &PointCloud) -> Result<(BoundingBox3D, Vector3<f64>), GeomError> {
    if cloud.len() < 2 {
        return Err(GeomError::TooFewPoints { count: cloud.len() });
    }
    let centroid = cloud.points.iter().sum::<Vector3<f64>>() / cloud.len() as f64;
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for p in &cloud.points {
        let c = p - centroid;
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
            max[a] = max[a].max(c[a]);
        }
    }
    for axis in 0..3 {
        let extent = max[axis] - min[axis];
        if extent < 1e-12 {
            return Err(GeomError::DegenerateBox { axis, extent });
        }
    }
    Ok((BoundingBox3D::from_min_max(min, max), centroid))
}

/// Rotate a box rigidly about its own centroid. Corner indices keep their
/// identity; the result is generally no longer axis-aligned.
pub fn rotate_box(
    bbox: &BoundingBox3D,
    axis: &Vector3<f64>,
    angle: f64,
) -> Result<BoundingBox3D, GeomError> {
    let norm = axis.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(GeomError::InvalidAxis { norm });
    }
    let r = rotation_exp(&(axis * angle));
    let c = bbox.centroid();
    let mut corners = bbox.corners;
    for p in corners.iter_mut() {
        *p = r * (*p - c) + c;
    }
    Ok(BoundingBox3D { corners })
}

/// Intrinsics after cropping `crop = (x, y, w, h)` pixels and resizing the
/// crop to `out_size`. Pixel map: u' = (u − x) · out_w/w, v' likewise.
pub fn crop_intrinsics(
    k: &Intrinsics,
    crop: (f64, f64, f64, f64),
    out_size: (u32, u32),
) -> Result<Intrinsics, GeomError> {
    let (x, y, w, h) = crop;
    let bad = |_: ()| GeomError::InvalidCrop {
        x,
        y,
        w,
        h,
        width: k.width,
        height: k.height,
    };
    if !(w > 0.0 && h > 0.0) || out_size.0 == 0 || out_size.1 == 0 {
        return Err(bad(()));
    }
    if x < 0.0 || y < 0.0 || x + w > k.width as f64 || y + h > k.height as f64 {
        return Err(bad(()));
    }
    let sx = out_size.0 as f64 / w;
    let sy = out_size.1 as f64 / h;
    Ok(Intrinsics {
        fx: k.fx * sx,
        fy: k.fy * sy,
        cx: (k.cx - x) * sx,
        cy: (k.cy - y) * sy,
        width: out_size.0,
        height: out_size.1,
    })
}
