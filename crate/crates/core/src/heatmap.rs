//! Corner heatmap codec: encode projected box corners as per-corner
//! exponential-of-distance maps and decode predicted maps back to sub-pixel
//! corner coordinates with confidences.
//!
//! A heatmap channel stores `H(x, y, i) = exp(-d / (2 sigma^2))` where `d` is
//! the plain (unsquared) Euclidean pixel distance from `(x, y)` to corner `i`.
//! Maps are stored row-major, channel-last, single precision; all codec math
//! runs in double precision.

use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("all corners coincide; object has zero pixel size")]
    ZeroSize,
    #[error("sigma must be positive and finite, got {sigma}")]
    InvalidSigma { sigma: f64 },
    #[error("heatmap buffer has {len} values, expected {expected} ({width}x{height}x8)")]
    ShapeMismatch {
        len: usize,
        expected: usize,
        width: u32,
        height: u32,
    },
    #[error("heatmap value at index {index} is {value}, outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },
}

/// Eight ordered 2D corners plus per-corner visibility (inside image bounds).
/// Ordering matches [`crate::geom::BoundingBox3D`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corners2D {
    pub points: [Vector2<f64>; 8],
    pub visibility: [bool; 8],
}

impl Corners2D {
    /// Visibility derived from containment in a `width` x `height` image.
    pub fn new(points: [Vector2<f64>; 8], width: u32, height: u32) -> Self {
        let visibility = std::array::from_fn(|i| {
            let p = &points[i];
            p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64
        });
        Corners2D { points, visibility }
    }

    pub fn centroid(&self) -> Vector2<f64> {
        self.points.iter().sum::<Vector2<f64>>() / 8.0
    }
}

/// H×W×8 corner heatmap, row-major channel-last:
/// `values[(y * width + x) * 8 + channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerHeatmap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl CornerHeatmap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, HeatmapError> {
        let expected = width as usize * height as usize * 8;
        if values.len() != expected {
            return Err(HeatmapError::ShapeMismatch {
                len: values.len(),
                expected,
                width,
                height,
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(HeatmapError::ValueOutOfRange { index, value });
        }
        Ok(CornerHeatmap {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        CornerHeatmap {
            width,
            height,
            values: vec![0.0; width as usize * height as usize * 8],
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32, channel: usize) -> usize {
        (y as usize * self.width as usize + x as usize) * 8 + channel
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, channel: usize) -> f32 {
        self.values[self.idx(x, y, channel)]
    }
}

/// Object size: mean Euclidean pixel distance from the 8 corners to their
/// centroid. Errors when all corners coincide.
pub fn object_size(corners: &Corners2D) -> Result<f64, HeatmapError> {
    let c = corners.centroid();
    let mean = corners
        .points
        .iter()
        .map(|p| (p - c).norm())
        .sum::<f64>()
        / 8.0;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(HeatmapError::ZeroSize);
    }
    Ok(mean)
}

/// One-tenth of the object size, the default heatmap radius.
pub fn object_sigma(corners: &Corners2D) -> Result<f64, HeatmapError> {
    object_sigma_scaled(corners, 0.1)
}

/// `scale` × object size; `scale` is the CLI's `--sigma-scale`.
pub fn object_sigma_scaled(corners: &Corners2D, scale: f64) -> Result<f64, HeatmapError> {
    Ok(object_size(corners)? * scale)
}

/// Double-precision encoding of the full H×W×8 map (row-major channel-last).
/// Corners outside the image still contribute their tail.
pub fn encode_heatmap_values(
    corners: &Corners2D,
    size: (u32, u32),
    sigma: f64,
) -> Result<Vec<f64>, HeatmapError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(HeatmapError::InvalidSigma { sigma });
    }
    let (height, width) = size;
    let denom = 2.0 * sigma * sigma;
    let mut values = vec![0.0f64; width as usize * height as usize * 8];
    for y in 0..height {
        for x in 0..width {
            let base = (y as usize * width as usize + x as usize) * 8;
            for (i, corner) in corners.points.iter().enumerate() {
                let d = (x as f64 - corner.x).hypot(y as f64 - corner.y);
                values[base + i] = (-d / denom).exp();
            }
        }
    }
    Ok(values)
}

/// Encode with sigma from [`object_sigma`]. `size` is (height, width).
pub fn encode_heatmap(corners: &Corners2D, size: (u32, u32)) -> Result<CornerHeatmap, HeatmapError> {
    let sigma = object_sigma(corners)?;
    encode_heatmap_with_sigma(corners, size, sigma)
}

pub fn encode_heatmap_with_sigma(
    corners: &Corners2D,
    size: (u32, u32),
    sigma: f64,
) -> Result<CornerHeatmap, HeatmapError> {
    let values = encode_heatmap_values(corners, size, sigma)?;
    Ok(CornerHeatmap {
        width: size.1,
        height: size.0,
        values: values.into_iter().map(|v| v as f32).collect(),
    })
}

/// Corner extraction rule. The windowed form is the estimator used by the
/// pipeline; the full-map centroid exists for ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMethod {
    /// Argmax, then a centroid of squared window-min-subtracted values over
    /// a (2r+1)² window around it. Squaring sharpens the centroid enough to
    /// stay sub-quarter-pixel even on very flat peaks (large σ).
    Windowed { radius: u32 },
    /// Raw value-weighted centroid over the whole channel.
    FullMap,
}

/// Window radius of the default decoder (and of the differentiable
/// soft-argmax used in the fine training loss, which must match it).
pub const DECODE_RADIUS: u32 = 3;

impl Default for DecodeMethod {
    fn default() -> Self {
        DecodeMethod::Windowed {
            radius: DECODE_RADIUS,
        }
    }
}

/// Decode with the default 7×7 windowed soft-argmax.
pub fn decode_corners(h: &CornerHeatmap) -> (Corners2D, [f64; 8]) {
    decode_corners_with(h, DecodeMethod::default())
}

/// Per channel: locate the argmax pixel (ties broken by smallest row-major
/// index), then take a sub-pixel soft-argmax around it. Confidence is the
/// peak value. A constant channel (e.g. all-zero) decodes to the image
/// center, flagged not visible.
pub fn decode_corners_with(h: &CornerHeatmap, method: DecodeMethod) -> (Corners2D, [f64; 8]) {
    let w = h.width as usize;
    let ht = h.height as usize;
    let mut points = [Vector2::zeros(); 8];
    let mut visibility = [false; 8];
    let mut confidence = [0.0f64; 8];

    for c in 0..8 {
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        let mut best_idx = 0usize;
        for p in 0..w * ht {
            let v = h.values[p * 8 + c] as f64;
            if v > best {
                best = v;
                best_idx = p;
            }
            if v < worst {
                worst = v;
            }
        }
        confidence[c] = best;

        if best == worst {
            // Constant channel: no information, answer the center by symmetry.
            points[c] = Vector2::new((w as f64 - 1.0) / 2.0, (ht as f64 - 1.0) / 2.0);
            visibility[c] = false;
            continue;
        }

        let (px, py) = (best_idx % w, best_idx / w);
        points[c] = match method {
            DecodeMethod::Windowed { radius } => {
                let r = radius as usize;
                let x0 = px.saturating_sub(r);
                let x1 = (px + r).min(w - 1);
                let y0 = py.saturating_sub(r);
                let y1 = (py + r).min(ht - 1);
                let mut floor = f64::INFINITY;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        floor = floor.min(h.values[(y * w + x) * 8 + c] as f64);
                    }
                }
                let mut wsum = 0.0f64;
                let mut xsum = 0.0f64;
                let mut ysum = 0.0f64;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let d = h.values[(y * w + x) * 8 + c] as f64 - floor;
                        let wgt = d * d;
                        wsum += wgt;
                        xsum += wgt * x as f64;
                        ysum += wgt * y as f64;
                    }
                }
                if wsum > 0.0 {
                    Vector2::new(xsum / wsum, ysum / wsum)
                } else {
                    // Plateau filling the whole window: fall back to the peak.
                    Vector2::new(px as f64, py as f64)
                }
            }
            DecodeMethod::FullMap => {
                let mut wsum = 0.0f64;
                let mut xsum = 0.0f64;
                let mut ysum = 0.0f64;
                for y in 0..ht {
                    for x in 0..w {
                        let wgt = h.values[(y * w + x) * 8 + c] as f64;
                        wsum += wgt;
                        xsum += wgt * x as f64;
                        ysum += wgt * y as f64;
                    }
                }
                if wsum > 0.0 {
                    Vector2::new(xsum / wsum, ysum / wsum)
                } else {
                    Vector2::new(px as f64, py as f64)
                }
            }
        };
        let p = &points[c];
        visibility[c] =
            p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (ht - 1) as f64;
    }

    (
        Corners2D {
            points,
            visibility,
        },
        confidence,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    /// Eight corners on a circle of the given radius (45° apart).
    fn circle_corners(center: (f64, f64), radius: f64) -> Corners2D {
        let points = std::array::from_fn(|i| {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            Vector2::new(center.0 + radius * a.cos(), center.1 + radius * a.sin())
        });
        Corners2D::new(points, 64, 64)
    }

    #[test]
    fn sigma_uniform_circle() {
        let corners = circle_corners((50.0, 50.0), 10.0);
        assert_abs_diff_eq!(object_sigma(&corners).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sigma_square_hand_computed() {
        // 20x20 px square, each corner duplicated: distances to center are
        // all 10*sqrt(2), so sigma = sqrt(2).
        let sq = [
            Vector2::new(10.0, 10.0),
            Vector2::new(30.0, 10.0),
            Vector2::new(30.0, 30.0),
            Vector2::new(10.0, 30.0),
        ];
        let points = std::array::from_fn(|i| sq[i % 4]);
        let corners = Corners2D::new(points, 64, 64);
        assert_abs_diff_eq!(object_sigma(&corners).unwrap(), 1.41421, epsilon = 1e-5);
    }

    #[test]
    fn sigma_scales_with_object() {
        let small = circle_corners((32.0, 32.0), 7.3);
        let big = circle_corners((32.0, 32.0), 14.6);
        assert_abs_diff_eq!(
            object_sigma(&big).unwrap(),
            2.0 * object_sigma(&small).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sigma_rejects_coincident_corners() {
        let points = [Vector2::new(5.0, 5.0); 8];
        let corners = Corners2D::new(points, 64, 64);
        assert!(matches!(
            object_sigma(&corners),
            Err(HeatmapError::ZeroSize)
        ));
    }

    #[test]
    fn encode_peak_is_one_and_analytic_point() {
        let mut points = circle_corners((30.0, 30.0), 10.0).points;
        points[0] = Vector2::new(30.0, 40.0);
        let corners = Corners2D::new(points, 64, 64);
        // sigma = 1 by construction below; distance 2*sigma^2 = 2 -> e^-1.
        let h = encode_heatmap_with_sigma(&corners, (64, 64), 1.0).unwrap();
        assert_eq!(h.get(30, 40, 0), 1.0);
        let v = encode_heatmap_values(&corners, (64, 64), 1.0).unwrap();
        let at = |x: usize, y: usize, c: usize| v[(y * 64 + x) * 8 + c];
        assert_abs_diff_eq!(at(32, 40, 0), (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn encode_matches_pointwise_formula() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let points = std::array::from_fn(|_| {
            Vector2::new(rng.random_range(5.0..59.0), rng.random_range(5.0..59.0))
        });
        let corners = Corners2D::new(points, 64, 64);
        let sigma = object_sigma(&corners).unwrap();
        let v = encode_heatmap_values(&corners, (64, 64), sigma).unwrap();
        for y in 0..64usize {
            for x in 0..64usize {
                for c in 0..8 {
                    let dx = x as f64 - corners.points[c].x;
                    let dy = y as f64 - corners.points[c].y;
                    let d = (dx * dx + dy * dy).sqrt();
                    let want = (-d / (2.0 * sigma * sigma)).exp();
                    assert!((v[(y * 64 + x) * 8 + c] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decode_single_pixel_spike() {
        let mut h = CornerHeatmap::zeros(64, 64);
        let i = h.idx(10, 20, 3);
        h.values[i] = 1.0;
        let (corners, conf) = decode_corners(&h);
        assert_eq!(corners.points[3], Vector2::new(10.0, 20.0));
        assert_eq!(conf[3], 1.0);
        assert!(corners.visibility[3]);
    }

    #[test]
    fn decode_degenerate_channels() {
        // All-zero: zero confidence, image center, not visible.
        let h = CornerHeatmap::zeros(64, 64);
        let (corners, conf) = decode_corners(&h);
        for c in 0..8 {
            assert_eq!(corners.points[c], Vector2::new(31.5, 31.5));
            assert_eq!(conf[c], 0.0);
            assert!(!corners.visibility[c]);
        }
        // Uniform non-zero: center by symmetry, still not visible.
        let h = CornerHeatmap::new(32, 16, vec![0.7; 32 * 16 * 8]).unwrap();
        let (corners, conf) = decode_corners(&h);
        assert_eq!(corners.points[0], Vector2::new(15.5, 7.5));
        assert_abs_diff_eq!(conf[0], 0.7, epsilon = 1e-7);
        assert!(!corners.visibility[0]);
    }

    #[test]
    fn decode_tie_breaks_row_major() {
        let mut h = CornerHeatmap::zeros(16, 16);
        // Two identical, well-separated spikes; the smaller row-major index wins.
        let a = h.idx(9, 2, 0);
        let b = h.idx(3, 12, 0);
        h.values[a] = 0.8;
        h.values[b] = 0.8;
        let (corners, _) = decode_corners(&h);
        assert_eq!(corners.points[0], Vector2::new(9.0, 2.0));
    }

    #[test]
    fn round_trip_subpixel() {
        let mut points = circle_corners((32.0, 32.0), 15.0).points;
        points[0] = Vector2::new(32.40, 17.75);
        let corners = Corners2D::new(points, 64, 64);
        let sigma = object_sigma(&corners).unwrap().max(1.5);
        let h = encode_heatmap_with_sigma(&corners, (64, 64), sigma).unwrap();
        let (decoded, conf) = decode_corners(&h);
        for c in 0..8 {
            assert!((decoded.points[c].x - corners.points[c].x).abs() < 0.25);
            assert!((decoded.points[c].y - corners.points[c].y).abs() < 0.25);
            assert!(conf[c] > 0.5);
        }
    }

    #[test]
    fn translation_equivariance_exact() {
        let base = circle_corners((28.0, 26.0), 9.0);
        let (dx, dy) = (5i64, 7i64);
        let shifted = Corners2D::new(
            std::array::from_fn(|i| base.points[i] + Vector2::new(dx as f64, dy as f64)),
            64,
            64,
        );
        let sigma = 2.0;
        let a = encode_heatmap_with_sigma(&base, (64, 64), sigma).unwrap();
        let b = encode_heatmap_with_sigma(&shifted, (64, 64), sigma).unwrap();
        // On the overlap the shifted map must equal the original bitwise:
        // integer shifts leave the pixel-to-corner distances unchanged.
        for y in 0..64i64 {
            for x in 0..64i64 {
                let (sx, sy) = (x + dx, y + dy);
                if sx < 0 || sy < 0 || sx >= 64 || sy >= 64 {
                    continue;
                }
                for c in 0..8 {
                    assert_eq!(
                        a.get(x as u32, y as u32, c),
                        b.get(sx as u32, sy as u32, c)
                    );
                }
            }
        }
    }

    #[test]
    fn monotone_decay_along_rays() {
        let corners = circle_corners((32.0, 32.0), 12.0);
        let h = encode_heatmap_with_sigma(&corners, (64, 64), 2.5).unwrap();
        // March axis-aligned rays away from corner 0's nearest pixel.
        let cx = corners.points[0].x.round() as i64;
        let cy = corners.points[0].y.round() as i64;
        for (stepx, stepy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)] {
            let mut prev = f32::INFINITY;
            let (mut x, mut y) = (cx, cy);
            while x >= 0 && y >= 0 && x < 64 && y < 64 {
                let v = h.get(x as u32, y as u32, 0);
                assert!(v <= prev + 1e-7);
                prev = v;
                x += stepx;
                y += stepy;
            }
        }
    }

    #[test]
    fn heatmap_validation() {
        assert!(matches!(
            CornerHeatmap::new(8, 8, vec![0.0; 10]),
            Err(HeatmapError::ShapeMismatch { .. })
        ));
        let mut vals = vec![0.0f32; 8 * 8 * 8];
        vals[17] = 1.5;
        assert!(matches!(
            CornerHeatmap::new(8, 8, vals),
            Err(HeatmapError::ValueOutOfRange { index: 17, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Round-trip within 0.25 px for corners ≥ 3σ from the border,
        /// σ ∈ [1.5, 8].
        #[test]
        fn round_trip_property(seed in 0u64..10_000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let sigma = rng.random_range(1.5..8.0);
            let margin = 3.0 * sigma;
            let points = std::array::from_fn(|_| {
                Vector2::new(
                    rng.random_range(margin..(63.0 - margin)),
                    rng.random_range(margin..(63.0 - margin)),
                )
            });
            let corners = Corners2D::new(points, 64, 64);
            let h = encode_heatmap_with_sigma(&corners, (64, 64), sigma).unwrap();
            let (decoded, _) = decode_corners(&h);
            for c in 0..8 {
                prop_assert!((decoded.points[c].x - points[c].x).abs() < 0.25);
                prop_assert!((decoded.points[c].y - points[c].y).abs() < 0.25);
            }
        }

        /// Argmax selection (and with it the decoded location) is invariant
        /// to positive channel scaling.
        #[test]
        fn decode_scale_invariance(seed in 0u64..1000, scale in 0.05f32..1.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let points = std::array::from_fn(|_| {
                Vector2::new(rng.random_range(8.0..56.0), rng.random_range(8.0..56.0))
            });
            let corners = Corners2D::new(points, 64, 64);
            let h = encode_heatmap_with_sigma(&corners, (64, 64), 2.0).unwrap();
            let mut scaled = h.clone();
            for v in scaled.values.iter_mut() {
                *v *= scale;
            }
            let (a, _) = decode_corners(&h);
            let (b, _) = decode_corners(&scaled);
            for c in 0..8 {
                prop_assert!((a.points[c] - b.points[c]).norm() < 1e-4);
            }
        }
    }
}
