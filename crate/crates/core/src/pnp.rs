//! Perspective-n-Point: recover the 6DoF pose from 2D-3D corner
//! correspondences via a normalized DLT initialization refined by
//! Levenberg-Marquardt on a 6-parameter local pose.

use crate::geom::{nearest_rotation, rotation_exp, skew, Intrinsics, Pose};
use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnpError {
    #[error("PnP needs at least {needed} correspondences, got {found}")]
    TooFewPairs { found: usize, needed: usize },
    #[error("degenerate point configuration (design-matrix rank ratio {ratio:.3e})")]
    DegenerateConfiguration { ratio: f64 },
    #[error("only {found} corners reach confidence {min_conf}, need at least 6")]
    InsufficientCorrespondences { found: usize, min_conf: f64 },
    #[error("non-finite residuals during refinement")]
    NumericFailure,
    #[error("correspondence weight {weight} outside [0, 1]")]
    InvalidWeight { weight: f64 },
}

/// 3D-to-2D correspondences with per-pair weights in [0, 1].
#[derive(Debug, Clone)]
pub struct Correspondences {
    pub pairs: Vec<(Vector3<f64>, Vector2<f64>)>,
    pub weights: Vec<f64>,
}

impl Correspondences {
    pub fn new(
        pairs: Vec<(Vector3<f64>, Vector2<f64>)>,
        weights: Vec<f64>,
    ) -> Result<Self, PnpError> {
        assert_eq!(pairs.len(), weights.len(), "one weight per pair");
        for &w in &weights {
            if !(0.0..=1.0).contains(&w) || !w.is_finite() {
                return Err(PnpError::InvalidWeight { weight: w });
            }
        }
        Ok(Correspondences { pairs, weights })
    }

    pub fn uniform(pairs: Vec<(Vector3<f64>, Vector2<f64>)>) -> Self {
        let weights = vec![1.0; pairs.len()];
        Correspondences { pairs, weights }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Direct Linear Transform estimate of the pose.
///
/// Image points are moved to normalized camera coordinates with K⁻¹ and the
/// 3D points are centered/scaled for conditioning. The 3x3 block of the
/// recovered projection is projected to the nearest rotation (det +1); the
/// sign of the solution is chosen so the majority of points have positive
/// depth.
pub fn solve_pnp_dlt(c: &Correspondences, k: &Intrinsics) -> Result<Pose, PnpError> {
    let n = c.len();
    if n < 6 {
        return Err(PnpError::TooFewPairs {
            found: n,
            needed: 6,
        });
    }

    // Condition the 3D points: center on the centroid, scale mean norm to √3.
    let centroid = c
        .pairs
        .iter()
        .map(|(p, _)| p)
        .sum::<Vector3<f64>>()
        / n as f64;
    let mean_norm = c
        .pairs
        .iter()
        .map(|(p, _)| (p - centroid).norm())
        .sum::<f64>()
        / n as f64;
    if mean_norm < 1e-15 {
        return Err(PnpError::DegenerateConfiguration { ratio: 0.0 });
    }
    let scale = 3.0f64.sqrt() / mean_norm;

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (row, ((p, uv), _)) in c.pairs.iter().zip(&c.weights).enumerate() {
        let q = (p - centroid) * scale;
        let xn = (uv.x - k.cx) / k.fx;
        let yn = (uv.y - k.cy) / k.fy;
        let r0 = 2 * row;
        // [Qᵀ 1 0 0 0 0 −x̂Qᵀ −x̂] and [0 0 0 0 Qᵀ 1 −ŷQᵀ −ŷ]
        for j in 0..3 {
            a[(r0, j)] = q[j];
            a[(r0, 8 + j)] = -xn * q[j];
            a[(r0 + 1, 4 + j)] = q[j];
            a[(r0 + 1, 8 + j)] = -yn * q[j];
        }
        a[(r0, 3)] = 1.0;
        a[(r0, 11)] = -xn;
        a[(r0 + 1, 7)] = 1.0;
        a[(r0 + 1, 11)] = -yn;
    }

    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap());
    let s_max = s[order[0]];
    // The exact-data nullspace is 1-dimensional; anything rank-deficient
    // beyond that (11th singular value ~ 0) has no unique solution.
    let ratio = if s_max > 0.0 { s[order[10]] / s_max } else { 0.0 };
    if ratio < 1e-10 {
        return Err(PnpError::DegenerateConfiguration { ratio });
    }
    let v_t = svd.v_t.expect("svd requested v_t");
    let null = v_t.row(order[11]);

    // Reassemble P in the conditioned frame, then undo the conditioning:
    // q = scale·(p − centroid) ⇒ P = [M·scale | t − M·scale·centroid].
    let mut m = Matrix3::zeros();
    let mut t = Vector3::zeros();
    for r in 0..3 {
        for j in 0..3 {
            m[(r, j)] = null[4 * r + j];
        }
        t[r] = null[4 * r + 3];
    }
    let m_full = m * scale;
    let t_full = t - m_full * centroid;

    // Cheirality: flip the sign unless most depths are positive.
    let mut pos = 0usize;
    for (p, _) in &c.pairs {
        let z = m_full.row(2).transpose().dot(p) + t_full.z;
        if z > 0.0 {
            pos += 1;
        }
    }
    let sign = if 2 * pos >= n { 1.0 } else { -1.0 };

    let row_scale = (m_full.row(0).norm() + m_full.row(1).norm() + m_full.row(2).norm()) / 3.0;
    if row_scale < 1e-15 || !row_scale.is_finite() {
        return Err(PnpError::DegenerateConfiguration { ratio });
    }
    let m_scaled = m_full * (sign / row_scale);
    let t_scaled = t_full * (sign / row_scale);

    Ok(Pose {
        rotation: nearest_rotation(&m_scaled),
        translation: t_scaled,
    })
}

/// Weighted RMS reprojection error in pixels (√(Σw‖e‖² / Σw)).
fn weighted_cost(pose: &Pose, c: &Correspondences, k: &Intrinsics) -> f64 {
    let mut sum = 0.0;
    for ((p, uv), &w) in c.pairs.iter().zip(&c.weights) {
        let pc = pose.transform(p);
        let proj = k.project_cam(&pc);
        sum += w * (proj - uv).norm_squared();
    }
    sum
}

fn cost_to_rms(cost: f64, weight_sum: f64) -> f64 {
    if weight_sum > 0.0 {
        (cost / weight_sum).sqrt()
    } else {
        0.0
    }
}

/// Levenberg-Marquardt refinement over (axis-angle ⊕ translation) increments
/// applied on the left: `R ← exp(ω)·R`, `t ← exp(ω)·t + δt`.
///
/// Terminates on relative cost decrease < 1e-12, step norm < 1e-12 or 100
/// iterations; the returned cost never exceeds the initial cost.
pub fn refine_pnp_lm(
    init: &Pose,
    c: &Correspondences,
    k: &Intrinsics,
) -> Result<(Pose, f64), PnpError> {
    let n = c.len();
    if n < 4 {
        return Err(PnpError::TooFewPairs {
            found: n,
            needed: 4,
        });
    }
    let weight_sum: f64 = c.weights.iter().sum();

    let mut pose = init.clone();
    let mut cost = weighted_cost(&pose, c, k);
    if !cost.is_finite() {
        return Err(PnpError::NumericFailure);
    }

    let mut lambda = 1e-3;
    for _ in 0..100 {
        if cost < 1e-30 {
            break;
        }
        // Accumulate the normal equations JᵀJ δ = −Jᵀr.
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let mut finite = true;
        for ((p, uv), &w) in c.pairs.iter().zip(&c.weights) {
            let pc = pose.transform(p);
            let z = pc.z;
            if z.abs() < 1e-12 {
                finite = false;
                break;
            }
            let proj = k.project_cam(&pc);
            let e = proj - uv;
            if !e.x.is_finite() || !e.y.is_finite() {
                finite = false;
                break;
            }
            // dπ/dX_c (2×3) and dX_c/d(ω,δt) = [−[X_c]× | I] (3×6).
            let du = Vector3::new(k.fx / z, 0.0, -k.fx * pc.x / (z * z));
            let dv = Vector3::new(0.0, k.fy / z, -k.fy * pc.y / (z * z));
            let neg_skew = -skew(&pc);
            let ju_rot = du.transpose() * neg_skew;
            let jv_rot = dv.transpose() * neg_skew;
            let mut ju = Vector6::zeros();
            let mut jv = Vector6::zeros();
            for j in 0..3 {
                ju[j] = ju_rot[(0, j)];
                jv[j] = jv_rot[(0, j)];
                ju[3 + j] = du[j];
                jv[3 + j] = dv[j];
            }
            jtj += (ju * ju.transpose() + jv * jv.transpose()) * w;
            jtr += (ju * e.x + jv * e.y) * w;
        }
        if !finite {
            return Err(PnpError::NumericFailure);
        }

        // Damped step; on rejection raise λ and retry within the iteration.
        let mut accepted = false;
        for _ in 0..20 {
            let mut damped = jtj;
            for j in 0..6 {
                damped[(j, j)] += lambda * jtj[(j, j)].max(1e-12);
            }
            let Some(delta) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let rot = rotation_exp(&omega);
            let candidate = Pose {
                rotation: rot * pose.rotation,
                translation: rot * pose.translation + dt,
            };
            let new_cost = weighted_cost(&candidate, c, k);
            if new_cost.is_finite() && new_cost <= cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                pose = candidate;
                cost = new_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-12 || delta.norm() < 1e-12 {
                    // Re-project the rotation to kill accumulated drift.
                    pose.rotation = nearest_rotation(&pose.rotation);
                    let rms = cost_to_rms(weighted_cost(&pose, c, k), weight_sum);
                    return Ok((pose, rms));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    pose.rotation = nearest_rotation(&pose.rotation);
    let rms = cost_to_rms(weighted_cost(&pose, c, k), weight_sum);
    Ok((pose, rms))
}

/// Full corner-based pose recovery: gate corners by confidence, pair them
/// with their 3D box corners (weights = confidence), run DLT then LM.
pub fn estimate_pose(
    corners2d: &crate::heatmap::Corners2D,
    confidence: &[f64; 8],
    bbox: &crate::geom::BoundingBox3D,
    k: &Intrinsics,
    min_conf: f64,
) -> Result<(Pose, f64), PnpError> {
    let mut pairs = Vec::with_capacity(8);
    let mut weights = Vec::with_capacity(8);
    for i in 0..8 {
        if confidence[i] >= min_conf {
            pairs.push((bbox.corners[i], corners2d.points[i]));
            weights.push(confidence[i].clamp(0.0, 1.0));
        }
    }
    if pairs.len() < 6 {
        return Err(PnpError::InsufficientCorrespondences {
            found: pairs.len(),
            min_conf,
        });
    }
    let c = Correspondences { pairs, weights };
    let init = solve_pnp_dlt(&c, k)?;
    refine_pnp_lm(&init, &c, k)
}
