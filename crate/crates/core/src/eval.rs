//! Pose-error metrics (ADD, ADD-S, Proj2D), threshold and AUC scoring, and
//! reference-view selection (farthest point sampling and feature neighbors).

use nalgebra::Vector3;
use thiserror::Error;

use crate::geom::{GeomError, Intrinsics, PointCloud, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("metric over an empty point cloud")]
    EmptyPoints,
    #[error("auc over an empty error list")]
    EmptyErrors,
    #[error("max threshold {0} must be positive")]
    BadThreshold(f64),
    #[error("selection count {k} outside 1..={n}")]
    BadCount { k: usize, n: usize },
    #[error("zero-norm feature vector at index {0}")]
    ZeroNormFeature(usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Mean distance between correspondingly transformed model points.
pub fn add_metric(gt: &Pose, pred: &Pose, points: &PointCloud) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPoints);
    }
    let sum: f64 = points
        .points
        .iter()
        .map(|p| (gt.transform(p) - pred.transform(p)).norm())
        .sum();
    Ok(sum / points.len() as f64)
}

/// Symmetric variant: mean over gt-transformed points of the distance to the
/// nearest pred-transformed point (O(n²)).
pub fn adds_metric(gt: &Pose, pred: &Pose, points: &PointCloud) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPoints);
    }
    let pred_pts: Vec<Vector3<f64>> = points.points.iter().map(|p| pred.transform(p)).collect();
    let sum: f64 = points
        .points
        .iter()
        .map(|p| {
            let g = gt.transform(p);
            pred_pts
                .iter()
                .map(|q| (g - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(sum / points.len() as f64)
}

/// Mean pixel distance between the two projections of each model point.
pub fn proj2d_metric(
    gt: &Pose,
    pred: &Pose,
    points: &PointCloud,
    k: &Intrinsics,
) -> Result<f64, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPoints);
    }
    let mut sum = 0.0;
    for p in &points.points {
        let a = crate::geom::project_point(gt, k, p)?;
        let b = crate::geom::project_point(pred, k, p)?;
        sum += (a - b).norm();
    }
    Ok(sum / points.len() as f64)
}

/// Normalized area under the accuracy-vs-threshold curve on [0, max_threshold],
/// computed in closed form: (1/n)·Σ max(0, 1 − eᵢ/T).
pub fn auc(errors: &[f64], max_threshold: f64) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyErrors);
    }
    if !(max_threshold > 0.0) {
        return Err(EvalError::BadThreshold(max_threshold));
    }
    let sum: f64 = errors
        .iter()
        .map(|&e| (1.0 - e / max_threshold).max(0.0))
        .sum();
    Ok(sum / errors.len() as f64)
}

/// Greedy farthest point sampling over camera optical centers c = −Rᵀt.
/// Seeded at index 0; ties broken by lowest index.
pub fn fps_sample(poses: &[Pose], k: usize) -> Result<Vec<usize>, EvalError> {
    if k == 0 || k > poses.len() {
        return Err(EvalError::BadCount { k, n: poses.len() });
    }
    let centers: Vec<Vector3<f64>> = poses.iter().map(|p| p.camera_center()).collect();
    let mut chosen = vec![0usize];
    let mut min_dist: Vec<f64> = centers.iter().map(|c| (c - centers[0]).norm()).collect();
    while chosen.len() < k {
        let mut best = 0usize;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_dist {
                best_dist = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, c) in centers.iter().enumerate() {
            let d = (c - centers[best]).norm();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Top-k reference indices by cosine similarity to the query feature,
/// descending; ties broken by lowest index.
pub fn select_neighbors(
    query_feat: &[f32],
    ref_feats: &[Vec<f32>],
    k: usize,
) -> Result<Vec<usize>, EvalError> {
    if k == 0 || k > ref_feats.len() {
        return Err(EvalError::BadCount {
            k,
            n: ref_feats.len(),
        });
    }
    let norm = |v: &[f32]| (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt();
    let qn = norm(query_feat);
    if qn == 0.0 {
        return Err(EvalError::ZeroNormFeature(usize::MAX));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(ref_feats.len());
    for (i, f) in ref_feats.iter().enumerate() {
        let fnorm = norm(f);
        if fnorm == 0.0 {
            return Err(EvalError::ZeroNormFeature(i));
        }
        let dot: f64 = query_feat
            .iter()
            .zip(f)
            .map(|(&a, &b)| (a as f64) * (b as f64))
            .sum();
        scored.push((i, dot / (qn * fnorm)));
    }
    // Stable sort by descending similarity keeps lowest-index-first ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(scored.iter().take(k).map(|&(i, _)| i).collect())
}

/// Per-scene metric row. `symmetric` selects which distance feeds the
/// combined ADD(s) threshold test.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneScore {
    pub scene_id: String,
    pub add: f64,
    pub adds: f64,
    pub proj2d: f64,
    pub diameter: f64,
    pub symmetric: bool,
}

impl SceneScore {
    pub fn add_ok(&self) -> bool {
        self.add < 0.1 * self.diameter
    }

    pub fn adds_ok(&self) -> bool {
        self.adds < 0.1 * self.diameter
    }

    /// ADD(s): the symmetric metric for symmetric objects, ADD otherwise.
    pub fn addsym_ok(&self) -> bool {
        if self.symmetric {
            self.adds_ok()
        } else {
            self.add_ok()
        }
    }

    pub fn proj_ok(&self) -> bool {
        self.proj2d < 5.0
    }
}

/// Aggregated metrics over a scene set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scores: Vec<SceneScore>,
    pub add_01d: f64,
    pub adds_01d: f64,
    pub addsym_01d: f64,
    pub proj2d_5px: f64,
    pub add_auc: f64,
    pub adds_auc: f64,
}

/// AUC integration limit, metres (the usual benchmark convention).
pub const AUC_MAX_METERS: f64 = 0.10;

impl MetricReport {
    pub fn from_scores(scores: Vec<SceneScore>) -> Result<Self, EvalError> {
        if scores.is_empty() {
            return Err(EvalError::EmptyErrors);
        }
        let n = scores.len() as f64;
        let rate = |f: &dyn Fn(&SceneScore) -> bool| {
            scores.iter().filter(|s| f(s)).count() as f64 / n
        };
        let adds: Vec<f64> = scores.iter().map(|s| s.adds).collect();
        let add: Vec<f64> = scores.iter().map(|s| s.add).collect();
        Ok(MetricReport {
            add_01d: rate(&SceneScore::add_ok),
            adds_01d: rate(&SceneScore::adds_ok),
            addsym_01d: rate(&SceneScore::addsym_ok),
            proj2d_5px: rate(&SceneScore::proj_ok),
            add_auc: auc(&add, AUC_MAX_METERS)?,
            adds_auc: auc(&adds, AUC_MAX_METERS)?,
            scores,
        })
    }

    /// Flat text table: one row per scene, aggregate footer.
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "scene_id add adds proj2d add_ok adds_ok addsym_ok proj_ok\n",
        );
        for s in &self.scores {
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                s.scene_id,
                s.add,
                s.adds,
                s.proj2d,
                s.add_ok() as u8,
                s.adds_ok() as u8,
                s.addsym_ok() as u8,
                s.proj_ok() as u8,
            ));
        }
        out.push_str(&format!(
            "aggregate add_0.1d={} adds_0.1d={} addsym_0.1d={} proj2d@5px={} add_auc={} adds_auc={}\n",
            self.add_01d, self.adds_01d, self.addsym_01d, self.proj2d_5px, self.add_auc, self.adds_auc,
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_exp;
    use nalgebra::{Matrix3, Vector2};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_pose(rg: &mut ChaCha20Rng) -> Pose {
        let axis = loop {
            let v = Vector3::new(
                rg.random_range(-1.0..1.0),
                rg.random_range(-1.0..1.0),
                rg.random_range(-1.0..1.0),
            );
            if v.norm() > 1e-3 {
                break v.normalize();
            }
        };
        let angle: f64 = rg.random_range(-3.0..3.0);
        let t = Vector3::new(
            rg.random_range(-0.2..0.2),
            rg.random_range(-0.2..0.2),
            rg.random_range(0.8..1.5),
        );
        Pose::new(rotation_exp(&(axis * angle)), t).unwrap()
    }

    fn random_cloud(rg: &mut ChaCha20Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vector3::new(
                        rg.random_range(-0.1..0.1),
                        rg.random_range(-0.1..0.1),
                        rg.random_range(-0.1..0.1),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn add_exact_cases() {
        let mut rg = rng(1);
        let gt = random_pose(&mut rg);
        let cloud = random_cloud(&mut rg, 50);
        assert_eq!(add_metric(&gt, &gt, &cloud).unwrap(), 0.0);
        let mut shifted = gt.clone();
        shifted.translation.x += 0.01;
        let e = add_metric(&gt, &shifted, &cloud).unwrap();
        assert!((e - 0.01).abs() < 1e-15);
        assert_eq!(
            add_metric(&gt, &gt, &PointCloud::new(vec![])),
            Err(EvalError::EmptyPoints)
        );
    }

    #[test]
    fn add_matches_loop_oracle() {
        let mut rg = rng(2);
        for _ in 0..20 {
            let gt = random_pose(&mut rg);
            let pred = random_pose(&mut rg);
            let cloud = random_cloud(&mut rg, 200);
            let fast = add_metric(&gt, &pred, &cloud).unwrap();
            let mut acc = 0.0;
            for p in &cloud.points {
                let a = gt.rotation * p + gt.translation;
                let b = pred.rotation * p + pred.translation;
                acc += (a - b).norm();
            }
            assert!((fast - acc / 200.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adds_zero_under_square_symmetry() {
        // A square-face corner set maps to itself under a 90° rotation about
        // the face normal, so the symmetric metric vanishes.
        let corners: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                Vector3::new(
                    if i & 4 != 0 { 0.05 } else { -0.05 },
                    if i & 2 != 0 { 0.05 } else { -0.05 },
                    if i & 1 != 0 { 0.09 } else { -0.09 },
                )
            })
            .collect();
        let cloud = PointCloud::new(corners);
        let gt = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let quarter =
            rotation_exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let pred = Pose::new(quarter, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(adds_metric(&gt, &pred, &cloud).unwrap() < 1e-12);
        assert!(add_metric(&gt, &pred, &cloud).unwrap() > 0.05);
    }

    #[test]
    fn adds_matches_brute_force_and_bounds_add() {
        let mut rg = rng(3);
        for _ in 0..30 {
            let gt = random_pose(&mut rg);
            let pred = random_pose(&mut rg);
            let cloud = random_cloud(&mut rg, 60);
            let fast = adds_metric(&gt, &pred, &cloud).unwrap();
            // Brute force.
            let mut acc = 0.0;
            for p in &cloud.points {
                let g = gt.transform(p);
                let mut best = f64::INFINITY;
                for q in &cloud.points {
                    let d = (g - pred.transform(q)).norm();
                    if d < best {
                        best = d;
                    }
                }
                acc += best;
            }
            assert_eq!(fast, acc / 60.0);
            assert!(add_metric(&gt, &pred, &cloud).unwrap() >= fast - 1e-15);
        }
    }

    #[test]
    fn proj2d_oracles() {
        let mut rg = rng(4);
        let k = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        };
        let gt = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(
            proj2d_metric(&gt, &gt, &random_cloud(&mut rg, 10), &k).unwrap(),
            0.0
        );

        // Lateral shift of a centered point at depth z moves the projection
        // by fx·dx/z.
        let cloud = PointCloud::new(vec![Vector3::zeros()]);
        let mut pred = gt.clone();
        pred.translation.x += 0.01;
        let e = proj2d_metric(&gt, &pred, &cloud, &k).unwrap();
        assert!((e - 100.0 * 0.01 / 1.0).abs() < 1e-12);

        // Loop oracle on a random case.
        let gt2 = random_pose(&mut rg);
        let pred2 = random_pose(&mut rg);
        let cloud2 = random_cloud(&mut rg, 100);
        let fast = proj2d_metric(&gt2, &pred2, &cloud2, &k).unwrap();
        let mut acc = 0.0;
        for p in &cloud2.points {
            let a = gt2.transform(p);
            let b = pred2.transform(p);
            let pa = Vector2::new(k.fx * a.x / a.z + k.cx, k.fy * a.y / a.z + k.cy);
            let pb = Vector2::new(k.fx * b.x / b.z + k.cx, k.fy * b.y / b.z + k.cy);
            acc += (pa - pb).norm();
        }
        assert!((fast - acc / 100.0).abs() < 1e-12);

        // Behind-camera points surface as an error.
        let behind = PointCloud::new(vec![Vector3::new(0.0, 0.0, -2.0)]);
        assert!(matches!(
            proj2d_metric(&gt, &gt, &behind, &k),
            Err(EvalError::Geom(_))
        ));
    }

    #[test]
    fn auc_closed_form_against_grid() {
        assert_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 1.0);
        assert_eq!(auc(&[0.2, 0.5], 0.1).unwrap(), 0.0);
        assert!(auc(&[], 0.1).is_err());
        assert!(auc(&[0.1], 0.0).is_err());
        // Infinite errors (failed scenes) contribute zero area.
        assert_eq!(auc(&[f64::INFINITY, 0.0], 0.1).unwrap(), 0.5);

        let mut rg = rng(5);
        for _ in 0..5 {
            let errors: Vec<f64> = (0..40).map(|_| rg.random_range(0.0..0.15)).collect();
            let exact = auc(&errors, 0.1).unwrap();
            // Dense step-function integration.
            let grid = 1_000_000usize;
            let mut acc = 0.0f64;
            for g in 0..grid {
                let t = 0.1 * (g as f64 + 0.5) / grid as f64;
                acc += errors.iter().filter(|&&e| e <= t).count() as f64
                    / errors.len() as f64;
            }
            let numeric = acc / grid as f64;
            assert!(
                (exact - numeric).abs() < 1e-6,
                "exact {exact} vs grid {numeric}"
            );
        }
    }

    #[test]
    fn fps_basic_and_oracle() {
        // k = 1 → seed only.
        let mut rg = rng(6);
        let poses: Vec<Pose> = (0..6).map(|_| random_pose(&mut rg)).collect();
        assert_eq!(fps_sample(&poses, 1).unwrap(), vec![0]);
        assert!(fps_sample(&poses, 0).is_err());
        assert!(fps_sample(&poses, 7).is_err());

        // Collinear centers at x = 0, 1, 10 → seed plus the far end.
        let mk = |x: f64| {
            Pose::new(Matrix3::identity(), Vector3::new(-x, 0.0, 0.0)).unwrap()
        };
        let line = vec![mk(0.0), mk(1.0), mk(10.0)];
        assert_eq!(fps_sample(&line, 2).unwrap(), vec![0, 2]);

        // Greedy oracle with explicit tie-breaking.
        for trial in 0..20 {
            let mut rg = rng(100 + trial);
            let poses: Vec<Pose> = (0..50).map(|_| random_pose(&mut rg)).collect();
            let centers: Vec<Vector3<f64>> =
                poses.iter().map(|p| p.camera_center()).collect();
            let k = 10;
            let mut chosen = vec![0usize];
            while chosen.len() < k {
                let mut best = usize::MAX;
                let mut best_d = f64::NEG_INFINITY;
                for i in 0..poses.len() {
                    let d = chosen
                        .iter()
                        .map(|&j| (centers[i] - centers[j]).norm())
                        .fold(f64::INFINITY, f64::min);
                    if d > best_d {
                        best_d = d;
                        best = i;
                    }
                }
                chosen.push(best);
            }
            assert_eq!(fps_sample(&poses, k).unwrap(), chosen);
        }
    }

    #[test]
    fn fps_no_duplicates_and_contains_seed() {
        let mut rg = rng(8);
        let poses: Vec<Pose> = (0..20).map(|_| random_pose(&mut rg)).collect();
        for k in 1..=20 {
            let sel = fps_sample(&poses, k).unwrap();
            assert_eq!(sel.len(), k);
            assert!(sel.contains(&0));
            let mut sorted = sel.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), k, "duplicate index in {sel:?}");
        }
    }

    #[test]
    fn neighbor_selection_oracle_and_errors() {
        let q = vec![1.0f32, 0.0, 0.0];
        let refs = vec![
            vec![0.0f32, 1.0, 0.0], // orthogonal
            vec![2.0f32, 0.0, 0.0], // identical direction
            vec![1.0f32, 1.0, 0.0],
        ];
        let sel = select_neighbors(&q, &refs, 3).unwrap();
        assert_eq!(sel, vec![1, 2, 0]);
        assert!(select_neighbors(&q, &refs, 0).is_err());
        assert!(matches!(
            select_neighbors(&q, &[vec![0.0f32; 3]], 1),
            Err(EvalError::ZeroNormFeature(0))
        ));

        // Brute-force sort oracle on random features.
        let mut rg = rng(9);
        let q: Vec<f32> = (0..16).map(|_| rg.random_range(-1.0..1.0f32)).collect();
        let refs: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..16).map(|_| rg.random_range(-1.0..1.0f32)).collect())
            .collect();
        let sel = select_neighbors(&q, &refs, 5).unwrap();
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&a, &b| cos(&q, &refs[b]).partial_cmp(&cos(&q, &refs[a])).unwrap());
        assert_eq!(sel, order[..5].to_vec());
    }

    #[test]
    fn metric_report_rates_and_text() {
        let mk = |id: &str, add: f64, adds: f64, proj: f64, sym: bool| SceneScore {
            scene_id: id.into(),
            add,
            adds,
            proj2d: proj,
            diameter: 0.2,
            symmetric: sym,
        };
        let scores = vec![
            mk("a", 0.01, 0.01, 2.0, false), // all pass
            mk("b", 0.05, 0.01, 9.0, true),  // add fails, adds passes (symmetric)
            mk("c", f64::INFINITY, f64::INFINITY, f64::INFINITY, false), // failure row
        ];
        let report = MetricReport::from_scores(scores).unwrap();
        assert!((report.add_01d - 1.0 / 3.0).abs() < 1e-15);
        assert!((report.adds_01d - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.addsym_01d - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.proj2d_5px - 1.0 / 3.0).abs() < 1e-15);
        let text = report.to_text();
        assert!(text.starts_with("scene_id add adds proj2d"));
        assert!(text.contains("\na 0.01 0.01 2 1 1 1 1\n"));
        assert!(text.trim_end().ends_with(&format!(
            "adds_auc={}",
            report.adds_auc
        )));
        assert_eq!(text.lines().count(), 1 + 3 + 1);
    }
}
