//! End-to-end commands behind the CLI: dataset generation, training,
//! evaluation, single-scene inference, and wireframe overlay rendering.
//! Everything is deterministic under a fixed seed.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::eval::{
    add_metric, adds_metric, fps_sample, proj2d_metric, select_neighbors, EvalError,
    MetricReport, SceneScore,
};
use crate::gen::{generate_scene, GenConfig, Scene};
use crate::geom::{BoundingBox3D, GeomError, Intrinsics, Pose};
use crate::heatmap::{decode_corners, Corners2D, CornerHeatmap, HeatmapError};
use crate::image::Image;
use crate::io::{
    load_checkpoint, load_scene, read_manifest, save_checkpoint, save_scene, scene_dir_name,
    write_manifest, IoError,
};
use crate::nn::{forward, pooled_feature, ModelConfig, ModelParams, NnError};
use crate::pnp::{estimate_pose, PnpError};
use crate::train::{
    augment_sample, encode_view_heatmap, occlude_image, train_step, OptimState, StepRecord,
    TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged at step {step}; kept the step-{kept} checkpoint")]
    Diverged { step: usize, kept: usize },
}

impl PipelineError {
    /// Process exit code: 2 for data/config problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io(_) | PipelineError::Invalid(_) | PipelineError::Heatmap(_) => 2,
            PipelineError::Eval(_) => 2,
            PipelineError::Nn(NnError::NonFiniteLoss) => 3,
            PipelineError::Nn(_) => 2,
            PipelineError::Train(TrainError::Nn(NnError::NonFiniteLoss)) => 3,
            PipelineError::Train(_) => 2,
            PipelineError::Pnp(_) | PipelineError::Geom(_) | PipelineError::Diverged { .. } => 3,
        }
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(msg.into())
}

fn file_error(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io(IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Generate `count` scenes under `out`. Scene `i` draws from stream `i` of a
/// ChaCha20 generator keyed by `seed`, so datasets are reproducible per
/// (seed, index) and insertion-order independent.
pub fn cmd_gen(
    out: &Path,
    count: usize,
    seed: u64,
    gcfg: &GenConfig,
) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(|e| file_error(out, e))?;
    let mut names = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        let scene = generate_scene(&mut rng, gcfg);
        let name = scene_dir_name(index);
        save_scene(&out.join(&name), &scene)?;
        names.push(name);
    }
    write_manifest(out, &names)?;
    Ok(())
}

/// Train on a generated dataset and write the final checkpoint to `out`.
/// Batches sample scenes (with replacement) and augment them; one generator
/// keyed by the training seed drives sampling, augmentation, and reference
/// subset draws. If the loss or any parameter turns non-finite, the most
/// recent finite checkpoint is written and the run aborts.
pub fn cmd_train(
    data: &Path,
    out: &Path,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<(), PipelineError> {
    mcfg.validate()?;
    let names = read_manifest(data)?;
    if names.is_empty() {
        return Err(invalid(format!("{}: dataset is empty", data.display())));
    }
    let mut params = ModelParams::<f32>::init(mcfg, tcfg.seed);
    let mut opt = OptimState::new(&params);
    let mut rng = ChaCha20Rng::seed_from_u64(tcfg.seed);
    let mut last_good = params.clone();
    let mut last_good_step = 0usize;
    for step in 0..tcfg.steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let name = &names[rng.random_range(0..names.len())];
            let scene = load_scene(&data.join(name))?;
            batch.push(augment_sample(&scene, &tcfg.augment, &mut rng));
        }
        match train_step(&batch, &mut params, &mut opt, tcfg, mcfg, &mut rng) {
            Ok(record) if params.all_finite() => {
                last_good.clone_from(&params);
                last_good_step = step + 1;
                log(&record);
            }
            Ok(_) | Err(TrainError::Nn(NnError::NonFiniteLoss)) => {
                save_checkpoint(out, mcfg, &last_good)?;
                return Err(PipelineError::Diverged {
                    step,
                    kept: last_good_step,
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    save_checkpoint(out, mcfg, &params)?;
    Ok(())
}

/// Reference-view selection strategy for evaluation and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Farthest point sampling over reference camera centers.
    Fps,
    /// Top-k cosine similarity of mean-pooled patch-embedding features.
    Neighbors,
    /// Every stored reference (must fit the model's reference range).
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub n_refs: usize,
    pub selection: Selection,
    /// Skip the network: encode the ground-truth heatmap and run the
    /// geometry-only pipeline (decode → PnP → metrics).
    pub gt_bypass: bool,
    /// Fraction of the query mask to cover with random occluders (0 = none).
    pub occlusion: f64,
    /// Minimum decoded-corner confidence fed to PnP.
    pub min_conf: f64,
    /// Reference-conditioning heatmap spread; must match the value the model
    /// was trained with (see `TrainConfig::sigma_scale`).
    pub sigma_scale: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_refs: 5,
            selection: Selection::Fps,
            gt_bypass: false,
            occlusion: 0.0,
            min_conf: 0.3,
            sigma_scale: 0.25,
            seed: 0,
        }
    }
}

/// Pick reference indices for one scene. `Neighbors` needs the model to embed
/// the query and reference images.
fn select_refs(
    scene: &Scene,
    query: &Image,
    model: Option<&(ModelConfig, ModelParams<f32>)>,
    opts: &EvalOptions,
) -> Result<Vec<usize>, PipelineError> {
    let available = scene.references.len();
    if opts.n_refs == 0 {
        return Err(invalid("n_refs must be at least 1"));
    }
    if opts.n_refs > available && opts.selection != Selection::All {
        return Err(invalid(format!(
            "requested {} references, scene stores {available}",
            opts.n_refs
        )));
    }
    match opts.selection {
        Selection::All => Ok((0..available).collect()),
        Selection::Fps => {
            let poses: Vec<Pose> = scene.references.iter().map(|r| r.pose.clone()).collect();
            Ok(fps_sample(&poses, opts.n_refs)?)
        }
        Selection::Neighbors => {
            let (mcfg, params) = model
                .ok_or_else(|| invalid("neighbor selection requires a model checkpoint"))?;
            let qf = pooled_feature(query, params, mcfg)?;
            let feats = scene
                .references
                .iter()
                .map(|r| pooled_feature(&r.image, params, mcfg))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(select_neighbors(&qf, &feats, opts.n_refs)?)
        }
    }
}

/// Run the network on one scene: encode reference heatmaps from the stored
/// box, forward, and return the predicted query heatmap.
pub fn predict_heatmap(
    scene: &Scene,
    query: &Image,
    ref_indices: &[usize],
    mcfg: &ModelConfig,
    params: &ModelParams<f32>,
    sigma_scale: f64,
) -> Result<CornerHeatmap, PipelineError> {
    let size = (mcfg.img_height as u32, mcfg.img_width as u32);
    let mut heatmaps = Vec::with_capacity(ref_indices.len());
    for &ri in ref_indices {
        let view = scene
            .references
            .get(ri)
            .ok_or_else(|| invalid(format!("reference index {ri} out of range")))?;
        let projected =
            crate::geom::project_corners(&view.pose, &view.intrinsics, &scene.bbox)?;
        let corners = Corners2D::new(projected, view.intrinsics.width, view.intrinsics.height);
        heatmaps.push(encode_view_heatmap(&corners, size, sigma_scale)?);
    }
    let refs: Vec<(&Image, &CornerHeatmap)> = ref_indices
        .iter()
        .zip(&heatmaps)
        .map(|(&ri, hm)| (&scene.references[ri].image, hm))
        .collect();
    Ok(forward(&refs, query, params, mcfg)?)
}

/// Decoded corners scored against one scene's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub score: SceneScore,
    /// Mean decoded-corner distance to the ground-truth projections, pixels.
    pub corner_px: f64,
    /// Estimated pose and its rms reprojection error, if PnP succeeded.
    pub pose: Option<(Pose, f64)>,
}

/// Evaluate one scene. Pose failures are scored as infinite error, never
/// propagated.
fn eval_scene(
    index: usize,
    scene_id: &str,
    scene: &Scene,
    model: Option<&(ModelConfig, ModelParams<f32>)>,
    opts: &EvalOptions,
) -> Result<SceneEval, PipelineError> {
    let k = scene.query.intrinsics;
    let mut query = scene.query.image.clone();
    if opts.occlusion > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
        rng.set_stream(index as u64);
        occlude_image(&mut query, &scene.query.mask, opts.occlusion, &mut rng);
    }

    let heatmap = if opts.gt_bypass {
        encode_view_heatmap(&scene.gt_corners, (k.height, k.width), opts.sigma_scale)?
    } else {
        let (mcfg, params) = model.ok_or_else(|| invalid("a model checkpoint is required"))?;
        let indices = select_refs(scene, &query, model, opts)?;
        predict_heatmap(scene, &query, &indices, mcfg, params, opts.sigma_scale)?
    };

    let (corners, confidence) = decode_corners(&heatmap);
    let corner_px = corners
        .points
        .iter()
        .zip(&scene.gt_corners.points)
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / 8.0;

    let estimated = estimate_pose(&corners, &confidence, &scene.bbox, &k, opts.min_conf).ok();
    let (add, adds, proj2d) = match &estimated {
        Some((pose, _)) => (
            add_metric(&scene.query.pose, pose, &scene.cloud)?,
            adds_metric(&scene.query.pose, pose, &scene.cloud)?,
            proj2d_metric(&scene.query.pose, pose, &scene.cloud, &k)
                .unwrap_or(f64::INFINITY),
        ),
        None => (f64::INFINITY, f64::INFINITY, f64::INFINITY),
    };
    Ok(SceneEval {
        score: SceneScore {
            scene_id: scene_id.to_string(),
            add,
            adds,
            proj2d,
            diameter: scene.diameter,
            symmetric: scene.symmetric,
        },
        corner_px,
        pose: estimated,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    /// Per-scene mean decoded-corner error, parallel to `report.scores`.
    pub corner_px: Vec<f64>,
    pub median_corner_px: f64,
}

impl EvalOutcome {
    /// Report table plus the corner-error summary line.
    pub fn to_text(&self) -> String {
        format!(
            "{}median_corner_px {}\n",
            self.report.to_text(),
            self.median_corner_px
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Evaluate a dataset. `model` may be omitted only in ground-truth bypass
/// mode.
pub fn cmd_eval(
    data: &Path,
    model: Option<&(ModelConfig, ModelParams<f32>)>,
    opts: &EvalOptions,
) -> Result<EvalOutcome, PipelineError> {
    let names = read_manifest(data)?;
    if names.is_empty() {
        return Err(invalid(format!("{}: dataset is empty", data.display())));
    }
    let mut scores = Vec::with_capacity(names.len());
    let mut corner_px = Vec::with_capacity(names.len());
    for (index, name) in names.iter().enumerate() {
        let scene = load_scene(&data.join(name))?;
        let row = eval_scene(index, name, &scene, model, opts)?;
        scores.push(row.score);
        corner_px.push(row.corner_px);
    }
    let report = MetricReport::from_scores(scores)?;
    let median_corner_px = median(&corner_px);
    Ok(EvalOutcome {
        report,
        corner_px,
        median_corner_px,
    })
}

/// Pose and corner readout for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct InferResult {
    pub pose: Pose,
    pub corners: Corners2D,
    pub confidence: [f64; 8],
    pub rms: f64,
}

/// Run the full inference path on one scene directory.
pub fn cmd_infer(
    scene_dir: &Path,
    model_path: &Path,
    opts: &EvalOptions,
) -> Result<InferResult, PipelineError> {
    let scene = load_scene(scene_dir)?;
    let model = load_checkpoint(model_path)?;
    let indices = select_refs(&scene, &scene.query.image, Some(&model), opts)?;
    let heatmap = predict_heatmap(
        &scene,
        &scene.query.image,
        &indices,
        &model.0,
        &model.1,
        opts.sigma_scale,
    )?;
    let (corners, confidence) = decode_corners(&heatmap);
    let (pose, rms) =
        estimate_pose(&corners, &confidence, &scene.bbox, &scene.query.intrinsics, opts.min_conf)?;
    Ok(InferResult {
        pose,
        corners,
        confidence,
        rms,
    })
}

/// Draw a projected box wireframe. Corners behind the camera drop the edges
/// touching them; off-image segments clip silently.
pub fn draw_box_wireframe(
    img: &mut Image,
    pose: &Pose,
    k: &Intrinsics,
    bbox: &BoundingBox3D,
    rgb: [f32; 3],
) {
    let mut projected = [None; 8];
    for (slot, corner) in projected.iter_mut().zip(&bbox.corners) {
        let pc = pose.transform(corner);
        if pc.z > 0.0 {
            let uv = k.project_cam(&pc);
            *slot = Some((uv.x, uv.y));
        }
    }
    for &(a, b) in &crate::geom::BOX_EDGES {
        if let (Some(p), Some(q)) = (projected[a], projected[b]) {
            img.draw_line(p, q, rgb);
        }
    }
}

pub const GT_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
pub const PRED_COLOR: [f32; 3] = [0.0, 0.35, 1.0];

/// Render the query with the ground-truth wireframe in green and the
/// predicted one in blue. Without a model the prediction comes from the
/// ground-truth-heatmap bypass.
pub fn cmd_render(
    scene_dir: &Path,
    model_path: Option<&Path>,
    opts: &EvalOptions,
    out: &Path,
) -> Result<(), PipelineError> {
    let scene = load_scene(scene_dir)?;
    let k = scene.query.intrinsics;
    let heatmap = match model_path {
        Some(path) => {
            let model = load_checkpoint(path)?;
            let indices = select_refs(&scene, &scene.query.image, Some(&model), opts)?;
            predict_heatmap(
                &scene,
                &scene.query.image,
                &indices,
                &model.0,
                &model.1,
                opts.sigma_scale,
            )?
        }
        None => encode_view_heatmap(&scene.gt_corners, (k.height, k.width), opts.sigma_scale)?,
    };
    let (corners, confidence) = decode_corners(&heatmap);
    let pred = estimate_pose(&corners, &confidence, &scene.bbox, &k, opts.min_conf)?;

    let mut img = scene.query.image.clone();
    draw_box_wireframe(&mut img, &scene.query.pose, &k, &scene.bbox, GT_COLOR);
    draw_box_wireframe(&mut img, &pred.0, &k, &scene.bbox, PRED_COLOR);
    fs::write(out, img.to_ppm()).map_err(|e| file_error(out, e))?;
    Ok(())
}
