//! The learnable core: a patch-embedding image encoder, heatmap/query token
//! fusion, an L-layer full self-attention decoder, and a sigmoid unpatchify
//! head — evaluated on the autodiff tape so training gets exact gradients.

pub mod tape;
pub mod tensor;

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{CornerHeatmap, Corners2D, DECODE_RADIUS};
use crate::image::Image;
use tape::{NodeId, PatchLayout, Tape};
use tensor::{c, Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("reference count {got} outside configured range {min}..={max}")]
    RefCountOutOfRange { got: usize, min: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

/// Architecture hyperparameters. `dim` is the token width; images are
/// `img_height × img_width` RGB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub img_height: usize,
    pub img_width: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub min_refs: usize,
    pub max_refs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: 64×64 images, 8×8 patches, 2 layers, width 64.
    pub fn desk() -> Self {
        ModelConfig {
            img_height: 64,
            img_width: 64,
            patch: 8,
            depth: 2,
            dim: 64,
            heads: 4,
            min_refs: 1,
            max_refs: 5,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let err = |msg: String| Err(NnError::InvalidConfig(msg));
        if self.patch == 0 || self.dim == 0 || self.heads == 0 {
            return err("patch, dim, and heads must be positive".into());
        }
        if self.img_height % self.patch != 0 || self.img_width % self.patch != 0 {
            return err(format!(
                "image {}x{} not divisible by patch {}",
                self.img_width, self.img_height, self.patch
            ));
        }
        if self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.min_refs == 0 || self.max_refs < self.min_refs {
            return err(format!(
                "reference range {}..={} invalid",
                self.min_refs, self.max_refs
            ));
        }
        Ok(())
    }

    pub fn tokens_per_view(&self) -> usize {
        (self.img_height / self.patch) * (self.img_width / self.patch)
    }

    /// Total token count of an assembled sequence with `n_refs` references.
    pub fn sequence_length(&self, n_refs: usize) -> usize {
        (n_refs + 1) * self.tokens_per_view()
    }

    pub fn layout(&self) -> PatchLayout {
        PatchLayout {
            height: self.img_height,
            width: self.img_width,
            patch: self.patch,
        }
    }
}

/// (name, rows, cols) of every learnable tensor, in checkpoint order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.dim;
    let img_slot = 3 * cfg.patch * cfg.patch;
    let hm_slot = 8 * cfg.patch * cfg.patch;
    let t = cfg.tokens_per_view();
    let hidden = 4 * d;
    let mut shapes: Vec<(String, usize, usize)> = Vec::new();
    let mut push = |name: String, r: usize, c: usize| shapes.push((name, r, c));

    push("embed.w".into(), img_slot, d);
    push("embed.b".into(), 1, d);
    let attn = |shapes: &mut Vec<(String, usize, usize)>, prefix: &str| {
        for wn in ["wq", "wk", "wv", "wo"] {
            shapes.push((format!("{prefix}.{wn}"), d, d));
        }
        for bn in ["bq", "bk", "bv", "bo"] {
            shapes.push((format!("{prefix}.{bn}"), 1, d));
        }
    };
    push("enc.ln.g".into(), 1, d);
    push("enc.ln.b".into(), 1, d);
    attn(&mut shapes, "enc.attn");
    shapes.push(("fuse.w".into(), hm_slot, d));
    shapes.push(("fuse.b".into(), 1, d));
    shapes.push(("query.tokens".into(), t, d));
    shapes.push(("pos".into(), t, d));
    shapes.push(("seg.ref".into(), 1, d));
    shapes.push(("seg.query".into(), 1, d));
    for l in 0..cfg.depth {
        shapes.push((format!("dec.{l}.ln1.g"), 1, d));
        shapes.push((format!("dec.{l}.ln1.b"), 1, d));
        attn(&mut shapes, &format!("dec.{l}.attn"));
        shapes.push((format!("dec.{l}.ln2.g"), 1, d));
        shapes.push((format!("dec.{l}.ln2.b"), 1, d));
        shapes.push((format!("dec.{l}.mlp.w1"), d, hidden));
        shapes.push((format!("dec.{l}.mlp.b1"), 1, hidden));
        shapes.push((format!("dec.{l}.mlp.w2"), hidden, d));
        shapes.push((format!("dec.{l}.mlp.b2"), 1, d));
    }
    shapes.push(("head.ln.g".into(), 1, d));
    shapes.push(("head.ln.b".into(), 1, d));
    shapes.push(("head.w".into(), d, hm_slot));
    shapes.push(("head.b".into(), 1, hm_slot));
    shapes
}

/// Named parameter tensors in fixed (checkpoint) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub entries: Vec<(String, Tensor<T>)>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, 0.02²) weights and embeddings, zero biases, unit layer-norm
    /// gains; deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut normal = move || {
            // Box-Muller transform; u1 shifted away from zero.
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            INIT_STD * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let entries = param_shapes(cfg)
            .into_iter()
            .map(|(name, r, cdim)| {
                let last = name.rsplit('.').next().unwrap();
                let data: Vec<T> = if last == "g" {
                    vec![T::one(); r * cdim]
                } else if last.starts_with('b') {
                    vec![T::zero(); r * cdim]
                } else {
                    (0..r * cdim).map(|_| c::<T>(normal())).collect()
                };
                (name, Tensor::new(vec![r, cdim], data))
            })
            .collect();
        ModelParams { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NnError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::UnknownParameter(name.into()))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn map_scalar<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map_scalar::<U>()))
                .collect(),
        }
    }

    /// Shape-checks against the config's parameter table.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), NnError> {
        let expected = param_shapes(cfg);
        if expected.len() != self.entries.len() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, r, cdim), (got_name, t)) in expected.iter().zip(&self.entries) {
            if name != got_name || t.shape != [*r, *cdim] {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter {got_name} {:?}, expected {name} [{r}, {cdim}]",
                    t.shape
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Patchify / unpatchify
// ---------------------------------------------------------------------------

/// Rearrange an RGB image into [(H/p)(W/p), 3p²] patch tokens.
pub fn patchify_image<T: Scalar>(img: &Image, cfg: &ModelConfig) -> Result<Tensor<T>, NnError> {
    if img.height as usize != cfg.img_height || img.width as usize != cfg.img_width {
        return Err(NnError::ShapeMismatch(format!(
            "image {}x{}, config {}x{}",
            img.width, img.height, cfg.img_width, cfg.img_height
        )));
    }
    let p = cfg.patch;
    let (w, h) = (cfg.img_width, cfg.img_height);
    let cols = 3 * p * p;
    let tokens = cfg.tokens_per_view();
    let mut data = vec![T::zero(); tokens * cols];
    for y in 0..h {
        for x in 0..w {
            let token = (y / p) * (w / p) + x / p;
            let base = ((y % p) * p + x % p) * 3;
            let src = (y * w + x) * 3;
            for ch in 0..3 {
                data[token * cols + base + ch] = c::<T>(img.data[src + ch] as f64);
            }
        }
    }
    Ok(Tensor::new(vec![tokens, cols], data))
}

/// Rearrange a corner heatmap into [(H/p)(W/p), 8p²] patch tokens. Exact
/// inverse of [`unpatchify_heatmap`].
pub fn patchify_heatmap<T: Scalar>(
    h: &CornerHeatmap,
    cfg: &ModelConfig,
) -> Result<Tensor<T>, NnError> {
    if h.height as usize != cfg.img_height || h.width as usize != cfg.img_width {
        return Err(NnError::ShapeMismatch(format!(
            "heatmap {}x{}, config {}x{}",
            h.width, h.height, cfg.img_width, cfg.img_height
        )));
    }
    let layout = cfg.layout();
    let slots = layout.slots();
    let tokens = layout.tokens();
    let w = cfg.img_width;
    let mut data = vec![T::zero(); tokens * slots];
    for y in 0..cfg.img_height {
        for x in 0..w {
            for ch in 0..8 {
                let (token, slot) = layout.index(x, y, ch);
                data[token * slots + slot] = c::<T>(h.values[(y * w + x) * 8 + ch] as f64);
            }
        }
    }
    Ok(Tensor::new(vec![tokens, slots], data))
}

/// Inverse of [`patchify_heatmap`].
pub fn unpatchify_heatmap<T: Scalar>(
    tokens: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<CornerHeatmap, NnError> {
    let layout = cfg.layout();
    if tokens.shape != [layout.tokens(), layout.slots()] {
        return Err(NnError::ShapeMismatch(format!(
            "token tensor {:?}, expected [{}, {}]",
            tokens.shape,
            layout.tokens(),
            layout.slots()
        )));
    }
    let w = cfg.img_width;
    let mut hm = CornerHeatmap::zeros(cfg.img_width as u32, cfg.img_height as u32);
    for y in 0..cfg.img_height {
        for x in 0..w {
            for ch in 0..8 {
                let (token, slot) = layout.index(x, y, ch);
                hm.values[(y * w + x) * 8 + ch] =
                    tokens.data[token * layout.slots() + slot].to_f64().unwrap() as f32;
            }
        }
    }
    Ok(hm)
}

// ---------------------------------------------------------------------------
// Graph assembly
// ---------------------------------------------------------------------------

struct ParamIds {
    by_name: HashMap<String, NodeId>,
    ordered: Vec<NodeId>,
}

impl ParamIds {
    fn get(&self, name: &str) -> NodeId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from graph"))
    }
}

fn push_param_leaves<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> ParamIds {
    let mut by_name = HashMap::new();
    let mut ordered = Vec::with_capacity(params.entries.len());
    for (name, t) in &params.entries {
        let id = tape.leaf(t.rows(), t.cols(), t.data.clone());
        by_name.insert(name.clone(), id);
        ordered.push(id);
    }
    ParamIds { by_name, ordered }
}

/// x·W + b (bias broadcast over rows).
fn affine<T: Scalar>(tape: &mut Tape<T>, x: NodeId, pid: &ParamIds, w: &str, b: &str) -> NodeId {
    let y = tape.matmul(x, pid.get(w));
    tape.add_row_bias(y, pid.get(b))
}

/// Multi-head scaled dot-product self-attention with output projection.
fn attention_graph<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    pid: &ParamIds,
    prefix: &str,
    heads: usize,
) -> NodeId {
    let d = tape.shape(x).1;
    let dh = d / heads;
    let q = affine(tape, x, pid, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
    let k = affine(tape, x, pid, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
    let v = affine(tape, x, pid, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
    let scale = c::<T>(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_transb(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(weights, vh));
    }
    let merged = tape.concat_cols(&head_outs);
    affine(tape, merged, pid, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Patch-linear embedding plus one pre-norm residual attention block.
fn patch_embed_graph<T: Scalar>(
    tape: &mut Tape<T>,
    img_tokens: NodeId,
    pid: &ParamIds,
    cfg: &ModelConfig,
) -> NodeId {
    let x = affine(tape, img_tokens, pid, "embed.w", "embed.b");
    let normed = tape.layer_norm(x, pid.get("enc.ln.g"), pid.get("enc.ln.b"));
    let attended = attention_graph(tape, normed, pid, "enc.attn", cfg.heads);
    tape.add(x, attended)
}

/// One pre-norm decoder block: x += attn(LN(x)); x += MLP(LN(x)).
fn decoder_block_graph<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    pid: &ParamIds,
    layer: usize,
    cfg: &ModelConfig,
) -> NodeId {
    let normed = tape.layer_norm(
        x,
        pid.get(&format!("dec.{layer}.ln1.g")),
        pid.get(&format!("dec.{layer}.ln1.b")),
    );
    let attended = attention_graph(tape, normed, pid, &format!("dec.{layer}.attn"), cfg.heads);
    let x = tape.add(x, attended);
    let normed = tape.layer_norm(
        x,
        pid.get(&format!("dec.{layer}.ln2.g")),
        pid.get(&format!("dec.{layer}.ln2.b")),
    );
    let hidden = affine(
        tape,
        normed,
        pid,
        &format!("dec.{layer}.mlp.w1"),
        &format!("dec.{layer}.mlp.b1"),
    );
    let hidden = tape.gelu(hidden);
    let mlp_out = affine(
        tape,
        hidden,
        pid,
        &format!("dec.{layer}.mlp.w2"),
        &format!("dec.{layer}.mlp.b2"),
    );
    tape.add(x, mlp_out)
}

/// Full forward pass on the tape: returns the query heatmap tokens
/// [(H/p)(W/p), 8p²] after the sigmoid head.
fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    pid: &ParamIds,
    cfg: &ModelConfig,
    ref_imgs: &[NodeId],
    ref_hms: &[NodeId],
    query_img: NodeId,
) -> NodeId {
    debug_assert_eq!(ref_imgs.len(), ref_hms.len());
    let t = cfg.tokens_per_view();
    let mut views = Vec::with_capacity(ref_imgs.len() + 1);
    for (&img, &hm) in ref_imgs.iter().zip(ref_hms) {
        let feat = patch_embed_graph(tape, img, pid, cfg);
        let hm_proj = affine(tape, hm, pid, "fuse.w", "fuse.b");
        let fused = tape.add(feat, hm_proj);
        let fused = tape.add(fused, pid.get("pos"));
        views.push(tape.add_row_bias(fused, pid.get("seg.ref")));
    }
    let feat = patch_embed_graph(tape, query_img, pid, cfg);
    let feat = tape.add(feat, pid.get("query.tokens"));
    let feat = tape.add(feat, pid.get("pos"));
    views.push(tape.add_row_bias(feat, pid.get("seg.query")));

    let mut x = tape.concat_rows(&views);
    for layer in 0..cfg.depth {
        x = decoder_block_graph(tape, x, pid, layer, cfg);
    }
    let query_rows = tape.slice_rows(x, ref_imgs.len() * t, t);
    let normed = tape.layer_norm(query_rows, pid.get("head.ln.g"), pid.get("head.ln.b"));
    let logits = affine(tape, normed, pid, "head.w", "head.b");
    tape.sigmoid(logits)
}

fn check_ref_count(cfg: &ModelConfig, got: usize) -> Result<(), NnError> {
    // Inference accepts any count from 1 to the configured maximum; the
    // minimum only constrains training-time sampling.
    if got == 0 || got > cfg.max_refs {
        return Err(NnError::RefCountOutOfRange {
            got,
            min: 1,
            max: cfg.max_refs,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Embed an image into [(H/p)(W/p), dim] features (linear patch embedding
/// plus one residual attention block).
pub fn patch_embed(
    image: &Image,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<Tensor<f32>, NnError> {
    cfg.validate()?;
    let tokens = patchify_image::<f32>(image, cfg)?;
    let mut tape = Tape::new();
    let pid = push_param_leaves(&mut tape, params);
    let leaf = tape.leaf(tokens.rows(), tokens.cols(), tokens.data);
    let out = patch_embed_graph(&mut tape, leaf, &pid, cfg);
    Ok(Tensor::new(
        vec![cfg.tokens_per_view(), cfg.dim],
        tape.value(out).to_vec(),
    ))
}

/// Mean-pooled patch-embedding feature vector, used for neighbor selection.
pub fn pooled_feature(
    image: &Image,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<Vec<f32>, NnError> {
    let feat = patch_embed(image, params, cfg)?;
    let (rows, cols) = (feat.rows(), feat.cols());
    let mut pooled = vec![0.0f32; cols];
    for r in 0..rows {
        for (acc, &v) in pooled.iter_mut().zip(&feat.data[r * cols..(r + 1) * cols]) {
            *acc += v;
        }
    }
    for v in pooled.iter_mut() {
        *v /= rows as f32;
    }
    Ok(pooled)
}

/// F' = F + Linear(patchify(h)): fuse a reference view's corner heatmap into
/// its image features.
pub fn fuse_reference(
    feat: &Tensor<f32>,
    h: &CornerHeatmap,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<Tensor<f32>, NnError> {
    let t = cfg.tokens_per_view();
    if feat.shape != [t, cfg.dim] {
        return Err(NnError::ShapeMismatch(format!(
            "features {:?}, expected [{t}, {}]",
            feat.shape, cfg.dim
        )));
    }
    let tokens = patchify_heatmap::<f32>(h, cfg)?;
    let mut tape = Tape::new();
    let pid = push_param_leaves(&mut tape, params);
    let f = tape.leaf(t, cfg.dim, feat.data.clone());
    let hm = tape.leaf(tokens.rows(), tokens.cols(), tokens.data);
    let proj = affine(&mut tape, hm, &pid, "fuse.w", "fuse.b");
    let fused = tape.add(f, proj);
    Ok(Tensor::new(vec![t, cfg.dim], tape.value(fused).to_vec()))
}

/// Run the full network: reference (image, heatmap) pairs plus a query image
/// in, predicted query corner heatmap out.
pub fn forward(
    refs: &[(&Image, &CornerHeatmap)],
    query: &Image,
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
) -> Result<CornerHeatmap, NnError> {
    cfg.validate()?;
    check_ref_count(cfg, refs.len())?;
    let mut tape = Tape::new();
    let pid = push_param_leaves(&mut tape, params);
    let mut ref_imgs = Vec::with_capacity(refs.len());
    let mut ref_hms = Vec::with_capacity(refs.len());
    for (img, hm) in refs {
        let it = patchify_image::<f32>(img, cfg)?;
        let ht = patchify_heatmap::<f32>(hm, cfg)?;
        ref_imgs.push(tape.leaf(it.rows(), it.cols(), it.data));
        ref_hms.push(tape.leaf(ht.rows(), ht.cols(), ht.data));
    }
    let qt = patchify_image::<f32>(query, cfg)?;
    let query_leaf = tape.leaf(qt.rows(), qt.cols(), qt.data);
    let out = forward_graph(&mut tape, &pid, cfg, &ref_imgs, &ref_hms, query_leaf);
    let out_tensor = Tensor::new(
        vec![cfg.tokens_per_view(), cfg.layout().slots()],
        tape.value(out).to_vec(),
    );
    unpatchify_heatmap(&out_tensor, cfg)
}

// ---------------------------------------------------------------------------
// Training loss and gradients
// ---------------------------------------------------------------------------

/// One training sample, already patchified into token tensors.
#[derive(Debug, Clone)]
pub struct BatchItem<T> {
    pub ref_images: Vec<Tensor<T>>,
    pub ref_heatmaps: Vec<Tensor<T>>,
    pub query_image: Tensor<T>,
    /// Patchified ground-truth heatmap, the coarse-loss target.
    pub target_heatmap: Tensor<T>,
    /// 16 values: ground-truth corner (x/W, y/H) pairs, the fine-loss target.
    pub target_corners: Vec<T>,
}

impl<T: Scalar> BatchItem<T> {
    pub fn prepare(
        refs: &[(&Image, &CornerHeatmap)],
        query: &Image,
        gt_heatmap: &CornerHeatmap,
        gt_corners: &Corners2D,
        cfg: &ModelConfig,
    ) -> Result<Self, NnError> {
        check_ref_count(cfg, refs.len())?;
        let mut ref_images = Vec::with_capacity(refs.len());
        let mut ref_heatmaps = Vec::with_capacity(refs.len());
        for (img, hm) in refs {
            ref_images.push(patchify_image::<T>(img, cfg)?);
            ref_heatmaps.push(patchify_heatmap::<T>(hm, cfg)?);
        }
        let mut target_corners = Vec::with_capacity(16);
        for pt in &gt_corners.points {
            target_corners.push(c::<T>(pt.x / cfg.img_width as f64));
            target_corners.push(c::<T>(pt.y / cfg.img_height as f64));
        }
        Ok(BatchItem {
            ref_images,
            ref_heatmaps,
            query_image: patchify_image::<T>(query, cfg)?,
            target_heatmap: patchify_heatmap::<T>(gt_heatmap, cfg)?,
            target_corners,
        })
    }
}

/// Scalar loss values of one batch (means over items).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
}

fn item_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    pid: &ParamIds,
    cfg: &ModelConfig,
    item: &BatchItem<T>,
    lambda: f64,
) -> (NodeId, NodeId, NodeId) {
    let mut ref_imgs = Vec::with_capacity(item.ref_images.len());
    let mut ref_hms = Vec::with_capacity(item.ref_heatmaps.len());
    for (img, hm) in item.ref_images.iter().zip(&item.ref_heatmaps) {
        ref_imgs.push(tape.leaf(img.rows(), img.cols(), img.data.clone()));
        ref_hms.push(tape.leaf(hm.rows(), hm.cols(), hm.data.clone()));
    }
    let query = tape.leaf(
        item.query_image.rows(),
        item.query_image.cols(),
        item.query_image.data.clone(),
    );
    let out = forward_graph(tape, pid, cfg, &ref_imgs, &ref_hms, query);
    let coarse = tape.smooth_l1_mean(out, item.target_heatmap.data.clone());
    let coords = tape.soft_argmax(out, cfg.layout(), DECODE_RADIUS as usize);
    let fine = tape.smooth_l1_mean(coords, item.target_corners.clone());
    let fine_scaled = tape.scale(fine, c::<T>(lambda));
    let total = tape.add(coarse, fine_scaled);
    (total, coarse, fine)
}

/// Mean batch loss L = L_coarse + λ·L_fine and exact gradients for every
/// parameter tensor, in `params.entries` order.
pub fn batch_loss_and_grads<T: Scalar>(
    items: &[BatchItem<T>],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    lambda: f64,
) -> Result<(LossRecord, Vec<Tensor<T>>), NnError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let pid = push_param_leaves(&mut tape, params);
    let mut totals = Vec::with_capacity(items.len());
    let mut coarse_sum = 0.0f64;
    let mut fine_sum = 0.0f64;
    for item in items {
        check_ref_count(cfg, item.ref_images.len())?;
        let (total, coarse, fine) = item_loss_graph(&mut tape, &pid, cfg, item, lambda);
        totals.push(total);
        coarse_sum += tape.value(coarse)[0].to_f64().unwrap();
        fine_sum += tape.value(fine)[0].to_f64().unwrap();
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = tape.add(acc, t);
    }
    let loss = tape.scale(acc, c::<T>(1.0 / items.len() as f64));

    let total_value = tape.value(loss)[0].to_f64().unwrap();
    if !total_value.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    let grads = tape.backward(loss);
    let grad_tensors = params
        .entries
        .iter()
        .zip(&pid.ordered)
        .map(|((_, t), &id)| Tensor::new(t.shape.clone(), grads[id].clone()))
        .collect();
    let n = items.len() as f64;
    Ok((
        LossRecord {
            total: total_value,
            coarse: coarse_sum / n,
            fine: fine_sum / n,
        },
        grad_tensors,
    ))
}
