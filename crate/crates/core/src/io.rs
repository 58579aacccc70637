//! On-disk formats.
//!
//! Binary tensors use the BTNS container (little endian throughout):
//!
//! ```text
//! magic   b"BTNS"
//! version u8 = 1
//! dtype   u8  (0 = f32, 1 = f64, 2 = u8)
//! ndim    u8
//! dims    ndim × u64
//! payload product(dims) elements
//! ```
//!
//! A scene directory holds `meta.txt` (poses, intrinsics, box, masks as
//! plain text; view 0 is the query), `cloud.btns` (f32 [N,3]) and one
//! `view_i.btns` (u8 [H,W,3]) per view. A dataset is a directory of scene
//! directories plus `manifest.txt`. Checkpoints (BPCK) bundle a TOML model
//! config with one named BTNS blob per parameter tensor.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::gen::{Scene, ViewRecord};
use crate::geom::{BoundingBox3D, DetectionMask, Intrinsics, PointCloud, Pose};
use crate::heatmap::Corners2D;
use crate::image::Image;
use crate::nn::tensor::Tensor;
use crate::nn::{param_shapes, ModelConfig, ModelParams};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: PathBuf, version: u8 },
    #[error("{path}: unknown dtype tag {tag}")]
    BadDtype { path: PathBuf, tag: u8 },
    #[error("{path}: {what}")]
    Malformed { path: PathBuf, what: String },
}

impl IoError {
    fn file(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
        move |source| IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, what: impl Into<String>) -> IoError {
        IoError::Malformed {
            path: path.to_path_buf(),
            what: what.into(),
        }
    }
}

const BTNS_MAGIC: &[u8; 4] = b"BTNS";
const BPCK_MAGIC: &[u8; 4] = b"BPCK";
const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense n-dimensional array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        TensorFile { dims, data }
    }
}

/// Serialize to the BTNS byte layout.
pub fn encode_btns(t: &TensorFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.dims.len() + 8 * t.data.len());
    out.extend_from_slice(BTNS_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(t.data.tag());
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    out
}

/// Sequential reader over a byte buffer; errors carry the file path.
struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::malformed(self.path, "unexpected end of file"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn expect_magic(&mut self, magic: &'static [u8; 4]) -> Result<(), IoError> {
        if self.take(4)? != magic {
            return Err(IoError::BadMagic {
                path: self.path.to_path_buf(),
                expected: std::str::from_utf8(magic).unwrap(),
            });
        }
        Ok(())
    }

    fn expect_version(&mut self) -> Result<(), IoError> {
        let version = self.u8()?;
        if version != FORMAT_VERSION {
            return Err(IoError::BadVersion {
                path: self.path.to_path_buf(),
                version,
            });
        }
        Ok(())
    }

    fn done(&self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return Err(IoError::malformed(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn decode_btns(r: &mut ByteReader) -> Result<TensorFile, IoError> {
    r.expect_magic(BTNS_MAGIC)?;
    r.expect_version()?;
    let tag = r.u8()?;
    let ndim = r.u8()? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u64()? as usize);
    }
    let count = dims.iter().product::<usize>();
    let data = match tag {
        0 => TensorData::F32(
            r.take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        1 => TensorData::F64(
            r.take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        2 => TensorData::U8(r.take(count)?.to_vec()),
        _ => {
            return Err(IoError::BadDtype {
                path: r.path.to_path_buf(),
                tag,
            })
        }
    };
    Ok(TensorFile { dims, data })
}

pub fn write_btns(path: &Path, t: &TensorFile) -> Result<(), IoError> {
    fs::write(path, encode_btns(t)).map_err(IoError::file(path))
}

pub fn read_btns(path: &Path) -> Result<TensorFile, IoError> {
    let bytes = fs::read(path).map_err(IoError::file(path))?;
    let mut r = ByteReader::new(&bytes, path);
    let t = decode_btns(&mut r)?;
    r.done()?;
    Ok(t)
}

/// Quantize an RGB image to a u8 [H, W, 3] tensor. Inverse of
/// [`tensor_to_image`] up to the 8-bit grid; u8 → image → u8 is exact.
pub fn image_to_tensor(img: &Image) -> TensorFile {
    let data = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    TensorFile::new(
        vec![img.height as usize, img.width as usize, 3],
        TensorData::U8(data),
    )
}

pub fn tensor_to_image(t: &TensorFile, path: &Path) -> Result<Image, IoError> {
    let TensorData::U8(data) = &t.data else {
        return Err(IoError::malformed(path, "image tensor must be u8"));
    };
    let [h, w, 3] = t.dims[..] else {
        return Err(IoError::malformed(
            path,
            format!("image dims {:?}, expected [h, w, 3]", t.dims),
        ));
    };
    Ok(Image::new(
        w as u32,
        h as u32,
        data.iter().map(|&v| v as f32 / 255.0).collect(),
    ))
}

fn push_floats(out: &mut String, vals: &[f64]) {
    for v in vals {
        out.push(' ');
        out.push_str(&v.to_string());
    }
}

fn pose_floats(p: &Pose) -> [f64; 12] {
    let r = &p.rotation;
    [
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        p.translation.x,
        p.translation.y,
        p.translation.z,
    ]
}

/// Render scene metadata as text. Floats print in shortest round-trip form,
/// so write → parse is bit-exact.
pub fn scene_meta_text(scene: &Scene) -> Result<String, IoError> {
    let k = &scene.query.intrinsics;
    let mut out = String::from("boxpose-scene 1\n");
    out.push_str("intrinsics");
    push_floats(&mut out, &[k.fx, k.fy, k.cx, k.cy]);
    out.push_str(&format!(" {} {}\n", k.width, k.height));
    out.push_str(&format!("diameter {}\n", scene.diameter));
    out.push_str(&format!("symmetric {}\n", scene.symmetric as u8));
    out.push_str("box");
    for c in &scene.bbox.corners {
        push_floats(&mut out, &[c.x, c.y, c.z]);
    }
    out.push('\n');
    let views: Vec<&ViewRecord> =
        std::iter::once(&scene.query).chain(&scene.references).collect();
    out.push_str(&format!("views {}\n", views.len()));
    for (i, view) in views.iter().enumerate() {
        let DetectionMask::Rect { x0, y0, x1, y1 } = view.mask else {
            return Err(IoError::malformed(
                Path::new("meta.txt"),
                "only rectangle masks are serializable",
            ));
        };
        out.push_str(&format!("view {i} pose"));
        push_floats(&mut out, &pose_floats(&view.pose));
        out.push_str(" mask");
        push_floats(&mut out, &[x0, y0, x1, y1]);
        out.push('\n');
    }
    Ok(out)
}

struct MetaReader<'a> {
    lines: std::str::Lines<'a>,
    path: &'a Path,
    line_no: usize,
}

impl<'a> MetaReader<'a> {
    fn next(&mut self) -> Result<&'a str, IoError> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| IoError::malformed(self.path, "unexpected end of metadata"))
    }

    /// Consume a line of the form `<keyword> v0 v1 …` with exactly `n` floats.
    fn floats(&mut self, keyword: &str, n: usize) -> Result<Vec<f64>, IoError> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(self.err(format!("expected '{keyword}' line")));
        }
        let vals: Vec<f64> = parts
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| self.err(format!("bad number in '{keyword}' line")))?;
        if vals.len() != n {
            return Err(self.err(format!(
                "'{keyword}' line has {} values, expected {n}",
                vals.len()
            )));
        }
        Ok(vals)
    }

    fn err(&self, what: String) -> IoError {
        IoError::malformed(self.path, format!("line {}: {what}", self.line_no))
    }
}

struct SceneMeta {
    intrinsics: Intrinsics,
    diameter: f64,
    symmetric: bool,
    bbox: BoundingBox3D,
    views: Vec<(Pose, DetectionMask)>,
}

fn parse_scene_meta(text: &str, path: &Path) -> Result<SceneMeta, IoError> {
    let mut r = MetaReader {
        lines: text.lines(),
        path,
        line_no: 0,
    };
    if r.next()? != "boxpose-scene 1" {
        return Err(IoError::malformed(path, "bad scene header"));
    }
    let k = r.floats("intrinsics", 6)?;
    if k[4].fract() != 0.0 || k[5].fract() != 0.0 || k[4] <= 0.0 || k[5] <= 0.0 {
        return Err(IoError::malformed(path, "bad image dimensions"));
    }
    let intrinsics = Intrinsics {
        fx: k[0],
        fy: k[1],
        cx: k[2],
        cy: k[3],
        width: k[4] as u32,
        height: k[5] as u32,
    };
    let diameter = r.floats("diameter", 1)?[0];
    let symmetric = match r.floats("symmetric", 1)?[0] {
        v if v == 0.0 => false,
        v if v == 1.0 => true,
        _ => return Err(IoError::malformed(path, "symmetric flag must be 0 or 1")),
    };
    let b = r.floats("box", 24)?;
    let mut corners = [Vector3::zeros(); 8];
    for (i, c) in corners.iter_mut().enumerate() {
        *c = Vector3::new(b[3 * i], b[3 * i + 1], b[3 * i + 2]);
    }
    let bbox = BoundingBox3D { corners };
    let n_views = r.floats("views", 1)?[0];
    if n_views.fract() != 0.0 || n_views < 1.0 {
        return Err(IoError::malformed(path, "bad view count"));
    }
    let mut views = Vec::new();
    for i in 0..n_views as usize {
        let line = r.next()?;
        let mut parts = line.split_whitespace();
        let header_ok = parts.next() == Some("view")
            && parts.next() == Some(&i.to_string())
            && parts.next() == Some("pose");
        if !header_ok {
            return Err(r.err(format!("expected 'view {i} pose …'")));
        }
        let mut vals = Vec::with_capacity(16);
        for part in parts {
            if part == "mask" {
                if vals.len() != 12 {
                    return Err(r.err("mask keyword in wrong position".into()));
                }
                continue;
            }
            vals.push(
                part.parse::<f64>()
                    .map_err(|_| r.err("bad number in view line".into()))?,
            );
        }
        if vals.len() != 16 {
            return Err(r.err(format!("view line has {} values, expected 16", vals.len())));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7], vals[8],
        );
        let pose = Pose::new(rotation, Vector3::new(vals[9], vals[10], vals[11]))
            .map_err(|e| IoError::malformed(path, format!("invalid pose: {e}")))?;
        let mask = DetectionMask::Rect {
            x0: vals[12],
            y0: vals[13],
            x1: vals[14],
            y1: vals[15],
        };
        views.push((pose, mask));
    }
    Ok(SceneMeta {
        intrinsics,
        diameter,
        symmetric,
        bbox,
        views,
    })
}

/// Write one scene directory: `meta.txt`, `cloud.btns`, `view_i.btns`.
/// Images are quantized to 8 bits; everything else round-trips exactly.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(IoError::file(dir))?;
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, scene_meta_text(scene)?).map_err(IoError::file(&meta_path))?;

    let cloud: Vec<f32> = scene
        .cloud
        .points
        .iter()
        .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
        .collect();
    write_btns(
        &dir.join("cloud.btns"),
        &TensorFile::new(vec![scene.cloud.len(), 3], TensorData::F32(cloud)),
    )?;

    let views = std::iter::once(&scene.query).chain(&scene.references);
    for (i, view) in views.enumerate() {
        write_btns(&dir.join(format!("view_{i}.btns")), &image_to_tensor(&view.image))?;
    }
    Ok(())
}

/// Load a scene directory. Ground-truth corners are re-derived by projecting
/// the stored box with the stored query pose, which reproduces the generator's
/// values bit-for-bit.
pub fn load_scene(dir: &Path) -> Result<Scene, IoError> {
    let meta_path = dir.join("meta.txt");
    let text = fs::read_to_string(&meta_path).map_err(IoError::file(&meta_path))?;
    let meta = parse_scene_meta(&text, &meta_path)?;

    let cloud_path = dir.join("cloud.btns");
    let cloud_t = read_btns(&cloud_path)?;
    let TensorData::F32(raw) = &cloud_t.data else {
        return Err(IoError::malformed(&cloud_path, "cloud tensor must be f32"));
    };
    if cloud_t.dims.len() != 2 || cloud_t.dims[1] != 3 {
        return Err(IoError::malformed(&cloud_path, "cloud dims must be [n, 3]"));
    }
    let cloud = PointCloud::new(
        raw.chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect(),
    );

    let mut records = Vec::with_capacity(meta.views.len());
    for (i, (pose, mask)) in meta.views.iter().enumerate() {
        let img_path = dir.join(format!("view_{i}.btns"));
        let image = tensor_to_image(&read_btns(&img_path)?, &img_path)?;
        if (image.width, image.height) != (meta.intrinsics.width, meta.intrinsics.height) {
            return Err(IoError::malformed(&img_path, "image size != intrinsics"));
        }
        records.push(ViewRecord {
            image,
            pose: pose.clone(),
            intrinsics: meta.intrinsics,
            mask: mask.clone(),
        });
    }
    let mut records = records.into_iter();
    let query = records
        .next()
        .ok_or_else(|| IoError::malformed(&meta_path, "scene has no views"))?;

    let projected = crate::geom::project_corners(&query.pose, &meta.intrinsics, &meta.bbox)
        .map_err(|e| IoError::malformed(&meta_path, format!("box behind camera: {e}")))?;
    let gt_corners = Corners2D::new(projected, meta.intrinsics.width, meta.intrinsics.height);

    Ok(Scene {
        query,
        references: records.collect(),
        cloud,
        bbox: meta.bbox,
        gt_corners,
        diameter: meta.diameter,
        symmetric: meta.symmetric,
    })
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Write `manifest.txt`: a header line, then one scene directory name per line.
pub fn write_manifest(root: &Path, names: &[String]) -> Result<(), IoError> {
    let mut out = String::from("boxpose-dataset 1\n");
    for name in names {
        out.push_str(name);
        out.push('\n');
    }
    let path = root.join("manifest.txt");
    fs::write(&path, out).map_err(IoError::file(&path))
}

pub fn read_manifest(root: &Path) -> Result<Vec<String>, IoError> {
    let path = root.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(IoError::file(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some("boxpose-dataset 1") {
        return Err(IoError::malformed(&path, "bad manifest header"));
    }
    Ok(lines
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Serialize a model checkpoint: BPCK magic, version, length-prefixed TOML
/// config, then named parameter tensors.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
) -> Result<(), IoError> {
    let config_toml = toml::to_string(cfg)
        .map_err(|e| IoError::malformed(path, format!("config serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(BPCK_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(config_toml.len() as u32).to_le_bytes());
    out.extend_from_slice(config_toml.as_bytes());
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for (name, tensor) in &params.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_btns(&TensorFile::new(
            tensor.shape.clone(),
            TensorData::F32(tensor.data.clone()),
        )));
    }
    fs::write(path, out).map_err(IoError::file(path))
}

/// Load and validate a checkpoint: the config must be self-consistent and the
/// stored tensors must match its parameter table name-for-name, shape-for-shape,
/// with finite values.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>), IoError> {
    let bytes = fs::read(path).map_err(IoError::file(path))?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(BPCK_MAGIC)?;
    r.expect_version()?;
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| IoError::malformed(path, "config is not utf-8"))?;
    let cfg: ModelConfig = toml::from_str(config_text)
        .map_err(|e| IoError::malformed(path, format!("bad config: {e}")))?;
    cfg.validate()
        .map_err(|e| IoError::malformed(path, format!("bad config: {e}")))?;

    let count = r.u32()? as usize;
    let expected = param_shapes(&cfg);
    if count != expected.len() {
        return Err(IoError::malformed(
            path,
            format!("{count} tensors, config requires {}", expected.len()),
        ));
    }
    let mut entries = Vec::with_capacity(count);
    for (want_name, rows, cols) in &expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| IoError::malformed(path, "tensor name is not utf-8"))?;
        if name != want_name {
            return Err(IoError::malformed(
                path,
                format!("tensor '{name}' where '{want_name}' expected"),
            ));
        }
        let t = decode_btns(&mut r)?;
        let TensorData::F32(data) = t.data else {
            return Err(IoError::malformed(path, format!("'{name}' must be f32")));
        };
        if t.dims != [*rows, *cols] {
            return Err(IoError::malformed(
                path,
                format!("'{name}' has dims {:?}, expected [{rows}, {cols}]", t.dims),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(IoError::malformed(path, format!("'{name}' is non-finite")));
        }
        entries.push((name.to_string(), Tensor::new(vec![*rows, *cols], data)));
    }
    r.done()?;
    Ok((cfg, ModelParams { entries }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate_scene, GenConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn btns_bytes_match_documented_layout() {
        let t = TensorFile::new(vec![2, 1], TensorData::U8(vec![7, 9]));
        let bytes = encode_btns(&t);
        let mut want = b"BTNS".to_vec();
        want.push(1); // version
        want.push(2); // dtype u8
        want.push(2); // ndim
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&[7, 9]);
        assert_eq!(bytes, want);

        let f = TensorFile::new(vec![1], TensorData::F32(vec![1.5]));
        let bytes = encode_btns(&f);
        assert_eq!(&bytes[7 + 8..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn btns_round_trip_every_dtype() {
        let dir = tmp();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let cases = vec![
            TensorFile::new(
                vec![4, 3, 2],
                TensorData::F32((0..24).map(|_| rng.random::<f32>()).collect()),
            ),
            TensorFile::new(
                vec![5, 5],
                TensorData::F64((0..25).map(|_| rng.random::<f64>()).collect()),
            ),
            TensorFile::new(vec![10], TensorData::U8((0..10).map(|_| rng.random()).collect())),
            TensorFile::new(vec![0], TensorData::F32(vec![])),
        ];
        for (i, t) in cases.iter().enumerate() {
            let path = dir.path().join(format!("t{i}.btns"));
            write_btns(&path, t).unwrap();
            let back = read_btns(&path).unwrap();
            assert_eq!(&back, t);
            assert_eq!(encode_btns(&back), encode_btns(t));
        }
    }

    #[test]
    fn btns_rejects_corruption() {
        let dir = tmp();
        let t = TensorFile::new(vec![3], TensorData::F32(vec![1.0, 2.0, 3.0]));
        let good = encode_btns(&t);
        let path = dir.path().join("bad.btns");

        let mut magic = good.clone();
        magic[0] = b'X';
        fs::write(&path, &magic).unwrap();
        let err = read_btns(&path).unwrap_err();
        assert!(matches!(err, IoError::BadMagic { .. }));
        assert!(err.to_string().contains("bad.btns"));

        let mut version = good.clone();
        version[4] = 9;
        fs::write(&path, &version).unwrap();
        assert!(matches!(read_btns(&path), Err(IoError::BadVersion { version: 9, .. })));

        let mut dtype = good.clone();
        dtype[5] = 7;
        fs::write(&path, &dtype).unwrap();
        assert!(matches!(read_btns(&path), Err(IoError::BadDtype { tag: 7, .. })));

        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_btns(&path), Err(IoError::Malformed { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        fs::write(&path, &trailing).unwrap();
        assert!(matches!(read_btns(&path), Err(IoError::Malformed { .. })));

        assert!(matches!(
            read_btns(&dir.path().join("absent.btns")),
            Err(IoError::File { .. })
        ));
    }

    #[test]
    fn image_quantization_is_stable() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let img = Image::new(
            5,
            4,
            (0..60).map(|_| rng.random_range(-0.1..1.1f32)).collect(),
        );
        let t1 = image_to_tensor(&img);
        let back = tensor_to_image(&t1, Path::new("x")).unwrap();
        let t2 = image_to_tensor(&back);
        assert_eq!(t1, t2);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn scene_meta_text_round_trips_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let scene = generate_scene(&mut rng, &GenConfig::default());
        let text = scene_meta_text(&scene).unwrap();
        let meta = parse_scene_meta(&text, Path::new("meta.txt")).unwrap();
        assert_eq!(meta.intrinsics, scene.query.intrinsics);
        assert_eq!(meta.diameter.to_bits(), scene.diameter.to_bits());
        assert_eq!(meta.symmetric, scene.symmetric);
        assert_eq!(meta.bbox, scene.bbox);
        assert_eq!(meta.views.len(), 1 + scene.references.len());
        assert_eq!(meta.views[0].0, scene.query.pose);
        assert_eq!(meta.views[0].1, scene.query.mask);
        for (got, want) in meta.views[1..].iter().zip(&scene.references) {
            assert_eq!(got.0, want.pose);
            assert_eq!(got.1, want.mask);
        }
    }

    #[test]
    fn scene_save_load_save_is_byte_identical() {
        let dir = tmp();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let scene = generate_scene(&mut rng, &GenConfig::default());
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_scene(&a, &scene).unwrap();
        let loaded = load_scene(&a).unwrap();
        save_scene(&b, &loaded).unwrap();

        // Exactly-preserved fields.
        assert_eq!(loaded.query.pose, scene.query.pose);
        assert_eq!(loaded.bbox, scene.bbox);
        assert_eq!(loaded.diameter.to_bits(), scene.diameter.to_bits());
        assert_eq!(loaded.gt_corners, scene.gt_corners);
        assert_eq!(loaded.references.len(), scene.references.len());
        // Quantized fields stay on their grid.
        for (p, q) in loaded.cloud.points.iter().zip(&scene.cloud.points) {
            assert!((p - q).norm() < 1e-6);
        }
        for (a_val, b_val) in loaded.query.image.data.iter().zip(&scene.query.image.data) {
            assert!((a_val - b_val).abs() <= 0.5 / 255.0 + 1e-6);
        }

        let mut names: Vec<String> = fs::read_dir(&a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(names.contains(&"meta.txt".to_string()));
        assert_eq!(names.len(), 2 + 1 + scene.references.len());
        for name in names {
            let x = fs::read(a.join(&name)).unwrap();
            let y = fs::read(b.join(&name)).unwrap();
            assert_eq!(x, y, "{name} differs after a round trip");
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tmp();
        let names: Vec<String> = (0..3).map(scene_dir_name).collect();
        assert_eq!(names[2], "scene_00002");
        write_manifest(dir.path(), &names).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), names);

        write_manifest(dir.path(), &[]).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), Vec::<String>::new());

        fs::write(dir.path().join("manifest.txt"), "nope\n").unwrap();
        assert!(matches!(
            read_manifest(dir.path()),
            Err(IoError::Malformed { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tmp();
        let cfg = ModelConfig {
            img_height: 16,
            img_width: 16,
            patch: 8,
            depth: 1,
            dim: 8,
            heads: 2,
            min_refs: 1,
            max_refs: 3,
        };
        let params = ModelParams::<f32>::init(&cfg, 11);
        let path = dir.path().join("model.bpck");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2.entries.len(), params.entries.len());
        for ((n1, t1), (n2, t2)) in params.entries.iter().zip(&params2.entries) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let bits1: Vec<u32> = t1.data.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u32> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
        let path2 = dir.path().join("model2.bpck");
        save_checkpoint(&path2, &cfg2, &params2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tmp();
        let cfg = ModelConfig {
            img_height: 16,
            img_width: 16,
            patch: 8,
            depth: 1,
            dim: 8,
            heads: 2,
            min_refs: 1,
            max_refs: 3,
        };
        let params = ModelParams::<f32>::init(&cfg, 12);
        let path = dir.path().join("model.bpck");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let good = fs::read(&path).unwrap();

        let bad = dir.path().join("bad.bpck");
        let mut magic = good.clone();
        magic[0] = b'Z';
        fs::write(&bad, &magic).unwrap();
        let err = load_checkpoint(&bad).unwrap_err();
        assert!(matches!(err, IoError::BadMagic { .. }));
        assert!(err.to_string().contains("bad.bpck"));

        fs::write(&bad, &good[..40]).unwrap();
        assert!(load_checkpoint(&bad).is_err());

        // Tamper with the stored dims of the first tensor: find its BTNS
        // header and zero a dim byte.
        let marker = b"BTNS";
        let off = good
            .windows(4)
            .position(|w| w == marker)
            .expect("checkpoint embeds a tensor");
        let mut tampered = good.clone();
        tampered[off + 7] ^= 1; // low byte of the first u64 dim
        fs::write(&bad, &tampered).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(IoError::Malformed { .. })));

        // Non-finite parameter payloads are rejected.
        let nan_off = good.len() - 4;
        let mut nan = good.clone();
        nan[nan_off..].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&bad, &nan).unwrap();
        let err = load_checkpoint(&bad).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }
}
