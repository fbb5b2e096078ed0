//! On-disk formats: binary PPM/PGM images, raw depth maps, JSON manifests
//! and model checkpoints with a config sidecar. Every write goes through a
//! temporary file and a rename.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sbev_autograd::checkpoint::{self, write_atomic};
use sbev_autograd::Tensor;

use crate::error::{data_err, Result, SbevError};
use crate::geometry::{GroundPlane, LayoutSpec, StereoRig};
use crate::network::{ModelConfig, SbevModel};
use crate::scenesim::{SceneSpec, SemanticMap};

pub const MANIFEST_VERSION: u32 = 1;
const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let k = 3 * (y * self.width + x);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let k = 3 * (y * self.width + x);
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    /// Planar `1 × 3 × H × W` tensor scaled to [−0.5, 0.5].
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[1, 3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            f64::from(self.data[3 * p + c]) / 255.0 - 0.5
        })
    }
}

/// Reference depth in meters, 0 where undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SbevError::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, bytes)?;
    Ok(())
}

/// Parses a binary PNM header; returns (width, height, payload offset).
fn parse_pnm(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return data_err(path, "truncated header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return data_err(path, format!("expected {magic} magic, found {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| SbevError::Data {
        path: path.to_path_buf(),
        detail: format!("bad header field {s:?}"),
    });
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return data_err(path, format!("unsupported maxval {max}"));
    }
    // single whitespace byte separates header from payload
    Ok((w, h, pos + 1))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    write_file(path, &bytes)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    let (w, h, off) = parse_pnm(path, &bytes, "P6")?;
    let n = w * h * 3;
    if bytes.len() != off + n {
        return data_err(path, format!("expected {n} payload bytes, found {}", bytes.len().saturating_sub(off)));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: bytes[off..].to_vec(),
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height, "pgm payload size");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    write_file(path, &bytes)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let (w, h, off) = parse_pnm(path, &bytes, "P5")?;
    if bytes.len() != off + w * h {
        return data_err(path, format!("expected {} payload bytes, found {}", w * h, bytes.len().saturating_sub(off)));
    }
    Ok((w, h, bytes[off..].to_vec()))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (u16::try_from(depth.width), u16::try_from(depth.height));
    let (Ok(w), Ok(h)) = (w, h) else {
        return data_err(path, "depth map too large for a u16 header");
    };
    let mut bytes = Vec::with_capacity(8 + 4 * depth.data.len());
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&w.to_le_bytes());
    bytes.extend_from_slice(&h.to_le_bytes());
    for v in &depth.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = read_file(path)?;
    if bytes.len() < 8 || &bytes[..4] != DEPTH_MAGIC {
        return data_err(path, "missing DPTH header");
    }
    let w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if bytes.len() != 8 + 4 * w * h {
        return data_err(path, format!("expected {} depth values for {w}×{h}", w * h));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(DepthMap { width: w, height: h, data })
}

/// File names of one sample, relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub left: String,
    pub right: String,
    pub depth: String,
    pub layout: String,
    pub mask: String,
    pub front: String,
    pub scene: String,
}

impl SampleRecord {
    pub fn for_id(id: &str) -> Self {
        let f = |name: &str| format!("{id}/{name}");
        Self {
            id: id.to_string(),
            left: f("left.ppm"),
            right: f("right.ppm"),
            depth: f("depth.dpth"),
            layout: f("layout.pgm"),
            mask: f("mask.pgm"),
            front: f("front.pgm"),
            scene: f("scene.json"),
        }
    }

    /// Every file of the sample, relative to the manifest directory.
    pub fn paths(&self) -> [&str; 7] {
        [&self.left, &self.right, &self.depth, &self.layout, &self.mask, &self.front, &self.scene]
    }
}

/// One fully loaded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub left: RgbImage,
    pub right: RgbImage,
    pub depth: DepthMap,
    pub gt: SemanticMap,
    pub front_classes: Vec<u8>,
    pub scene: SceneSpec,
}

pub fn write_sample(root: &Path, sample: &Sample) -> Result<SampleRecord> {
    let rec = SampleRecord::for_id(&sample.id);
    write_ppm(&root.join(&rec.left), &sample.left)?;
    write_ppm(&root.join(&rec.right), &sample.right)?;
    write_depth(&root.join(&rec.depth), &sample.depth)?;
    let gt = &sample.gt;
    write_pgm(&root.join(&rec.layout), gt.nx, gt.ny, &gt.classes)?;
    let mask: Vec<u8> = gt.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    write_pgm(&root.join(&rec.mask), gt.nx, gt.ny, &mask)?;
    write_pgm(&root.join(&rec.front), sample.left.width, sample.left.height, &sample.front_classes)?;
    write_file(&root.join(&rec.scene), &serde_json::to_vec_pretty(&sample.scene)?)?;
    Ok(rec)
}

/// Loads a sample, checking class range and that all parts agree in size.
pub fn read_sample(root: &Path, rec: &SampleRecord, classes: usize) -> Result<Sample> {
    let left = read_ppm(&root.join(&rec.left))?;
    let right = read_ppm(&root.join(&rec.right))?;
    if (right.width, right.height) != (left.width, left.height) {
        return data_err(root.join(&rec.right), "right image size differs from left");
    }
    let depth = read_depth(&root.join(&rec.depth))?;
    if (depth.width, depth.height) != (left.width, left.height) {
        return data_err(root.join(&rec.depth), "depth size differs from images");
    }
    let layout_path = root.join(&rec.layout);
    let (nx, ny, cls) = read_pgm(&layout_path)?;
    if let Some(bad) = cls.iter().find(|&&c| c as usize >= classes) {
        return data_err(layout_path, format!("class value {bad} ≥ class count {classes}"));
    }
    let mask_path = root.join(&rec.mask);
    let (mw, mh, mask) = read_pgm(&mask_path)?;
    if (mw, mh) != (nx, ny) {
        return data_err(mask_path, "mask size differs from layout");
    }
    if mask.iter().any(|&m| m != 0 && m != 255) {
        return data_err(mask_path, "mask values must be 0 or 255");
    }
    let front_path = root.join(&rec.front);
    let (fw, fh, front) = read_pgm(&front_path)?;
    if (fw, fh) != (left.width, left.height) {
        return data_err(front_path, "front-view labels size differs from images");
    }
    let scene_path = root.join(&rec.scene);
    let scene: SceneSpec = serde_json::from_slice(&read_file(&scene_path)?).map_err(|e| SbevError::Data {
        path: scene_path.clone(),
        detail: e.to_string(),
    })?;
    Ok(Sample {
        id: rec.id.clone(),
        left,
        right,
        depth,
        gt: SemanticMap {
            nx,
            ny,
            classes: cls,
            mask: mask.iter().map(|&m| u8::from(m == 255)).collect(),
        },
        front_classes: front,
        scene,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: String,
    pub seed: u64,
    pub rig: StereoRig,
    pub plane: GroundPlane,
    pub layout: LayoutSpec,
    pub class_names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub samples: Vec<SampleRecord>,
}

const MANIFEST_FIELDS: [&str; 9] = [
    "format_version",
    "split",
    "seed",
    "rig",
    "plane",
    "layout",
    "class_names",
    "palette",
    "samples",
];

impl DatasetManifest {
    /// The first `⌈fraction·n⌉` samples (at least one).
    pub fn take_fraction(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(SbevError::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        let n = ((self.samples.len() as f64 * fraction).ceil() as usize).clamp(1, self.samples.len().max(1));
        let mut m = self.clone();
        m.samples.truncate(n);
        Ok(m)
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(manifest)?)
}

/// Reads and validates a manifest; unknown top-level fields are ignored
/// with a warning and every referenced file must exist.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = read_file(path)?;
    let bad = |e: serde_json::Error| SbevError::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(bad)?;
    let Some(obj) = value.as_object() else {
        return data_err(path, "manifest must be a JSON object");
    };
    let known: BTreeSet<&str> = MANIFEST_FIELDS.into_iter().collect();
    for key in obj.keys().filter(|k| !known.contains(k.as_str())) {
        log::warn!("{}: ignoring unknown manifest field {key:?}", path.display());
    }
    let m: DatasetManifest = serde_json::from_value(value).map_err(bad)?;
    if m.format_version != MANIFEST_VERSION {
        return data_err(path, format!("manifest version {} (expected {MANIFEST_VERSION})", m.format_version));
    }
    if m.palette.len() != m.layout.classes || m.class_names.len() != m.layout.classes {
        return data_err(path, "palette and class names must have one entry per class");
    }
    m.rig.validate()?;
    m.layout.validate()?;
    let root = manifest_root(path);
    for rec in &m.samples {
        for p in rec.paths() {
            if !root.join(p).is_file() {
                return data_err(root.join(p), format!("missing file of sample {}", rec.id));
            }
        }
    }
    Ok(m)
}

/// Directory that sample paths of a manifest are relative to.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Sidecar path holding the model configuration of a checkpoint.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub rig: StereoRig,
    pub plane: GroundPlane,
    pub layout: LayoutSpec,
}

impl CheckpointMeta {
    pub fn of(model: &SbevModel) -> Self {
        Self {
            config: model.config.clone(),
            rig: model.rig,
            plane: model.plane,
            layout: model.layout,
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &SbevModel) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    checkpoint::save_params(path, &model.params)?;
    write_file(&config_sidecar(path), &serde_json::to_vec_pretty(&CheckpointMeta::of(model))?)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = config_sidecar(path);
    serde_json::from_slice(&read_file(&side)?).map_err(|e| SbevError::Data {
        path: side,
        detail: e.to_string(),
    })
}

/// Loads parameters into `model`, rejecting a checkpoint whose sidecar
/// configuration differs from the model's.
pub fn load_checkpoint_into(path: &Path, model: &mut SbevModel) -> Result<()> {
    let meta = read_checkpoint_meta(path)?;
    if meta != CheckpointMeta::of(model) {
        return data_err(
            path,
            format!(
                "checkpoint configuration ({} variant) does not match the model ({} variant)",
                meta.config.variant, model.config.variant
            ),
        );
    }
    checkpoint::load_params(path, &mut model.params).map_err(|e| SbevError::Data {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Builds a model from a checkpoint's sidecar and loads its parameters.
pub fn load_checkpoint(path: &Path) -> Result<SbevModel> {
    let meta = read_checkpoint_meta(path)?;
    let mut model = SbevModel::new(meta.config, meta.rig, meta.plane, meta.layout, 0)?;
    load_checkpoint_into(path, &mut model)?;
    Ok(model)
}
