//! Dataset directory layout.
//!
//! ```text
//! cameras.json            manifest: bounds and per-frame intrinsics/pose
//! rgb/%04d.png            8-bit RGB targets
//! rgb_float/%04d.pfm      optional float targets
//! depth/%04d.pfm          depth along the optical axis
//! mask/%04d.png           binary dynamic-region masks
//! flow_fwd/%04d.raw       2D flow from frame i to i+1, i in 0..F-1
//! flow_bwd/%04d.raw       2D flow from frame i to i-1, i in 1..F
//! meta.json               generator settings
//! heldout/                cameras.json, rgb/, depth/, mask/ for novel views
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{read_flow, read_pfm, read_png, write_flow, write_pfm, write_png, Image};
use crate::geometry::{Bounds, Camera};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major `[R | c]`: rotation columns are the camera axes in world
    /// coordinates, `c` the camera center.
    pub pose: [f64; 12],
    pub width: usize,
    pub height: usize,
    pub time_index: usize,
}

impl FrameCamera {
    pub fn from_camera(cam: &Camera<f64>, time_index: usize) -> Self {
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            pose: cam.pose(),
            width: cam.width,
            height: cam.height,
            time_index,
        }
    }

    pub fn camera(&self) -> Result<Camera<f64>> {
        Camera::from_pose(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            &self.pose,
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub near: f64,
    pub far: f64,
    pub frame_count: usize,
    pub frames: Vec<FrameCamera>,
}

/// A set of views with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub cameras: Vec<Camera<f64>>,
    /// Time index of each view.
    pub frames: Vec<usize>,
    pub images: Vec<Image>,
    pub depth: Vec<Image>,
    pub masks: Vec<Image>,
}

impl Views {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bounds: Bounds<f64>,
    pub frame_count: usize,
    /// One training view per frame, `train.frames[i] == i`.
    pub train: Views,
    /// Float copies of the training images, when stored.
    pub float_images: Option<Vec<Image>>,
    /// `flow_fwd[i]` maps frame `i` to `i + 1`.
    pub flow_fwd: Vec<Image>,
    /// `flow_bwd[i - 1]` maps frame `i` to `i - 1`.
    pub flow_bwd: Vec<Image>,
    pub heldout: Option<Views>,
    /// Raw `meta.json` contents.
    pub meta: Option<serde_json::Value>,
}

fn numbered(dir: &Path, sub: &str, k: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{k:04}.{ext}"))
}

fn manifest_of(views: &Views, bounds: Bounds<f64>, frame_count: usize) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        near: bounds.near,
        far: bounds.far,
        frame_count,
        frames: views
            .cameras
            .iter()
            .zip(&views.frames)
            .map(|(c, &f)| FrameCamera::from_camera(c, f))
            .collect(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_views(dir: &Path, views: &Views, bounds: Bounds<f64>, frame_count: usize) -> Result<()> {
    for sub in ["rgb", "depth", "mask"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    write_json(&dir.join("cameras.json"), &manifest_of(views, bounds, frame_count))?;
    for k in 0..views.len() {
        write_png(&numbered(dir, "rgb", k, "png"), &views.images[k])?;
        write_pfm(&numbered(dir, "depth", k, "pfm"), &views.depth[k])?;
        write_png(&numbered(dir, "mask", k, "png"), &views.masks[k])?;
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Validation(format!("unsupported manifest version {}", m.version)));
    }
    if !(m.near > 0.0 && m.near < m.far) {
        return Err(Error::Validation("manifest needs 0 < near < far".into()));
    }
    Ok(m)
}

fn read_views(dir: &Path) -> Result<(Views, Manifest)> {
    let m = read_manifest(&dir.join("cameras.json"))?;
    let mut views = Views {
        cameras: Vec::new(),
        frames: Vec::new(),
        images: Vec::new(),
        depth: Vec::new(),
        masks: Vec::new(),
    };
    for (k, fc) in m.frames.iter().enumerate() {
        if fc.time_index >= m.frame_count {
            return Err(Error::Validation(format!("view {k} has time index {}", fc.time_index)));
        }
        views.cameras.push(fc.camera()?);
        views.frames.push(fc.time_index);
        let img = read_png(&numbered(dir, "rgb", k, "png"))?;
        let depth = read_pfm(&numbered(dir, "depth", k, "pfm"))?;
        let mask = read_png(&numbered(dir, "mask", k, "png"))?;
        for (name, map, channels) in [("rgb", &img, 3), ("depth", &depth, 1), ("mask", &mask, 1)] {
            if map.width != fc.width || map.height != fc.height || map.channels != channels {
                return Err(Error::Validation(format!("{name} map {k} does not match its camera")));
            }
        }
        views.images.push(img);
        views.depth.push(depth);
        views.masks.push(mask);
    }
    Ok((views, m))
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_views(dir, &self.train, self.bounds, self.frame_count)?;
        if let Some(float) = &self.float_images {
            fs::create_dir_all(dir.join("rgb_float"))?;
            for (k, img) in float.iter().enumerate() {
                write_pfm(&numbered(dir, "rgb_float", k, "pfm"), img)?;
            }
        }
        fs::create_dir_all(dir.join("flow_fwd"))?;
        fs::create_dir_all(dir.join("flow_bwd"))?;
        for (i, f) in self.flow_fwd.iter().enumerate() {
            write_flow(&numbered(dir, "flow_fwd", i, "raw"), f)?;
        }
        for (i, f) in self.flow_bwd.iter().enumerate() {
            write_flow(&numbered(dir, "flow_bwd", i + 1, "raw"), f)?;
        }
        if let Some(meta) = &self.meta {
            write_json(&dir.join("meta.json"), meta)?;
        }
        if let Some(h) = &self.heldout {
            write_views(&dir.join("heldout"), h, self.bounds, self.frame_count)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (train, m) = read_views(dir)?;
        if train.frames.iter().enumerate().any(|(k, &f)| k != f) || train.len() != m.frame_count {
            return Err(Error::Validation("training views must be frames 0..F in order".into()));
        }
        let f = m.frame_count;
        let mut flow_fwd = Vec::new();
        let mut flow_bwd = Vec::new();
        for i in 0..f.saturating_sub(1) {
            flow_fwd.push(read_flow(&numbered(dir, "flow_fwd", i, "raw"))?);
            flow_bwd.push(read_flow(&numbered(dir, "flow_bwd", i + 1, "raw"))?);
        }
        let float_dir = dir.join("rgb_float");
        let float_images = if float_dir.is_dir() {
            Some(
                (0..f)
                    .map(|k| read_pfm(&numbered(dir, "rgb_float", k, "pfm")))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let meta_path = dir.join("meta.json");
        let meta = if meta_path.is_file() {
            Some(serde_json::from_str(&fs::read_to_string(meta_path)?)?)
        } else {
            None
        };
        let held = dir.join("heldout");
        let heldout = if held.is_dir() { Some(read_views(&held)?.0) } else { None };
        Ok(Self {
            bounds: Bounds {
                near: m.near,
                far: m.far,
            },
            frame_count: f,
            train,
            float_images,
            flow_fwd,
            flow_bwd,
            heldout,
            meta,
        })
    }

    /// Training targets: float copies when present and requested.
    pub fn targets(&self, prefer_float: bool) -> &[Image] {
        match (&self.float_images, prefer_float) {
            (Some(f), true) => f,
            _ => &self.train.images,
        }
    }
}
