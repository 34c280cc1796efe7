//! Analytic dynamic scenes and the reference data generated from them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Views};
use crate::error::{Error, Result};
use crate::fields::{DynamicFieldOutput, FnDynamicField};
use crate::formats::Image;
use crate::geometry::{add3, dot3, generate_ray, project, sub3, Bounds, Camera, SampleSet, Vec3};
use crate::render::{composite, SampleValue};

/// Blobs fall to zero at this many standard deviations so vacuum is exact.
pub const BLOB_CUTOFF: f64 = 3.0;

/// Composited moving-primitive fraction above which a pixel is dynamic.
pub const MASK_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Isotropic Gaussian with standard deviation `sigma`.
    Blob { sigma: f64 },
    /// Axis-aligned box of constant density.
    Box { half_extents: Vec3<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Static,
    /// Displacement per frame.
    Linear { velocity: Vec3<f64> },
    /// `amplitude * sin(2 pi frame / period + phase)`.
    Sinusoidal {
        amplitude: Vec3<f64>,
        period: f64,
        phase: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub color: Vec3<f64>,
    /// Peak density.
    pub density: f64,
    /// Position at frame 0.
    pub center: Vec3<f64>,
    pub motion: Motion,
}

impl Primitive {
    pub fn position(&self, frame: f64) -> Vec3<f64> {
        match &self.motion {
            Motion::Static => self.center,
            Motion::Linear { velocity } => add3(self.center, velocity.map(|v| v * frame)),
            Motion::Sinusoidal {
                amplitude,
                period,
                phase,
            } => {
                let s = (std::f64::consts::TAU * frame / period + phase).sin();
                add3(self.center, amplitude.map(|a| a * s))
            }
        }
    }

    pub fn moves(&self) -> bool {
        match &self.motion {
            Motion::Static => false,
            Motion::Linear { velocity } => velocity.iter().any(|&v| v != 0.0),
            Motion::Sinusoidal { amplitude, .. } => amplitude.iter().any(|&v| v != 0.0),
        }
    }

    pub fn density_at(&self, x: Vec3<f64>, frame: f64) -> f64 {
        let d = sub3(x, self.position(frame));
        match &self.shape {
            Shape::Blob { sigma } => {
                let r2 = dot3(d, d);
                if r2 >= (BLOB_CUTOFF * sigma).powi(2) {
                    0.0
                } else {
                    // shifted so the density reaches zero continuously at the cutoff
                    let floor = (-0.5 * BLOB_CUTOFF * BLOB_CUTOFF).exp();
                    let g = (-0.5 * r2 / (sigma * sigma)).exp();
                    self.density * (g - floor) / (1.0 - floor)
                }
            }
            Shape::Box { half_extents } => {
                if (0..3).all(|k| d[k].abs() <= half_extents[k]) {
                    self.density
                } else {
                    0.0
                }
            }
        }
    }

    fn half_size(&self) -> Vec3<f64> {
        match &self.shape {
            Shape::Blob { sigma } => [BLOB_CUTOFF * sigma; 3],
            Shape::Box { half_extents } => *half_extents,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    pub min: Vec3<f64>,
    pub max: Vec3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub frame_count: usize,
    pub scene_box: SceneBox,
}

/// Direction of a one-frame displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDir {
    Forward,
    Backward,
}

impl AnalyticScene {
    /// Static backdrop box, two static blobs in front of it and one blob
    /// sliding from `x = -1` to `x = 1` over the sequence.
    pub fn blob_slide(frame_count: usize) -> Self {
        let step = if frame_count > 1 { 2.0 / (frame_count - 1) as f64 } else { 0.0 };
        Self {
            primitives: vec![
                Primitive {
                    shape: Shape::Box {
                        half_extents: [3.0, 3.0, 0.5],
                    },
                    color: [0.75, 0.65, 0.45],
                    density: 40.0,
                    center: [0.0, 0.0, -1.6],
                    motion: Motion::Static,
                },
                Primitive {
                    shape: Shape::Blob { sigma: 0.15 },
                    color: [0.85, 0.2, 0.15],
                    density: 40.0,
                    center: [-0.9, 0.6, -0.8],
                    motion: Motion::Static,
                },
                Primitive {
                    shape: Shape::Blob { sigma: 0.15 },
                    color: [0.15, 0.7, 0.25],
                    density: 40.0,
                    center: [0.8, -0.5, -0.8],
                    motion: Motion::Static,
                },
                Primitive {
                    shape: Shape::Blob { sigma: 0.2 },
                    color: [0.15, 0.3, 0.9],
                    density: 40.0,
                    center: [-1.0, 0.0, 0.0],
                    motion: Motion::Linear {
                        velocity: [step, 0.0, 0.0],
                    },
                },
            ],
            frame_count,
            scene_box: SceneBox {
                min: [-4.0, -4.0, -2.5],
                max: [4.0, 4.0, 2.0],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::Validation("scene needs at least one frame".into()));
        }
        let margin = 1e-3;
        for (k, p) in self.primitives.iter().enumerate() {
            let finite = p.color.iter().chain(&p.center).all(|v| v.is_finite());
            if !(p.density >= 0.0 && p.density.is_finite()) || !finite {
                return Err(Error::Validation(format!("primitive {k}: invalid density or color")));
            }
            let size_ok = match &p.shape {
                Shape::Blob { sigma } => *sigma > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            };
            if !size_ok {
                return Err(Error::Validation(format!("primitive {k}: sizes must be positive")));
            }
            if let Motion::Sinusoidal { period, .. } = p.motion {
                if !(period > 0.0) {
                    return Err(Error::Validation(format!("primitive {k}: period must be > 0")));
                }
            }
            let h = p.half_size();
            for f in 0..self.frame_count {
                let c = p.position(f as f64);
                for a in 0..3 {
                    let inside = c[a] - h[a] >= self.scene_box.min[a] + margin
                        && c[a] + h[a] <= self.scene_box.max[a] - margin;
                    if !inside || !c[a].is_finite() {
                        return Err(Error::Validation(format!(
                            "primitive {k} leaves the scene box at frame {f}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Same primitives over a sequence of `frames` frames.
    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frame_count = frames;
        self
    }

    pub fn has_motion(&self) -> bool {
        self.primitives.iter().any(Primitive::moves)
    }

    /// Density and density-weighted color at `x` at (possibly fractional) `frame`.
    pub fn eval(&self, x: Vec3<f64>, frame: f64) -> (Vec3<f64>, f64) {
        let mut sigma = 0.0;
        let mut color = [0.0; 3];
        for p in &self.primitives {
            let s = p.density_at(x, frame);
            if s > 0.0 {
                sigma += s;
                for c in 0..3 {
                    color[c] += s * p.color[c];
                }
            }
        }
        if sigma > 0.0 {
            color = color.map(|c| c / sigma);
        }
        (color, sigma)
    }

    /// Share of the density at `x` contributed by moving primitives.
    pub fn moving_fraction(&self, x: Vec3<f64>, frame: f64) -> f64 {
        self.eval_with_motion(x, frame).2
    }

    /// [`AnalyticScene::eval`] plus the moving share of the density.
    pub fn eval_with_motion(&self, x: Vec3<f64>, frame: f64) -> (Vec3<f64>, f64, f64) {
        let (mut sigma, mut moving) = (0.0, 0.0);
        let mut color = [0.0; 3];
        for p in &self.primitives {
            let s = p.density_at(x, frame);
            if s > 0.0 {
                sigma += s;
                if p.moves() {
                    moving += s;
                }
                for c in 0..3 {
                    color[c] += s * p.color[c];
                }
            }
        }
        if sigma > 0.0 {
            (color.map(|c| c / sigma), sigma, moving / sigma)
        } else {
            (color, sigma, 0.0)
        }
    }

    /// One-frame displacement of the densest primitive at `x`; zero in vacuum.
    pub fn scene_flow(&self, x: Vec3<f64>, frame: f64, dir: FlowDir) -> Vec3<f64> {
        let mut best: Option<(&Primitive, f64)> = None;
        for p in &self.primitives {
            let s = p.density_at(x, frame);
            if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((p, s));
            }
        }
        let Some((p, _)) = best else { return [0.0; 3] };
        let to = match dir {
            FlowDir::Forward => frame + 1.0,
            FlowDir::Backward => frame - 1.0,
        };
        sub3(p.position(to), p.position(frame))
    }

    /// The scene as a dynamic field with exact flows and unit weights.
    /// Normalized time `t` maps to frame `t (F - 1)`.
    pub fn field(&self) -> FnDynamicField<impl Fn(Vec3<f64>, Vec3<f64>, f64) -> DynamicFieldOutput<f64> + '_> {
        let span = self.frame_count.saturating_sub(1) as f64;
        FnDynamicField(move |x: Vec3<f64>, _d: Vec3<f64>, t: f64| {
            let frame = t * span;
            let (color, sigma) = self.eval(x, frame);
            DynamicFieldOutput {
                color,
                sigma,
                flow_fwd: self.scene_flow(x, frame, FlowDir::Forward),
                flow_bwd: self.scene_flow(x, frame, FlowDir::Backward),
                w_fwd: 1.0,
                w_bwd: 1.0,
            }
        })
    }
}

/// Per-pixel reference render of a view.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRender {
    pub image: Image,
    /// Distance along the optical axis; `t_far` scaled for vacuum rays.
    pub depth: Image,
    pub acc: Image,
    /// Expected termination point (point at `t_far` for vacuum rays).
    pub points: Image,
    /// Composited moving-primitive fraction.
    pub moving: Image,
}

impl OracleRender {
    pub fn mask(&self) -> Image {
        Image {
            data: self.moving.data.iter().map(|&m| f64::from(u8::from(m >= MASK_THRESHOLD))).collect(),
            ..self.moving.clone()
        }
    }
}

fn midpoint_samples(bounds: Bounds<f64>, n: usize) -> Result<SampleSet<f64>> {
    let w = (bounds.far - bounds.near) / n as f64;
    let t = (0..n).map(|k| bounds.near + (k as f64 + 0.5) * w).collect();
    SampleSet::from_t_values(t, bounds.near, bounds.far)
}

/// Renders `scene` at `frame` with `n_fine` midpoint samples per ray.
pub fn render_oracle(
    scene: &AnalyticScene,
    camera: &Camera<f64>,
    frame: f64,
    bounds: Bounds<f64>,
    n_fine: usize,
) -> Result<OracleRender> {
    if n_fine < 2 {
        return Err(Error::Validation("oracle needs at least two samples".into()));
    }
    let set = midpoint_samples(bounds, n_fine)?;
    let (w, h) = (camera.width, camera.height);
    let forward = camera.forward();
    let rows: Vec<Vec<[f64; 10]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = generate_ray(camera, [x as f64, y as f64], 0, bounds)?;
                    let samples: Vec<SampleValue<f64>> = set
                        .t_values
                        .iter()
                        .map(|&t| {
                            let p = ray.point_at(t);
                            let (color, sigma, weight) = scene.eval_with_motion(p, frame);
                            SampleValue {
                                t,
                                color,
                                sigma,
                                point: p,
                                flow: [0.0; 3],
                                weight,
                            }
                        })
                        .collect();
                    let r = composite(&samples, &set.deltas, bounds.far)?;
                    let p = ray.point_at(r.depth);
                    let z = r.depth * dot3(ray.direction, forward);
                    Ok([r.color[0], r.color[1], r.color[2], z, r.acc, p[0], p[1], p[2], r.weight, 0.0])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |range: std::ops::Range<usize>| {
        let data = rows.iter().flatten().flat_map(|v| v[range.clone()].to_vec()).collect();
        Image::new(w, h, range.len(), data)
    };
    Ok(OracleRender {
        image: pick(0..3)?,
        depth: pick(3..4)?,
        acc: pick(4..5)?,
        points: pick(5..8)?,
        moving: pick(8..9)?,
    })
}

/// Volume-rendered expected scene flow `sum_k w_k f(x_k) / acc` of every
/// pixel, the quantity a field's flow render estimates.
pub fn render_oracle_flow(
    scene: &AnalyticScene,
    camera: &Camera<f64>,
    frame: f64,
    bounds: Bounds<f64>,
    n_fine: usize,
    dir: FlowDir,
) -> Result<Image> {
    if n_fine < 2 {
        return Err(Error::Validation("oracle needs at least two samples".into()));
    }
    let set = midpoint_samples(bounds, n_fine)?;
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<Vec3<f64>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let ray = generate_ray(camera, [x as f64, y as f64], 0, bounds)?;
                    let samples: Vec<SampleValue<f64>> = set
                        .t_values
                        .iter()
                        .map(|&t| {
                            let p = ray.point_at(t);
                            let (color, sigma) = scene.eval(p, frame);
                            SampleValue {
                                t,
                                color,
                                sigma,
                                point: p,
                                flow: scene.scene_flow(p, frame, dir),
                                weight: 0.0,
                            }
                        })
                        .collect();
                    Ok(composite(&samples, &set.deltas, bounds.far)?.expected_flow)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Image::new(w, h, 3, rows.into_iter().flatten().flatten().collect())
}

/// 2D flow from view `cam_i` at frame `i` to `cam_j` at frame `i +- 1`:
/// the oracle's expected surface point displaced by the exact scene flow
/// and projected into `cam_j`, minus the source pixel center.
pub fn optical_flow_gt(
    scene: &AnalyticScene,
    oracle_i: &OracleRender,
    cam_i: &Camera<f64>,
    cam_j: &Camera<f64>,
    i: usize,
    dir: FlowDir,
) -> Result<Image> {
    let (w, h) = (cam_i.width, cam_i.height);
    let mut flow = Image::zeros(w, h, 2);
    for y in 0..h {
        for x in 0..w {
            let p = oracle_i.points.pixel(x, y);
            let p = [p[0], p[1], p[2]];
            let moved = add3(p, scene.scene_flow(p, i as f64, dir));
            let q = project(cam_j, moved)?;
            let out = flow.pixel_mut(x, y);
            out[0] = q[0] - (x as f64 + 0.5);
            out[1] = q[1] - (y as f64 + 0.5);
        }
    }
    Ok(flow)
}

/// Monocular camera path on a horizontal circular arc around `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPath {
    pub radius: f64,
    /// Total angular span of the training views.
    pub arc_degrees: f64,
    /// Camera height above the target.
    pub elevation: f64,
    pub target: Vec3<f64>,
    pub fov_x_degrees: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    /// Angle between a training view and its held-out view; half an arc
    /// step when absent.
    pub heldout_offset_degrees: Option<f64>,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            radius: 4.0,
            arc_degrees: 30.0,
            elevation: 0.3,
            target: [0.0, 0.0, -0.5],
            fov_x_degrees: 40.0,
            width: 64,
            height: 64,
            near: 2.0,
            far: 6.0,
            heldout_offset_degrees: None,
        }
    }
}

impl CameraPath {
    pub fn bounds(&self) -> Bounds<f64> {
        Bounds {
            near: self.near,
            far: self.far,
        }
    }

    fn angle_step(&self, frames: usize) -> f64 {
        if frames > 1 {
            self.arc_degrees / (frames - 1) as f64
        } else {
            0.0
        }
    }

    /// Camera at `angle` degrees from the arc centre.
    pub fn camera_at(&self, angle_degrees: f64) -> Result<Camera<f64>> {
        let a = angle_degrees.to_radians();
        let eye = [
            self.target[0] + self.radius * a.sin(),
            self.target[1] + self.elevation,
            self.target[2] + self.radius * a.cos(),
        ];
        Camera::look_at(eye, self.target, [0.0, 1.0, 0.0], self.fov_x_degrees, self.width, self.height)
    }

    pub fn training_angle(&self, frame: usize, frames: usize) -> f64 {
        -0.5 * self.arc_degrees + self.angle_step(frames) * frame as f64
    }

    /// Novel view offset from frame `frame`'s camera towards the arc
    /// centre, so it never leaves the span of the training path.
    pub fn heldout_angle(&self, frame: usize, frames: usize) -> f64 {
        let offset = self.heldout_offset_degrees.unwrap_or(0.5 * self.angle_step(frames));
        let base = self.training_angle(frame, frames);
        if base < 0.0 {
            base + offset
        } else {
            base - offset
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.fov_x_degrees > 0.0 && self.fov_x_degrees < 180.0) {
            return Err(Error::Validation("camera path needs radius > 0 and fov in (0, 180)".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Validation("camera path needs 0 < near < far".into()));
        }
        if self.heldout_offset_degrees.is_some_and(|o| !(o >= 0.0)) {
            return Err(Error::Validation("held-out offset must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub frames: usize,
    /// Explicit scene; the sliding-blob scene when absent.
    pub scene: Option<AnalyticScene>,
    pub camera: CameraPath,
    pub n_fine: usize,
    pub heldout: bool,
    /// Std. dev. of Gaussian noise added to the stored 2D flow, in pixels.
    pub flow_noise_px: f64,
    /// Relative std. dev. of multiplicative noise on stored depth.
    pub depth_noise_rel: f64,
    /// Also store float training targets.
    pub float_targets: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 12,
            scene: None,
            camera: CameraPath::default(),
            n_fine: 1024,
            heldout: true,
            flow_noise_px: 0.0,
            depth_noise_rel: 0.0,
            float_targets: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn scene(&self) -> AnalyticScene {
        self.scene.clone().unwrap_or_else(|| AnalyticScene::blob_slide(self.frames))
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Validation("frames must be positive".into()));
        }
        if self.n_fine < 2 {
            return Err(Error::Validation("n_fine must be at least 2".into()));
        }
        if !(self.flow_noise_px >= 0.0 && self.depth_noise_rel >= 0.0) {
            return Err(Error::Validation("noise levels must be >= 0".into()));
        }
        let scene = self.scene();
        if scene.frame_count != self.frames {
            return Err(Error::Validation("scene frame count differs from frames".into()));
        }
        self.camera.validate()?;
        scene.validate()
    }
}

fn oracle_views(
    scene: &AnalyticScene,
    cfg: &SynthConfig,
    angles: &[f64],
) -> Result<(Views, Vec<OracleRender>)> {
    let mut views = Views {
        cameras: Vec::new(),
        frames: Vec::new(),
        images: Vec::new(),
        depth: Vec::new(),
        masks: Vec::new(),
    };
    let mut renders = Vec::new();
    for (f, &angle) in angles.iter().enumerate() {
        let cam = cfg.camera.camera_at(angle)?;
        let r = render_oracle(scene, &cam, f as f64, cfg.camera.bounds(), cfg.n_fine)?;
        views.cameras.push(cam);
        views.frames.push(f);
        views.images.push(r.image.clone());
        views.depth.push(r.depth.clone());
        views.masks.push(r.mask());
        renders.push(r);
    }
    Ok((views, renders))
}

/// Renders a complete dataset. Deterministic for a given configuration.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scene = cfg.scene();
    let f = cfg.frames;
    let angles: Vec<f64> = (0..f).map(|k| cfg.camera.training_angle(k, f)).collect();
    let (mut train, renders) = oracle_views(&scene, cfg, &angles)?;
    let mut flow_fwd = Vec::new();
    let mut flow_bwd = Vec::new();
    for i in 0..f.saturating_sub(1) {
        let (ci, cj) = (&train.cameras[i], &train.cameras[i + 1]);
        flow_fwd.push(optical_flow_gt(&scene, &renders[i], ci, cj, i, FlowDir::Forward)?);
        flow_bwd.push(optical_flow_gt(&scene, &renders[i + 1], cj, ci, i + 1, FlowDir::Backward)?);
    }
    let float_images = cfg.float_targets.then(|| train.images.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.flow_noise_px > 0.0 {
        let noise = Normal::new(0.0, cfg.flow_noise_px).map_err(|e| Error::Validation(e.to_string()))?;
        for map in flow_fwd.iter_mut().chain(flow_bwd.iter_mut()) {
            for v in &mut map.data {
                *v += noise.sample(&mut rng);
            }
        }
    }
    if cfg.depth_noise_rel > 0.0 {
        let noise = Normal::new(0.0, cfg.depth_noise_rel).map_err(|e| Error::Validation(e.to_string()))?;
        for map in &mut train.depth {
            for v in &mut map.data {
                *v *= (1.0 + noise.sample(&mut rng)).max(0.05);
            }
        }
    }

    let heldout = if cfg.heldout {
        let angles: Vec<f64> = (0..f).map(|k| cfg.camera.heldout_angle(k, f)).collect();
        Some(oracle_views(&scene, cfg, &angles)?.0)
    } else {
        None
    };
    let meta = serde_json::json!({
        "version": 1,
        "generator": cfg,
        "scene": scene,
    });
    Ok(Dataset {
        bounds: cfg.camera.bounds(),
        frame_count: f,
        train,
        float_images,
        flow_fwd,
        flow_bwd,
        heldout,
        meta: Some(meta),
    })
}

/// The scene stored in a generated dataset's metadata.
pub fn scene_from_meta(meta: &serde_json::Value) -> Result<AnalyticScene> {
    let scene = meta
        .get("scene")
        .ok_or_else(|| Error::Validation("metadata has no scene".into()))?;
    Ok(serde_json::from_value(scene.clone())?)
}
