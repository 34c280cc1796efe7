//! A trained scene: the dynamic field, the optional static field, and
//! image-level rendering of both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::error::{domain, Result};
use crate::fields::{DynamicRadiance, MlpParams, StaticRadiance};
use crate::formats::Image;
use crate::geometry::{dot3, generate_ray, stratified_samples, Bounds, Camera, Vec3};
use crate::render::{blend_samples, composite, normalized_time, SampleValue};

/// Rays rendered per tape when producing images.
pub const RENDER_CHUNK: usize = 256;

/// Field outputs at a set of points, static and dynamic parts blended.
#[derive(Debug, Clone, PartialEq)]
pub struct PointQuery {
    pub sigma: Vec<f64>,
    pub color: Vec<Vec3<f64>>,
    pub flow_fwd: Vec<Vec3<f64>>,
    pub flow_bwd: Vec<Vec3<f64>>,
}

/// Anything that can be queried at points and a continuous frame time.
pub trait SceneField: Sync {
    fn frame_count(&self) -> usize;

    /// Evaluates the field at `positions` looking along `dirs` at frame
    /// time `frame` (in frame units, not normalized).
    fn query_points(&self, positions: &[Vec3<f64>], dirs: &[Vec3<f64>], frame: f64) -> Result<PointQuery>;
}

fn flatten(v: &[Vec3<f64>]) -> Tensor<f64> {
    Tensor::new(v.len(), 3, v.iter().flatten().copied().collect()).expect("n x 3 data")
}

fn rows3(t: &Tensor<f64>) -> Vec<Vec3<f64>> {
    (0..t.rows()).map(|r| [t.get(r, 0), t.get(r, 1), t.get(r, 2)]).collect()
}

/// Blended point query through any pair of field implementations.
pub fn query_fields<S, D>(
    tape: &mut Tape<f64>,
    static_field: Option<&S>,
    dynamic: &D,
    positions: &[Vec3<f64>],
    dirs: &[Vec3<f64>],
    time: f64,
) -> Result<PointQuery>
where
    S: StaticRadiance<f64> + ?Sized,
    D: DynamicRadiance<f64> + ?Sized,
{
    let n = positions.len();
    let x = tape.constant(flatten(positions));
    let d = flatten(dirs);
    let times = Tensor::filled(n, 1, time);
    let dq = dynamic.query(tape, x, &d, &times)?;
    let (sigma, color) = match static_field {
        Some(s) => {
            let sq = s.query(tape, x, &d)?;
            blend_samples(tape, &sq, &dq)?
        }
        None => (dq.sigma, dq.color),
    };
    Ok(PointQuery {
        sigma: tape.value(sigma).data().to_vec(),
        color: rows3(tape.value(color)),
        flow_fwd: rows3(tape.value(dq.flow_fwd)),
        flow_bwd: rows3(tape.value(dq.flow_bwd)),
    })
}

/// Learned dynamic and static networks with the sequence they model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dynamic: MlpParams<f64>,
    pub static_field: Option<MlpParams<f64>>,
    pub frame_count: usize,
    pub bounds: Bounds<f64>,
}

impl Model {
    /// All parameter tensors, dynamic first.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<f64>> {
        self.dynamic
            .tensors
            .iter()
            .chain(self.static_field.iter().flat_map(|s| s.tensors.iter()))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f64>> {
        self.dynamic
            .tensors
            .iter_mut()
            .chain(self.static_field.iter_mut().flat_map(|s| s.tensors.iter_mut()))
    }

    pub fn num_tensors(&self) -> usize {
        self.dynamic.num_tensors() + self.static_field.as_ref().map_or(0, MlpParams::num_tensors)
    }
}

impl SceneField for Model {
    fn frame_count(&self) -> usize {
        self.frame_count
    }

    fn query_points(&self, positions: &[Vec3<f64>], dirs: &[Vec3<f64>], frame: f64) -> Result<PointQuery> {
        let mut tape = Tape::new();
        let dynamic = self.dynamic.bind_frozen(&mut tape);
        let stat = self.static_field.as_ref().map(|s| s.bind_frozen(&mut tape));
        let t = normalized_time(frame, self.frame_count);
        query_fields(&mut tape, stat.as_ref(), &dynamic, positions, dirs, t)
    }
}

/// Closure-free adapter for fields built from trait implementations.
pub struct FieldScene<S, D> {
    pub static_field: Option<S>,
    pub dynamic: D,
    pub frame_count: usize,
}

impl<S, D> SceneField for FieldScene<S, D>
where
    S: StaticRadiance<f64> + Sync,
    D: DynamicRadiance<f64> + Sync,
{
    fn frame_count(&self) -> usize {
        self.frame_count
    }

    fn query_points(&self, positions: &[Vec3<f64>], dirs: &[Vec3<f64>], frame: f64) -> Result<PointQuery> {
        let mut tape = Tape::new();
        let t = normalized_time(frame, self.frame_count);
        query_fields(&mut tape, self.static_field.as_ref(), &self.dynamic, positions, dirs, t)
    }
}

/// Images produced by rendering one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRender {
    pub image: Image,
    /// Expected depth along the optical axis.
    pub depth: Image,
    pub acc: Image,
    /// Expected forward and backward scene flow, 3 channels each.
    pub flow_fwd: Image,
    pub flow_bwd: Image,
}

/// Renders every pixel of `camera` at frame time `frame` with `samples`
/// bin-midpoint samples per ray.
pub fn render_view(
    scene: &dyn SceneField,
    camera: &Camera<f64>,
    frame: f64,
    bounds: Bounds<f64>,
    samples: usize,
) -> Result<ViewRender> {
    let f = scene.frame_count();
    if !(frame >= 0.0 && frame <= f.saturating_sub(1) as f64) {
        return domain(format!("frame time {frame} outside the sequence"));
    }
    let (w, h) = (camera.width, camera.height);
    let forward = camera.forward();
    let pixels: Vec<usize> = (0..w * h).collect();
    let chunks: Vec<Result<Vec<(Vec3<f64>, f64, f64, Vec3<f64>, Vec3<f64>)>>> = pixels
        .par_chunks(RENDER_CHUNK)
        .map(|chunk| {
            // midpoint samples never draw from the generator
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut rays = Vec::with_capacity(chunk.len());
            let mut sets = Vec::with_capacity(chunk.len());
            for &p in chunk {
                let pixel = [(p % w) as f64, (p / w) as f64];
                let ray = generate_ray(camera, pixel, frame.floor() as usize, bounds)?;
                sets.push(stratified_samples(&ray, samples, &mut rng, false)?);
                rays.push(ray);
            }
            let mut positions = Vec::with_capacity(chunk.len() * samples);
            let mut dirs = Vec::with_capacity(chunk.len() * samples);
            for (ray, set) in rays.iter().zip(&sets) {
                for &t in &set.t_values {
                    positions.push(ray.point_at(t));
                    dirs.push(ray.direction);
                }
            }
            let q = scene.query_points(&positions, &dirs, frame)?;
            let mut out = Vec::with_capacity(chunk.len());
            for (r, (ray, set)) in rays.iter().zip(&sets).enumerate() {
                let values = |flows: &[Vec3<f64>]| -> Vec<SampleValue<f64>> {
                    (0..samples)
                        .map(|k| {
                            let i = r * samples + k;
                            SampleValue {
                                t: set.t_values[k],
                                color: q.color[i],
                                sigma: q.sigma[i],
                                point: positions[i],
                                flow: flows[i],
                                weight: 1.0,
                            }
                        })
                        .collect()
                };
                let fwd = composite(&values(&q.flow_fwd), &set.deltas, ray.t_far)?;
                let bwd = composite(&values(&q.flow_bwd), &set.deltas, ray.t_far)?;
                let z = fwd.depth * dot3(ray.direction, forward);
                out.push((fwd.color, z, fwd.acc, fwd.expected_flow, bwd.expected_flow));
            }
            Ok(out)
        })
        .collect();
    let mut image = Image::zeros(w, h, 3);
    let mut depth = Image::zeros(w, h, 1);
    let mut acc = Image::zeros(w, h, 1);
    let mut flow_fwd = Image::zeros(w, h, 3);
    let mut flow_bwd = Image::zeros(w, h, 3);
    let mut p = 0;
    for chunk in chunks {
        for (c, z, a, ff, fb) in chunk? {
            image.data[3 * p..3 * p + 3].copy_from_slice(&c);
            flow_fwd.data[3 * p..3 * p + 3].copy_from_slice(&ff);
            flow_bwd.data[3 * p..3 * p + 3].copy_from_slice(&fb);
            depth.data[p] = z;
            acc.data[p] = a;
            p += 1;
        }
    }
    Ok(ViewRender {
        image,
        depth,
        acc,
        flow_fwd,
        flow_bwd,
    })
}
