//! Rendering at fractional times between two frames.
//!
//! [`render_spacetime`] sweeps the novel view's sample steps, queries the
//! scene at frames `i` and `i + 1`, moves every sample a fraction of the
//! way along its scene flow and splats it into a per-plane `(c, alpha)`
//! buffer that is composited front to back. [`direct_time_blend`] feeds
//! the fractional time straight into the field for comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::formats::Image;
use crate::geometry::{add3, norm3, project, scale3, stratified_samples, sub3, Bounds, Camera, Vec3};
use crate::geometry::generate_ray;
use crate::model::{render_view, PointQuery, SceneField, RENDER_CHUNK};

/// Per-pixel, per-plane splat accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulationBuffer {
    pub width: usize,
    pub height: usize,
    pub planes: usize,
    weight: Vec<f64>,
    alpha: Vec<f64>,
    color: Vec<f64>,
}

impl AccumulationBuffer {
    pub fn new(width: usize, height: usize, planes: usize) -> Self {
        let n = width * height * planes;
        Self {
            width,
            height,
            planes,
            weight: vec![0.0; n],
            alpha: vec![0.0; n],
            color: vec![0.0; 3 * n],
        }
    }

    fn index(&self, x: usize, y: usize, plane: usize) -> usize {
        (y * self.width + x) * self.planes + plane
    }

    /// Adds one splat with footprint weight `weight` to cell `(x, y, plane)`.
    pub fn add(&mut self, x: usize, y: usize, plane: usize, color: Vec3<f64>, alpha: f64, weight: f64) {
        let k = self.index(x, y, plane);
        let w = weight * alpha;
        self.weight[k] += w;
        self.alpha[k] += w * alpha;
        for c in 0..3 {
            self.color[3 * k + c] += w * color[c];
        }
    }

    /// Splats at continuous image position `(u, v)` (pixel centers at
    /// integer + 0.5) with a bilinear 2x2 footprint.
    pub fn splat(&mut self, u: f64, v: f64, plane: usize, color: Vec3<f64>, alpha: f64, weight: f64) {
        let (px, py) = (u - 0.5, v - 0.5);
        let (x0, y0) = (px.floor(), py.floor());
        let (fx, fy) = (px - x0, py - y0);
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let (x, y) = (x0 as i64 + dx, y0 as i64 + dy);
                let w = wx * wy * weight;
                if w > 0.0 && x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
                    self.add(x as usize, y as usize, plane, color, alpha, w);
                }
            }
        }
    }

    /// `(premultiplied color, alpha)` of a cell. Splats are averaged with
    /// weights `footprint * alpha`, so transparent samples never thin out
    /// an opaque one landing in the same cell; alpha is further capped by
    /// the accumulated `footprint * alpha`, so a cell only grazed by a
    /// neighbour's footprint stays mostly transparent.
    pub fn cell(&self, x: usize, y: usize, plane: usize) -> (Vec3<f64>, f64) {
        let k = self.index(x, y, plane);
        let w = self.weight[k];
        if w <= 0.0 {
            return ([0.0; 3], 0.0);
        }
        let a = (self.alpha[k] / w).min(w);
        let c = [self.color[3 * k] / w, self.color[3 * k + 1] / w, self.color[3 * k + 2] / w];
        (c.map(|v| v * a), a)
    }

    /// Sum of normalized alpha over every cell.
    pub fn total_alpha(&self) -> f64 {
        let mut total = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                for p in 0..self.planes {
                    total += self.cell(x, y, p).1;
                }
            }
        }
        total
    }

    /// Front-to-back alpha compositing over the planes of every pixel.
    pub fn composite(&self) -> Image {
        let mut img = Image::zeros(self.width, self.height, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut trans = 1.0;
                let mut out = [0.0; 3];
                for p in 0..self.planes {
                    let (c, a) = self.cell(x, y, p);
                    for k in 0..3 {
                        out[k] += trans * c[k];
                    }
                    trans *= 1.0 - a;
                }
                img.pixel_mut(x, y).copy_from_slice(&out);
            }
        }
        img
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacetimeRender {
    pub image: Image,
    pub buffer: AccumulationBuffer,
}

/// Sample points of every pixel ray of `camera` with their step lengths.
struct Sweep {
    origin: Vec3<f64>,
    points: Vec<Vec3<f64>>,
    dirs: Vec<Vec3<f64>>,
    deltas: Vec<f64>,
    near: f64,
    step: f64,
}

fn sweep(camera: &Camera<f64>, bounds: Bounds<f64>, samples: usize) -> Result<Sweep> {
    let (w, h) = (camera.width, camera.height);
    let mut points = Vec::with_capacity(w * h * samples);
    let mut dirs = Vec::with_capacity(w * h * samples);
    let mut deltas = Vec::with_capacity(w * h * samples);
    // midpoint samples never draw from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for v in 0..h {
        for u in 0..w {
            let ray = generate_ray(camera, [u as f64, v as f64], 0, bounds)?;
            let set = stratified_samples(&ray, samples, &mut rng, false)?;
            for (&t, &d) in set.t_values.iter().zip(&set.deltas) {
                points.push(ray.point_at(t));
                dirs.push(ray.direction);
                deltas.push(d);
            }
        }
    }
    Ok(Sweep {
        origin: camera.center,
        points,
        dirs,
        deltas,
        near: bounds.near,
        step: (bounds.far - bounds.near) / samples as f64,
    })
}

fn query_all(scene: &dyn SceneField, sw: &Sweep, samples: usize, frame: f64) -> Result<PointQuery> {
    let chunk = RENDER_CHUNK * samples;
    let parts: Vec<Result<PointQuery>> = sw
        .points
        .par_chunks(chunk)
        .zip(sw.dirs.par_chunks(chunk))
        .map(|(p, d)| scene.query_points(p, d, frame))
        .collect();
    let mut out = PointQuery {
        sigma: Vec::with_capacity(sw.points.len()),
        color: Vec::with_capacity(sw.points.len()),
        flow_fwd: Vec::with_capacity(sw.points.len()),
        flow_bwd: Vec::with_capacity(sw.points.len()),
    };
    for part in parts {
        let q = part?;
        out.sigma.extend(q.sigma);
        out.color.extend(q.color);
        out.flow_fwd.extend(q.flow_fwd);
        out.flow_bwd.extend(q.flow_bwd);
    }
    Ok(out)
}

/// Splats the samples of one time into `buf`, each displaced by `scale`
/// times its flow and weighted by `blend`.
fn splat_time(
    buf: &mut AccumulationBuffer,
    camera: &Camera<f64>,
    sw: &Sweep,
    q: &PointQuery,
    flows: &[Vec3<f64>],
    scale: f64,
    blend: f64,
) {
    if blend <= 0.0 {
        return;
    }
    for k in 0..sw.points.len() {
        let alpha = 1.0 - (-q.sigma[k] * sw.deltas[k]).exp();
        if alpha <= 0.0 {
            continue;
        }
        let x = add3(sw.points[k], scale3(flows[k], scale));
        let Ok([u, v]) = project(camera, x) else { continue };
        let t = norm3(sub3(x, sw.origin));
        let plane = ((t - sw.near) / sw.step).floor();
        if !(plane >= 0.0 && plane < buf.planes as f64) {
            continue;
        }
        buf.splat(u, v, plane as usize, q.color[k], alpha, blend);
    }
}

/// The scene at time `frame + delta` seen by `camera`, synthesized by
/// splatting flow-displaced samples of frames `frame` and `frame + 1`.
/// Each displaced sample lands on the sweep plane nearest its distance
/// from the camera.
pub fn render_spacetime(
    scene: &dyn SceneField,
    camera: &Camera<f64>,
    frame: usize,
    delta: f64,
    bounds: Bounds<f64>,
    samples: usize,
) -> Result<SpacetimeRender> {
    if !(0.0..=1.0).contains(&delta) {
        return domain(format!("interpolation fraction {delta} outside [0, 1]"));
    }
    let f = scene.frame_count();
    let has_next = frame + 1 < f;
    if frame >= f || (!has_next && delta > 0.0) {
        return domain(format!("frames {frame} and {} are not both in the sequence", frame + 1));
    }
    let sw = sweep(camera, bounds, samples)?;
    let mut buf = AccumulationBuffer::new(camera.width, camera.height, samples);
    let qi = query_all(scene, &sw, samples, frame as f64)?;
    splat_time(&mut buf, camera, &sw, &qi, &qi.flow_fwd, delta, 1.0 - delta);
    if has_next && delta > 0.0 {
        let qj = query_all(scene, &sw, samples, (frame + 1) as f64)?;
        splat_time(&mut buf, camera, &sw, &qj, &qj.flow_bwd, 1.0 - delta, delta);
    }
    Ok(SpacetimeRender {
        image: buf.composite(),
        buffer: buf,
    })
}

/// Plain render with the fractional time `frame + delta` as field input.
pub fn direct_time_blend(
    scene: &dyn SceneField,
    camera: &Camera<f64>,
    frame: usize,
    delta: f64,
    bounds: Bounds<f64>,
    samples: usize,
) -> Result<Image> {
    if !(0.0..=1.0).contains(&delta) {
        return domain(format!("interpolation fraction {delta} outside [0, 1]"));
    }
    Ok(render_view(scene, camera, frame as f64 + delta, bounds, samples)?.image)
}

#[cfg(test)]
mod tests;
