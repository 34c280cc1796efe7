//! Discrete volume rendering on the tape.
//!
//! Sample `k` of a ray with density `sigma_k` over length `delta_k` has
//! opacity `alpha_k = 1 - exp(-sigma_k delta_k)` and transmittance
//! `T_k = exp(-sum_{l<k} sigma_l delta_l)`. Colors, depths, positions,
//! flows and disocclusion weights are all composited with the same
//! weights `T_k alpha_k`.
//!
//! Batched renders work on a [`RayBatch`] of `B` rays with `S` samples
//! each; per-sample tensors are `B*S x c` with the samples of one ray
//! contiguous, per-ray tensors are `B x c`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{domain, Error, Result};
use crate::fields::{DynamicQuery, DynamicRadiance, StaticQuery, StaticRadiance};
use crate::geometry::{Ray, SampleSet, Vec3};
use crate::scalar::Real;

/// Guard on accumulated opacity when normalizing expectations.
pub const ACC_EPS: f64 = 1e-8;

/// Frame index mapped to the `[0, 1]` time input.
pub fn normalized_time<T: Real>(frame: f64, frame_count: usize) -> T {
    if frame_count <= 1 {
        T::zero()
    } else {
        T::c(frame / (frame_count - 1) as f64)
    }
}

/// Rays with their quadrature samples, ready for batched evaluation.
#[derive(Debug, Clone)]
pub struct RayBatch<T> {
    pub origins: Vec<Vec3<T>>,
    pub dirs: Vec<Vec3<T>>,
    /// `B x S` sample positions along each ray.
    pub t_values: Tensor<T>,
    /// `B x S` sample lengths.
    pub deltas: Tensor<T>,
    pub t_far: Vec<T>,
    /// Source frame of each ray.
    pub frames: Vec<usize>,
    pub frame_count: usize,
}

impl<T: Real> RayBatch<T> {
    pub fn new(rays: &[Ray<T>], samples: &[SampleSet<T>], frame_count: usize) -> Result<Self> {
        if rays.len() != samples.len() {
            return domain("one sample set per ray is required");
        }
        let s = samples.first().map_or(0, SampleSet::len);
        if samples.iter().any(|set| set.len() != s) {
            return domain("all rays in a batch need the same sample count");
        }
        let mut t_values = Vec::with_capacity(rays.len() * s);
        let mut deltas = Vec::with_capacity(rays.len() * s);
        for set in samples {
            t_values.extend_from_slice(&set.t_values);
            deltas.extend_from_slice(&set.deltas);
        }
        if rays.iter().any(|r| frame_count > 0 && r.time_index >= frame_count) {
            return domain("ray frame outside the sequence");
        }
        Ok(Self {
            origins: rays.iter().map(|r| r.origin).collect(),
            dirs: rays.iter().map(|r| r.direction).collect(),
            t_values: Tensor::from_parts(rays.len(), s, t_values),
            deltas: Tensor::from_parts(rays.len(), s, deltas),
            t_far: rays.iter().map(|r| r.t_far).collect(),
            frames: rays.iter().map(|r| r.time_index).collect(),
            frame_count,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn samples_per_ray(&self) -> usize {
        self.t_values.cols()
    }

    /// `B*S x 3` world positions of all samples.
    pub fn positions(&self) -> Tensor<T> {
        let s = self.samples_per_ray();
        let mut data = Vec::with_capacity(self.len() * s * 3);
        for r in 0..self.len() {
            let (o, d) = (self.origins[r], self.dirs[r]);
            for &t in self.t_values.row(r) {
                data.extend_from_slice(&[o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            }
        }
        Tensor::from_parts(self.len() * s, 3, data)
    }

    /// `B*S x 3` viewing direction of every sample.
    pub fn sample_dirs(&self) -> Tensor<T> {
        let s = self.samples_per_ray();
        let mut data = Vec::with_capacity(self.len() * s * 3);
        for d in &self.dirs {
            for _ in 0..s {
                data.extend_from_slice(d);
            }
        }
        Tensor::from_parts(self.len() * s, 3, data)
    }

    /// `B*S x 1` normalized time of frame `frame + offset` per sample.
    pub fn sample_times(&self, offset: isize) -> Tensor<T> {
        let s = self.samples_per_ray();
        let mut data = Vec::with_capacity(self.len() * s);
        for &f in &self.frames {
            let t: T = normalized_time(f as f64 + offset as f64, self.frame_count);
            data.extend(std::iter::repeat_n(t, s));
        }
        Tensor::from_parts(self.len() * s, 1, data)
    }

    /// The rays at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let s = self.samples_per_ray();
        let pick = |t: &Tensor<T>| {
            let mut data = Vec::with_capacity(indices.len() * s);
            for &i in indices {
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(indices.len(), s, data)
        };
        Self {
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            dirs: indices.iter().map(|&i| self.dirs[i]).collect(),
            t_values: pick(&self.t_values),
            deltas: pick(&self.deltas),
            t_far: indices.iter().map(|&i| self.t_far[i]).collect(),
            frames: indices.iter().map(|&i| self.frames[i]).collect(),
            frame_count: self.frame_count,
        }
    }

    /// Per-sample row indices of the rays at `indices`.
    pub fn sample_rows(&self, indices: &[usize]) -> Vec<usize> {
        let s = self.samples_per_ray();
        indices.iter().flat_map(|&i| i * s..(i + 1) * s).collect()
    }

    /// Rays whose frame shifted by `offset` exists in the sequence.
    pub fn rays_with_neighbor(&self, offset: isize) -> Vec<usize> {
        (0..self.len())
            .filter(|&r| {
                let j = self.frames[r] as isize + offset;
                j >= 0 && (j as usize) < self.frame_count
            })
            .collect()
    }
}

/// Compositing weights and the quantities every render produces.
#[derive(Debug, Clone, Copy)]
pub struct Composite {
    /// `B x S` weights `T_k alpha_k`.
    pub weights: Var,
    /// `B x 1`.
    pub acc: Var,
    /// `B x 3`.
    pub color: Var,
}

/// Composites per-sample density and color along every ray of `batch`.
pub fn composite_on_tape<T: Real>(
    tape: &mut Tape<T>,
    batch: &RayBatch<T>,
    sigma: Var,
    color: Var,
) -> Result<Composite> {
    let (b, s) = (batch.len(), batch.samples_per_ray());
    let sig = tape.reshape(sigma, b, s)?;
    let deltas = tape.constant(batch.deltas.clone());
    let optical = tape.mul(sig, deltas)?;
    let before = tape.cumsum_exclusive(optical)?;
    let neg_before = tape.neg(before)?;
    let trans = tape.exp(neg_before)?;
    let neg_optical = tape.neg(optical)?;
    let keep = tape.exp(neg_optical)?;
    let alpha = tape.one_minus(keep)?;
    let weights = tape.mul(trans, alpha)?;
    let acc = tape.sum_cols(weights)?;
    let color = weighted_sum(tape, s, weights, color)?;
    Ok(Composite {
        weights,
        acc,
        color,
    })
}

/// `sum_k w_k v_k` per ray for per-sample values `v` (`B*S x c`).
pub fn weighted_sum<T: Real>(
    tape: &mut Tape<T>,
    samples_per_ray: usize,
    weights: Var,
    values: Var,
) -> Result<Var> {
    let n = tape.value(values).rows();
    let w = tape.reshape(weights, n, 1)?;
    let scaled = tape.scale_rows(values, w)?;
    tape.segment_sum(scaled, samples_per_ray)
}

/// `sum_k w_k v_k / max(acc, eps)` per ray.
pub fn weighted_mean<T: Real>(
    tape: &mut Tape<T>,
    samples_per_ray: usize,
    weights: Var,
    acc: Var,
    values: Var,
) -> Result<Var> {
    let total = weighted_sum(tape, samples_per_ray, weights, values)?;
    let guarded = tape.clamp_min(acc, T::c(ACC_EPS))?;
    let one = tape.scalar(T::one());
    let inv = tape.div(one, guarded)?;
    tape.scale_rows(total, inv)
}

/// Expected termination distance; rays with `acc <= eps` report `t_far`.
pub fn expected_depth<T: Real>(
    tape: &mut Tape<T>,
    batch: &RayBatch<T>,
    comp: &Composite,
) -> Result<Var> {
    let t = tape.constant(batch.t_values.clone());
    let wt = tape.mul(comp.weights, t)?;
    let num = tape.sum_cols(wt)?;
    let guarded = tape.clamp_min(comp.acc, T::c(ACC_EPS))?;
    let depth = tape.div(num, guarded)?;
    let acc = tape.value(comp.acc).data().to_vec();
    if acc.iter().all(|&a| a > T::c(ACC_EPS)) {
        return Ok(depth);
    }
    let mask: Vec<T> = acc
        .iter()
        .map(|&a| if a > T::c(ACC_EPS) { T::one() } else { T::zero() })
        .collect();
    let fill: Vec<T> = acc
        .iter()
        .zip(&batch.t_far)
        .map(|(&a, &f)| if a > T::c(ACC_EPS) { T::zero() } else { f })
        .collect();
    let mask = tape.constant(Tensor::column(mask));
    let fill = tape.constant(Tensor::column(fill));
    let kept = tape.mul(depth, mask)?;
    tape.add(kept, fill)
}

/// Dynamic field evaluated at every sample at the rays' own frames.
#[derive(Debug, Clone, Copy)]
pub struct DynamicRender {
    pub query: DynamicQuery,
    pub composite: Composite,
}

pub fn render_dynamic<T: Real, F: DynamicRadiance<T> + ?Sized>(
    tape: &mut Tape<T>,
    field: &F,
    batch: &RayBatch<T>,
) -> Result<DynamicRender> {
    let positions = tape.constant(batch.positions());
    render_dynamic_at(tape, field, batch, positions, 0)
}

/// Dynamic render at frame `frame + offset` with given sample positions.
fn render_dynamic_at<T: Real, F: DynamicRadiance<T> + ?Sized>(
    tape: &mut Tape<T>,
    field: &F,
    batch: &RayBatch<T>,
    positions: Var,
    offset: isize,
) -> Result<DynamicRender> {
    let query = field.query(
        tape,
        positions,
        &batch.sample_dirs(),
        &batch.sample_times(offset),
    )?;
    let composite = composite_on_tape(tape, batch, query.sigma, query.color)?;
    Ok(DynamicRender { query, composite })
}

#[derive(Debug, Clone, Copy)]
pub struct StaticRender {
    pub query: StaticQuery,
    pub composite: Composite,
}

pub fn render_static<T: Real, F: StaticRadiance<T> + ?Sized>(
    tape: &mut Tape<T>,
    field: &F,
    batch: &RayBatch<T>,
) -> Result<StaticRender> {
    let positions = tape.constant(batch.positions());
    let query = field.query(tape, positions, &batch.sample_dirs())?;
    let composite = composite_on_tape(tape, batch, query.sigma, query.color)?;
    Ok(StaticRender { query, composite })
}

/// Per-sample blend of static and dynamic outputs: density
/// `v sigma + (1 - v) sigma_i` and the color whose product with that
/// density is `v c sigma + (1 - v) c_i sigma_i`.
pub fn blend_samples<T: Real>(
    tape: &mut Tape<T>,
    stat: &StaticQuery,
    dyn_q: &DynamicQuery,
) -> Result<(Var, Var)> {
    let v = stat.blend;
    let one_minus_v = tape.one_minus(v)?;
    let static_part = tape.mul(v, stat.sigma)?;
    let dynamic_part = tape.mul(one_minus_v, dyn_q.sigma)?;
    let sigma = tape.add(static_part, dynamic_part)?;
    let zero_mask: Vec<T> = tape
        .value(sigma)
        .data()
        .iter()
        .map(|&s| if s == T::zero() { T::one() } else { T::zero() })
        .collect();
    let safe = if zero_mask.iter().any(|&m| m != T::zero()) {
        let m = tape.constant(Tensor::column(zero_mask));
        tape.add(sigma, m)?
    } else {
        sigma
    };
    let lambda = tape.div(static_part, safe)?;
    let one_minus_lambda = tape.one_minus(lambda)?;
    let cs = tape.scale_rows(stat.color, lambda)?;
    let cd = tape.scale_rows(dyn_q.color, one_minus_lambda)?;
    let color = tape.add(cs, cd)?;
    Ok((sigma, color))
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedRender {
    pub static_query: StaticQuery,
    pub dynamic: DynamicRender,
    pub composite: Composite,
}

/// Static and dynamic fields rendered through one blended integral.
pub fn render_combined<T: Real, S, D>(
    tape: &mut Tape<T>,
    static_field: &S,
    dynamic_field: &D,
    batch: &RayBatch<T>,
) -> Result<CombinedRender>
where
    S: StaticRadiance<T> + ?Sized,
    D: DynamicRadiance<T> + ?Sized,
{
    let positions = tape.constant(batch.positions());
    let dynamic = render_dynamic_at(tape, dynamic_field, batch, positions, 0)?;
    let static_query = static_field.query(tape, positions, &batch.sample_dirs())?;
    let composite = combine_queries(tape, batch, &static_query, &dynamic.query)?;
    Ok(CombinedRender {
        static_query,
        dynamic,
        composite,
    })
}

pub fn combine_queries<T: Real>(
    tape: &mut Tape<T>,
    batch: &RayBatch<T>,
    stat: &StaticQuery,
    dyn_q: &DynamicQuery,
) -> Result<Composite> {
    let (sigma, color) = blend_samples(tape, stat, dyn_q)?;
    composite_on_tape(tape, batch, sigma, color)
}

/// The time-`j` scene rendered along time-`i` rays with every sample
/// displaced by scene flow from `i` to `j`.
#[derive(Debug, Clone)]
pub struct WarpedRender<T> {
    /// `j - i`.
    pub offset: isize,
    /// Rays of the source batch that have frame `j`, in batch order.
    pub rays: Vec<usize>,
    pub batch: RayBatch<T>,
    pub composite: Composite,
    /// `R x 1` composited disocclusion weight.
    pub w_hat: Var,
    /// `R*S x 1` disocclusion weight `w_{i->j}` at each sample (chained
    /// product for two-frame offsets); constant ones when `j = i`.
    pub sample_weight: Var,
    /// `R*S x 3` total displacement `x_{i->j} - x`.
    pub displacement: Var,
    /// `R*S x 3` flow `f_{j->i}` evaluated at the displaced point, for
    /// one-frame offsets.
    pub return_flow: Option<Var>,
    /// Query at the displaced positions and frame `j`.
    pub target_query: DynamicQuery,
}

/// Warped renders for every offset in `offsets` (each in `-2..=2`),
/// reusing the time-`i` query `base` of the full batch.
pub fn render_neighbors<T: Real, F: DynamicRadiance<T> + ?Sized>(
    tape: &mut Tape<T>,
    field: &F,
    batch: &RayBatch<T>,
    base: &DynamicRender,
    offsets: &[isize],
) -> Result<Vec<WarpedRender<T>>> {
    if let Some(bad) = offsets.iter().find(|o| o.abs() > 2) {
        return domain(format!("temporal offset {bad} exceeds two frames"));
    }
    let s = batch.samples_per_ray();
    let positions = batch.positions();
    let mut out = Vec::new();
    for &o in offsets.iter().filter(|&&o| o == 0) {
        let ones = tape.constant(Tensor::filled(batch.len(), 1, T::one()));
        let sample_weight = tape.constant(Tensor::filled(batch.len() * s, 1, T::one()));
        let displacement = tape.constant(Tensor::zeros(batch.len() * s, 3));
        out.push(WarpedRender {
            offset: o,
            rays: (0..batch.len()).collect(),
            batch: batch.clone(),
            composite: base.composite,
            w_hat: ones,
            sample_weight,
            displacement,
            return_flow: None,
            target_query: base.query,
        });
    }
    for dir in [1isize, -1] {
        let wants_one = offsets.contains(&dir);
        let wants_two = offsets.contains(&(2 * dir));
        if !wants_one && !wants_two {
            continue;
        }
        let rays = batch.rays_with_neighbor(dir);
        if rays.is_empty() {
            continue;
        }
        let sub = batch.subset(&rays);
        let rows = batch.sample_rows(&rays);
        let (flow, weight) = if dir > 0 {
            (base.query.flow_fwd, base.query.w_fwd)
        } else {
            (base.query.flow_bwd, base.query.w_bwd)
        };
        let flow = tape.gather_rows(flow, &rows)?;
        let weight = tape.gather_rows(weight, &rows)?;
        let x0: Vec<T> = rows
            .iter()
            .flat_map(|&r| positions.row(r).iter().copied())
            .collect();
        let x0 = tape.constant(Tensor::from_parts(rows.len(), 3, x0));
        let x1 = tape.add(x0, flow)?;
        let one = render_dynamic_at(tape, field, &sub, x1, dir)?;
        let (onward, return_flow, onward_w) = if dir > 0 {
            (one.query.flow_fwd, one.query.flow_bwd, one.query.w_fwd)
        } else {
            (one.query.flow_bwd, one.query.flow_fwd, one.query.w_bwd)
        };
        if wants_one {
            let w_hat = weighted_sum(tape, s, one.composite.weights, weight)?;
            out.push(WarpedRender {
                offset: dir,
                rays: rays.clone(),
                batch: sub.clone(),
                composite: one.composite,
                w_hat,
                sample_weight: weight,
                displacement: flow,
                return_flow: Some(return_flow),
                target_query: one.query,
            });
        }
        if wants_two {
            let local = sub.rays_with_neighbor(2 * dir);
            if local.is_empty() {
                continue;
            }
            let sub2 = sub.subset(&local);
            let local_rows = sub.sample_rows(&local);
            let step = tape.gather_rows(onward, &local_rows)?;
            let first = tape.gather_rows(x1, &local_rows)?;
            let x2 = tape.add(first, step)?;
            let w1 = tape.gather_rows(weight, &local_rows)?;
            let w2 = tape.gather_rows(onward_w, &local_rows)?;
            let chained = tape.mul(w1, w2)?;
            let f1 = tape.gather_rows(flow, &local_rows)?;
            let displacement = tape.add(f1, step)?;
            let two = render_dynamic_at(tape, field, &sub2, x2, 2 * dir)?;
            let w_hat = weighted_sum(tape, s, two.composite.weights, chained)?;
            out.push(WarpedRender {
                offset: 2 * dir,
                rays: local.iter().map(|&k| rays[k]).collect(),
                batch: sub2,
                composite: two.composite,
                w_hat,
                sample_weight: chained,
                displacement,
                return_flow: None,
                target_query: two.query,
            });
        }
    }
    out.sort_by_key(|w| (w.offset.abs(), -w.offset));
    Ok(out)
}

/// Warped render for a single offset `j - i` in `-2..=2`.
pub fn render_warped<T: Real, F: DynamicRadiance<T> + ?Sized>(
    tape: &mut Tape<T>,
    field: &F,
    batch: &RayBatch<T>,
    offset: isize,
) -> Result<WarpedRender<T>> {
    if offset.abs() > 2 {
        return domain(format!("temporal offset {offset} exceeds two frames"));
    }
    let base = render_dynamic(tape, field, batch)?;
    let mut all = render_neighbors(tape, field, batch, &base, &[offset])?;
    all.pop()
        .ok_or_else(|| Error::Domain(format!("no ray has a frame at offset {offset}")))
}

/// Volume-rendered 3D point, scene flow and depth along time-`i` rays.
#[derive(Debug, Clone, Copy)]
pub struct ExpectedQuantities {
    /// `B x 3`.
    pub point: Var,
    /// `B x 3` expected `f_{i->i+1}`.
    pub flow_fwd: Var,
    /// `B x 3` expected `f_{i->i-1}`.
    pub flow_bwd: Var,
    /// `B x 1` expected termination distance.
    pub depth: Var,
}

pub fn expected_quantities<T: Real>(
    tape: &mut Tape<T>,
    batch: &RayBatch<T>,
    render: &DynamicRender,
) -> Result<ExpectedQuantities> {
    let s = batch.samples_per_ray();
    let c = &render.composite;
    let positions = tape.constant(batch.positions());
    let point = weighted_mean(tape, s, c.weights, c.acc, positions)?;
    let flow_fwd = weighted_mean(tape, s, c.weights, c.acc, render.query.flow_fwd)?;
    let flow_bwd = weighted_mean(tape, s, c.weights, c.acc, render.query.flow_bwd)?;
    let depth = expected_depth(tape, batch, c)?;
    Ok(ExpectedQuantities {
        point,
        flow_fwd,
        flow_bwd,
        depth,
    })
}

/// One sample handed to [`composite`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleValue<T> {
    pub t: T,
    pub color: Vec3<T>,
    pub sigma: T,
    pub point: Vec3<T>,
    pub flow: Vec3<T>,
    pub weight: T,
}

/// Composited values of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRenderResult<T> {
    pub color: Vec3<T>,
    pub depth: T,
    pub acc: T,
    pub expected_point: Vec3<T>,
    pub expected_flow: Vec3<T>,
    /// Composited auxiliary weight (`w_hat` for warped renders).
    pub weight: T,
    /// `(T_k, alpha_k)` per sample.
    pub per_sample: Vec<(T, T)>,
}

/// Reference compositing of one ray from plain values.
pub fn composite<T: Real>(
    samples: &[SampleValue<T>],
    deltas: &[T],
    t_far: T,
) -> Result<RayRenderResult<T>> {
    if samples.len() != deltas.len() {
        return domain("one delta per sample is required");
    }
    if samples.iter().any(|s| !(s.sigma >= T::zero())) {
        return domain("negative density");
    }
    if deltas.iter().any(|d| !(*d >= T::zero())) {
        return domain("negative sample length");
    }
    let mut optical = T::zero();
    let mut color = [T::zero(); 3];
    let mut point = [T::zero(); 3];
    let mut flow = [T::zero(); 3];
    let (mut acc, mut depth, mut weight) = (T::zero(), T::zero(), T::zero());
    let mut per_sample = Vec::with_capacity(samples.len());
    for (s, &delta) in samples.iter().zip(deltas) {
        let od = s.sigma * delta;
        let trans = (-optical).exp();
        let alpha = T::one() - (-od).exp();
        let w = trans * alpha;
        for c in 0..3 {
            color[c] += s.color[c] * w;
            point[c] += s.point[c] * w;
            flow[c] += s.flow[c] * w;
        }
        acc += w;
        depth += w * s.t;
        weight += s.weight * w;
        per_sample.push((trans, alpha));
        optical += od;
    }
    let eps = T::c(ACC_EPS);
    let norm = T::one() / acc.max(eps);
    Ok(RayRenderResult {
        color,
        depth: if acc > eps { depth * norm } else { t_far },
        acc,
        expected_point: point.map(|v| v * norm),
        expected_flow: flow.map(|v| v * norm),
        weight,
        per_sample,
    })
}

/// Plain-value per-ray results of a batched dynamic render.
pub fn ray_results<T: Real>(
    tape: &mut Tape<T>,
    batch: &RayBatch<T>,
    render: &DynamicRender,
    w_hat: Option<Var>,
) -> Result<Vec<RayRenderResult<T>>> {
    let e = expected_quantities(tape, batch, render)?;
    let c = &render.composite;
    let s = batch.samples_per_ray();
    let sigma = tape.value(render.query.sigma).clone();
    let mut out = Vec::with_capacity(batch.len());
    for r in 0..batch.len() {
        let mut per_sample = Vec::with_capacity(s);
        let mut optical = T::zero();
        for k in 0..s {
            let od = sigma.get(r * s + k, 0) * batch.deltas.get(r, k);
            per_sample.push(((-optical).exp(), T::one() - (-od).exp()));
            optical += od;
        }
        let v3 = |v: Var| {
            let t = tape.value(v);
            [t.get(r, 0), t.get(r, 1), t.get(r, 2)]
        };
        out.push(RayRenderResult {
            color: v3(c.color),
            depth: tape.value(e.depth).get(r, 0),
            acc: tape.value(c.acc).get(r, 0),
            expected_point: v3(e.point),
            expected_flow: v3(e.flow_fwd),
            weight: w_hat.map_or(T::one(), |w| tape.value(w).get(r, 0)),
            per_sample,
        });
    }
    Ok(out)
}

/// Renders one ray through `field` at the ray's frame.
pub fn render_ray<T: Real, F: DynamicRadiance<T> + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    samples: &SampleSet<T>,
    frame_count: usize,
) -> Result<RayRenderResult<T>> {
    let batch = RayBatch::new(std::slice::from_ref(ray), std::slice::from_ref(samples), frame_count)?;
    let mut tape = Tape::new();
    let render = render_dynamic(&mut tape, field, &batch)?;
    Ok(ray_results(&mut tape, &batch, &render, None)?.remove(0))
}
