//! Training objective.
//!
//! Sums over rays are averaged over the rays of the batch and sums over
//! sampled points are averaged over the batch's `B*S` samples, so term
//! weights do not depend on the batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{DynamicRadiance, StaticRadiance};
use crate::geometry::{dot3, Camera};
use crate::render::{
    combine_queries, expected_quantities, render_dynamic, render_neighbors, DynamicRender,
    ExpectedQuantities, RayBatch, WarpedRender,
};
use crate::scalar::Real;

/// Guard on the mean absolute deviation in [`whiten`].
pub const WHITEN_EPS: f64 = 1e-8;

/// Minimum camera depth for the reprojection term.
pub const MIN_PROJECT_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the blended static/dynamic reconstruction.
    pub beta_cb: f64,
    /// Weight of the temporal photometric term.
    pub beta_pho: f64,
    pub beta_w: f64,
    pub beta_z: f64,
    pub beta_cyc: f64,
    pub beta_data: f64,
    pub beta_reg: f64,
    /// Iterations over which the data-term weight falls linearly to zero.
    pub data_decay_iters: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_cb: 1.0,
            beta_pho: 1.0,
            beta_w: 0.1,
            beta_z: 2.0,
            beta_cyc: 1.0,
            beta_data: 0.2,
            beta_reg: 0.1,
            data_decay_iters: 10_000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_cb, self.beta_pho, self.beta_w, self.beta_z, self.beta_cyc, self.beta_data, self.beta_reg];
        if all.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Validation("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Data-term weight at `iteration`.
    pub fn beta_data_at(&self, iteration: usize) -> f64 {
        if iteration >= self.data_decay_iters {
            0.0
        } else {
            self.beta_data * (1.0 - iteration as f64 / self.data_decay_iters as f64)
        }
    }
}

/// Temporal offsets `j - i` used by the photometric term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    offsets: Vec<isize>,
}

impl NeighborhoodSpec {
    pub fn new(mut offsets: Vec<isize>) -> Result<Self> {
        offsets.sort_by_key(|o| (o.abs(), -o));
        offsets.dedup();
        if !offsets.contains(&0) {
            return Err(Error::Validation("neighborhood must contain offset 0".into()));
        }
        if offsets.iter().any(|o| o.abs() > 2) {
            return Err(Error::Validation("neighborhood offsets are limited to +-2".into()));
        }
        Ok(Self { offsets })
    }

    /// `{0, +-1, +-2}`.
    pub fn full() -> Self {
        Self {
            offsets: vec![0, 1, -1, 2, -2],
        }
    }

    /// `{0}` only.
    pub fn single() -> Self {
        Self { offsets: vec![0] }
    }

    pub fn offsets(&self) -> &[isize] {
        &self.offsets
    }
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self::full()
    }
}

/// Per-ray targets. Pixel coordinates are continuous image positions
/// (pixel centers at `u + 0.5`); flows are 2D displacements to the next
/// and previous frame; depth is distance along each camera's optical axis.
#[derive(Debug, Clone)]
pub struct RaySupervision<T> {
    /// `B x 3`.
    pub colors: Tensor<T>,
    pub pixels: Vec<[T; 2]>,
    pub depth: Option<Vec<T>>,
    pub flow_fwd: Option<Vec<[T; 2]>>,
    pub flow_bwd: Option<Vec<[T; 2]>>,
}

/// Field evaluations shared by the dynamic loss terms.
#[derive(Debug, Clone)]
pub struct DynamicPass<T> {
    pub render: DynamicRender,
    /// Warped renders ordered as `0, 1, -1, 2, -2` (missing offsets left out).
    pub warps: Vec<WarpedRender<T>>,
    pub expected: ExpectedQuantities,
}

impl<T: Real> DynamicPass<T> {
    pub fn warp(&self, offset: isize) -> Option<&WarpedRender<T>> {
        self.warps.iter().find(|w| w.offset == offset)
    }
}

pub fn dynamic_pass<T: Real, F: DynamicRadiance<T> + ?Sized>(
    tape: &mut Tape<T>,
    field: &F,
    batch: &RayBatch<T>,
    offsets: &[isize],
) -> Result<DynamicPass<T>> {
    let render = render_dynamic(tape, field, batch)?;
    let warps = render_neighbors(tape, field, batch, &render, offsets)?;
    let expected = expected_quantities(tape, batch, &render)?;
    Ok(DynamicPass {
        render,
        warps,
        expected,
    })
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.scalar(T::zero())
}

fn squared_error<T: Real>(tape: &mut Tape<T>, pred: Var, target: Tensor<T>) -> Result<Var> {
    let t = tape.constant(target);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.sum_cols(sq)
}

fn rows_of<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::from_parts(rows.len(), t.cols(), data)
}

/// Photometric term over the offsets of `neighborhood` present in `pass`,
/// and the number of ray/offset pairs it sums.
pub fn loss_photometric<T: Real>(
    tape: &mut Tape<T>,
    pass: &DynamicPass<T>,
    batch: &RayBatch<T>,
    colors: &Tensor<T>,
    neighborhood: &NeighborhoodSpec,
    beta_w: T,
) -> Result<(Var, usize)> {
    photometric_terms(tape, pass, batch, colors, neighborhood.offsets(), beta_w)
}

pub(crate) fn photometric_terms<T: Real>(
    tape: &mut Tape<T>,
    pass: &DynamicPass<T>,
    batch: &RayBatch<T>,
    colors: &Tensor<T>,
    offsets: &[isize],
    beta_w: T,
) -> Result<(Var, usize)> {
    let rays = T::from_count(batch.len());
    let points = T::from_count(batch.len() * batch.samples_per_ray());
    let mut total = zero(tape);
    let mut count = 0;
    for &o in offsets {
        let Some(w) = pass.warp(o) else { continue };
        let err = squared_error(tape, w.composite.color, rows_of(colors, &w.rays))?;
        let weighted = if o == 0 { err } else { tape.mul(err, w.w_hat)? };
        let sum = tape.sum(weighted)?;
        let term = tape.scale(sum, T::one() / rays)?;
        total = tape.add(total, term)?;
        count += w.rays.len();
        if o != 0 && beta_w > T::zero() {
            let dev = tape.shift(w.sample_weight, -T::one())?;
            let dev = tape.abs(dev)?;
            let sum = tape.sum(dev)?;
            let reg = tape.scale(sum, beta_w / points)?;
            total = tape.add(total, reg)?;
        }
    }
    Ok((total, count))
}

/// Cycle consistency of one-frame flows at the batch samples.
pub fn loss_cycle<T: Real>(
    tape: &mut Tape<T>,
    pass: &DynamicPass<T>,
    batch: &RayBatch<T>,
) -> Result<Var> {
    let points = T::from_count(batch.len() * batch.samples_per_ray());
    let mut total = zero(tape);
    for o in [1, -1] {
        let Some(w) = pass.warp(o) else { continue };
        let Some(back) = w.return_flow else { continue };
        let round = tape.add(w.displacement, back)?;
        let l1 = tape.abs(round)?;
        let l1 = tape.sum_cols(l1)?;
        let gated = tape.mul(l1, w.sample_weight)?;
        let sum = tape.sum(gated)?;
        let term = tape.scale(sum, T::one() / points)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Temporal, spatial and magnitude priors on the predicted flows.
pub fn loss_reg<T: Real>(
    tape: &mut Tape<T>,
    pass: &DynamicPass<T>,
    batch: &RayBatch<T>,
) -> Result<Var> {
    let (b, s) = (batch.len(), batch.samples_per_ray());
    let points = T::from_count(b * s);
    let q = &pass.render.query;
    let mean_l1 = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let a = tape.abs(v)?;
        let sum = tape.sum(a)?;
        tape.scale(sum, T::one() / points)
    };
    let linear = tape.add(q.flow_fwd, q.flow_bwd)?;
    let mut total = mean_l1(tape, linear)?;
    if s > 1 {
        let (lo, hi): (Vec<usize>, Vec<usize>) = (0..b)
            .flat_map(|r| (0..s - 1).map(move |k| (r * s + k, r * s + k + 1)))
            .unzip();
        for flow in [q.flow_fwd, q.flow_bwd] {
            let a = tape.gather_rows(flow, &lo)?;
            let c = tape.gather_rows(flow, &hi)?;
            let d = tape.sub(a, c)?;
            let term = mean_l1(tape, d)?;
            total = tape.add(total, term)?;
        }
    }
    for flow in [q.flow_fwd, q.flow_bwd] {
        let term = mean_l1(tape, flow)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Reprojection of the expected displaced surface point against 2D flow,
/// and the number of ray/offset pairs skipped for lying behind camera `j`.
pub fn loss_geo<T: Real>(
    tape: &mut Tape<T>,
    pass: &DynamicPass<T>,
    batch: &RayBatch<T>,
    sup: &RaySupervision<T>,
    cameras: &[Camera<T>],
) -> Result<(Var, usize)> {
    check_cameras(batch, cameras)?;
    let rays = T::from_count(batch.len());
    let mut total = zero(tape);
    let mut skipped = 0;
    for (o, flow2d, flow3d) in [
        (1isize, &sup.flow_fwd, pass.expected.flow_fwd),
        (-1, &sup.flow_bwd, pass.expected.flow_bwd),
    ] {
        let Some(flow2d) = flow2d else { continue };
        let candidates = batch.rays_with_neighbor(o);
        if candidates.is_empty() {
            continue;
        }
        let moved = tape.add(pass.expected.point, flow3d)?;
        let moved_values = tape.value(moved).clone();
        let mut keep = Vec::with_capacity(candidates.len());
        for &r in &candidates {
            let cam = &cameras[(batch.frames[r] as isize + o) as usize];
            let p = moved_values.row(r);
            let depth = -cam.world_to_camera([p[0], p[1], p[2]])[2];
            if depth > T::c(MIN_PROJECT_DEPTH) {
                keep.push(r);
            } else {
                skipped += 1;
            }
        }
        if keep.is_empty() {
            continue;
        }
        let x = tape.gather_rows(moved, &keep)?;
        let cams: Vec<&Camera<T>> = keep
            .iter()
            .map(|&r| &cameras[(batch.frames[r] as isize + o) as usize])
            .collect();
        let proj = project_on_tape(tape, x, &cams)?;
        let target: Vec<T> = keep
            .iter()
            .flat_map(|&r| {
                let (p, f) = (sup.pixels[r], flow2d[r]);
                [p[0] + f[0], p[1] + f[1]]
            })
            .collect();
        let target = tape.constant(Tensor::from_parts(keep.len(), 2, target));
        let d = tape.sub(proj, target)?;
        let a = tape.abs(d)?;
        let sum = tape.sum(a)?;
        let term = tape.scale(sum, T::one() / rays)?;
        total = tape.add(total, term)?;
    }
    Ok((total, skipped))
}

fn check_cameras<T>(batch: &RayBatch<T>, cameras: &[Camera<T>]) -> Result<()> {
    if cameras.len() < batch.frame_count {
        return Err(Error::Validation(format!(
            "{} cameras for {} frames",
            cameras.len(),
            batch.frame_count
        )));
    }
    Ok(())
}

/// Continuous image coordinates (`n x 2`) of world points `x` (`n x 3`),
/// row `r` seen by `cams[r]`. Points must lie in front of their camera.
pub fn project_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    cams: &[&Camera<T>],
) -> Result<Var> {
    let n = cams.len();
    let centers: Vec<T> = cams.iter().flat_map(|c| c.center).collect();
    let centers = tape.constant(Tensor::from_parts(n, 3, centers));
    let rel = tape.sub(x, centers)?;
    let mut axis = |a: usize| -> Result<Var> {
        let r: Vec<T> = cams
            .iter()
            .flat_map(|c| [c.rotation[0][a], c.rotation[1][a], c.rotation[2][a]])
            .collect();
        let r = tape.constant(Tensor::from_parts(n, 3, r));
        let m = tape.mul(rel, r)?;
        tape.sum_cols(m)
    };
    let (cx, cy, cz) = (axis(0)?, axis(1)?, axis(2)?);
    let column = |f: &dyn Fn(&Camera<T>) -> T| Tensor::column(cams.iter().map(|c| f(c)).collect());
    let depth = tape.neg(cz)?;
    let fx = tape.constant(column(&|c| c.fx));
    let fy = tape.constant(column(&|c| -c.fy));
    let px = tape.constant(column(&|c| c.cx));
    let py = tape.constant(column(&|c| c.cy));
    let u = tape.div(cx, depth)?;
    let u = tape.mul(u, fx)?;
    let u = tape.add(u, px)?;
    let v = tape.div(cy, depth)?;
    let v = tape.mul(v, fy)?;
    let v = tape.add(v, py)?;
    tape.concat(&[u, v])
}

/// `(z - mean) / max(mean |z - mean|, eps)`.
pub fn whiten<T: Real>(values: &[T]) -> Vec<T> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = T::from_count(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let mad = values.iter().map(|&v| (v - mean).abs()).sum::<T>() / n;
    let scale = mad.max(T::c(WHITEN_EPS));
    values.iter().map(|&v| (v - mean) / scale).collect()
}

/// [`whiten`] of an `n x 1` tape value.
pub fn whiten_on_tape<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let mean = tape.mean(z)?;
    let dev = tape.sub(z, mean)?;
    let abs = tape.abs(dev)?;
    let mad = tape.mean(abs)?;
    let scale = tape.clamp_min(mad, T::c(WHITEN_EPS))?;
    tape.div(dev, scale)
}

/// Scale/shift-invariant depth term, whitening over the whole batch.
pub fn loss_depth<T: Real>(
    tape: &mut Tape<T>,
    pass: &DynamicPass<T>,
    batch: &RayBatch<T>,
    gt_depth: &[T],
    cameras: &[Camera<T>],
) -> Result<Var> {
    check_cameras(batch, cameras)?;
    if gt_depth.len() != batch.len() {
        return Err(Error::Validation("one depth target per ray is required".into()));
    }
    if batch.is_empty() {
        return Ok(zero(tape));
    }
    let cos: Vec<T> = (0..batch.len())
        .map(|r| dot3(batch.dirs[r], cameras[batch.frames[r]].forward()))
        .collect();
    let cos = tape.constant(Tensor::column(cos));
    let z = tape.mul(pass.expected.depth, cos)?;
    depth_term(tape, z, gt_depth)
}

/// Mean absolute difference of the whitened `R x 1` predicted depths `z`
/// and the whitened targets.
pub fn depth_term<T: Real>(tape: &mut Tape<T>, z: Var, gt_depth: &[T]) -> Result<Var> {
    if tape.value(z).shape() != (gt_depth.len(), 1) {
        return Err(Error::Validation("one depth target per ray is required".into()));
    }
    let pred = whiten_on_tape(tape, z)?;
    let gt = tape.constant(Tensor::column(whiten(gt_depth)));
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Squared error of the blended static/dynamic render.
pub fn loss_combined_render<T: Real, S: StaticRadiance<T> + ?Sized>(
    tape: &mut Tape<T>,
    static_field: &S,
    pass: &DynamicPass<T>,
    batch: &RayBatch<T>,
    colors: &Tensor<T>,
) -> Result<Var> {
    let positions = tape.constant(batch.positions());
    let sq = static_field.query(tape, positions, &batch.sample_dirs())?;
    let comp = combine_queries(tape, batch, &sq, &pass.render.query)?;
    let err = squared_error(tape, comp.color, colors.clone())?;
    tape.mean(err)
}

/// One term of the total objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossTerm {
    pub name: &'static str,
    pub value: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
    /// Ray/offset pairs dropped from the reprojection term.
    pub geo_skipped: usize,
}

impl LossBreakdown {
    pub fn get(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// `name=value` pairs of every term.
    pub fn describe(&self) -> String {
        self.terms
            .iter()
            .map(|t| format!("{}={}", t.name, t.value))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// `sum weight * value` over the terms.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Everything the objective reads for one batch.
pub struct LossContext<'a, T> {
    pub batch: &'a RayBatch<T>,
    pub supervision: &'a RaySupervision<T>,
    pub cameras: &'a [Camera<T>],
    pub weights: &'a LossWeights,
    pub neighborhood: &'a NeighborhoodSpec,
    pub iteration: usize,
}

/// The full objective. Without a static field the blended-render term is
/// dropped. Terms with zero weight are not evaluated.
pub fn total_loss<T, S, D>(
    tape: &mut Tape<T>,
    static_field: Option<&S>,
    dynamic_field: &D,
    ctx: &LossContext<'_, T>,
) -> Result<LossOutput>
where
    T: Real,
    S: StaticRadiance<T> + ?Sized,
    D: DynamicRadiance<T> + ?Sized,
{
    let w = ctx.weights;
    w.validate()?;
    let batch = ctx.batch;
    let sup = ctx.supervision;
    if sup.colors.shape() != (batch.len(), 3) || sup.pixels.len() != batch.len() {
        return Err(Error::Validation("supervision does not match the batch".into()));
    }
    let mut offsets = if w.beta_pho > 0.0 {
        ctx.neighborhood.offsets().to_vec()
    } else {
        Vec::new()
    };
    if w.beta_cyc > 0.0 {
        for o in [1, -1] {
            if !offsets.contains(&o) {
                offsets.push(o);
            }
        }
    }
    let pass = dynamic_pass(tape, dynamic_field, batch, &offsets)?;
    let beta_data = w.beta_data_at(ctx.iteration);
    let mut terms: Vec<(&'static str, Var, f64)> = Vec::new();
    if let (Some(s), true) = (static_field, w.beta_cb > 0.0) {
        let v = loss_combined_render(tape, s, &pass, batch, &sup.colors)?;
        terms.push(("combined", v, w.beta_cb));
    }
    if w.beta_pho > 0.0 {
        let (pho, _) = loss_photometric(
            tape,
            &pass,
            batch,
            &sup.colors,
            ctx.neighborhood,
            T::c(w.beta_w),
        )?;
        terms.push(("photometric", pho, w.beta_pho));
    }
    if w.beta_cyc > 0.0 {
        let v = loss_cycle(tape, &pass, batch)?;
        terms.push(("cycle", v, w.beta_cyc));
    }
    let mut geo_skipped = 0;
    if beta_data > 0.0 {
        if sup.flow_fwd.is_some() || sup.flow_bwd.is_some() {
            let (v, skipped) = loss_geo(tape, &pass, batch, sup, ctx.cameras)?;
            geo_skipped = skipped;
            terms.push(("geo", v, beta_data));
        }
        if let Some(depth) = &sup.depth {
            if w.beta_z > 0.0 {
                let v = loss_depth(tape, &pass, batch, depth, ctx.cameras)?;
                terms.push(("depth", v, beta_data * w.beta_z));
            }
        }
    }
    if w.beta_reg > 0.0 {
        let v = loss_reg(tape, &pass, batch)?;
        terms.push(("reg", v, w.beta_reg));
    }
    let mut total = zero(tape);
    for &(_, v, weight) in &terms {
        let scaled = tape.scale(v, T::c(weight))?;
        total = tape.add(total, scaled)?;
    }
    let value = tape.scalar_value(total).as_f64();
    let breakdown = LossBreakdown {
        terms: terms
            .iter()
            .map(|&(name, v, weight)| LossTerm {
                name,
                value: tape.scalar_value(v).as_f64(),
                weight,
            })
            .collect(),
        total: value,
        geo_skipped,
    };
    if !value.is_finite() {
        return Err(Error::Divergence(format!(
            "loss is {value} at iteration {} ({})",
            ctx.iteration,
            breakdown.describe()
        )));
    }
    Ok(LossOutput { total, breakdown })
}
