//! Joint optimization of the static and dynamic fields.
//!
//! Each iteration draws a batch of rays uniformly over (frame, pixel),
//! evaluates the full objective on one tape, backpropagates and applies a
//! bias-corrected Adam update to the concatenated parameter vector.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Tensor, Var};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fields::{DynamicQuery, DynamicRadiance, FieldArch, FieldKind, MlpParams};
use crate::formats::Image;
use crate::geometry::{generate_ray, stratified_samples, Bounds};
use crate::losses::{total_loss, LossBreakdown, LossContext, LossWeights, NeighborhoodSpec, RaySupervision};
use crate::model::Model;
use crate::render::RayBatch;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NSFC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Loss terms in log column order.
pub const LOG_TERMS: [&str; 6] = ["combined", "photometric", "cycle", "geo", "depth", "reg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parts of the full model that can be switched off for ablations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub static_branch: bool,
    /// Temporal warping and every flow term. Off gives a time-conditioned
    /// radiance field supervised by its own frame only.
    pub scene_flow: bool,
    pub disocclusion_weights: bool,
    pub depth_prior: bool,
    pub flow_prior: bool,
    pub cycle: bool,
    pub reg: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            static_branch: true,
            scene_flow: true,
            disocclusion_weights: true,
            depth_prior: true,
            flow_prior: true,
            cycle: true,
            reg: true,
        }
    }
}

impl Components {
    /// A plain radiance field with a time input and no priors.
    pub fn nerf_time() -> Self {
        Self {
            static_branch: false,
            scene_flow: false,
            disocclusion_weights: false,
            depth_prior: false,
            flow_prior: false,
            cycle: false,
            reg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    /// Jittered samples; bin midpoints when false.
    pub stratified: bool,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossWeights,
    pub neighborhood: Vec<isize>,
    /// When set, the data term decays to zero over this fraction of the
    /// run instead of `loss.data_decay_iters`.
    pub data_decay_fraction: Option<f64>,
    /// Learning-rate multiplier reached at the last iteration, approached
    /// exponentially. `None` keeps the rate fixed.
    pub lr_decay: Option<f64>,
    /// Iterations between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Record zero wall time so every output file is reproducible.
    pub deterministic: bool,
    /// Train against the float images when the dataset stores them.
    pub use_float_targets: bool,
    /// Zero the dynamic field's time weights at initialization.
    pub time_invariant_init: bool,
    pub dynamic_arch: FieldArch,
    pub static_arch: FieldArch,
    pub components: Components,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            iterations: 20_000,
            rays_per_batch: 256,
            samples_per_ray: 128,
            stratified: true,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossWeights::default(),
            neighborhood: NeighborhoodSpec::full().offsets().to_vec(),
            data_decay_fraction: Some(0.5),
            lr_decay: None,
            checkpoint_interval: 0,
            deterministic: false,
            use_float_targets: false,
            time_invariant_init: false,
            dynamic_arch: FieldArch::dynamic(),
            static_arch: FieldArch::static_field(),
            components: Components::default(),
        }
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning_rate must be positive");
        }
        if self.rays_per_batch == 0 {
            return invalid("rays_per_batch must be positive");
        }
        if self.samples_per_ray < 2 {
            return invalid("samples_per_ray must be at least 2");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return invalid("adam needs beta1, beta2 in [0, 1) and eps > 0");
        }
        if let Some(f) = self.data_decay_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return invalid("data_decay_fraction must lie in (0, 1]");
            }
        }
        if let Some(d) = self.lr_decay {
            if !(d.is_finite() && d > 0.0) {
                return invalid("lr_decay must be positive");
            }
        }
        self.loss.validate()?;
        NeighborhoodSpec::new(self.neighborhood.clone())?;
        self.dynamic_arch.validate()?;
        self.static_arch.validate()?;
        if self.dynamic_arch.kind != FieldKind::Dynamic || self.static_arch.kind != FieldKind::Static {
            return invalid("dynamic_arch and static_arch have the wrong kinds");
        }
        Ok(())
    }

    /// Loss weights and neighborhood after applying the data-decay
    /// schedule and the component switches.
    pub fn effective_objective(&self) -> Result<(LossWeights, NeighborhoodSpec)> {
        let mut w = self.loss.clone();
        if let Some(f) = self.data_decay_fraction {
            w.data_decay_iters = ((f * self.iterations as f64).round() as usize).max(1);
        }
        let c = &self.components;
        let mut nbhd = NeighborhoodSpec::new(self.neighborhood.clone())?;
        if !c.scene_flow {
            nbhd = NeighborhoodSpec::single();
            w.beta_cyc = 0.0;
            w.beta_reg = 0.0;
        }
        if !c.cycle {
            w.beta_cyc = 0.0;
        }
        if !c.reg {
            w.beta_reg = 0.0;
        }
        if !c.disocclusion_weights {
            w.beta_w = 0.0;
        }
        if !c.static_branch {
            w.beta_cb = 0.0;
        }
        Ok((w, nbhd))
    }

    /// Learning rate used at `iteration`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.lr_decay {
            Some(d) if self.iterations > 0 => {
                self.learning_rate * d.powf(iteration as f64 / self.iterations as f64)
            }
            _ => self.learning_rate,
        }
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f64>>) -> Self {
        let m: Vec<Tensor<f64>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<f64>>,
    grads: &[Tensor<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let params: Vec<&mut Tensor<f64>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return invalid("optimizer state does not match the parameters");
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.into_iter().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rays of one batch with their targets.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub rays: RayBatch<f64>,
    pub supervision: RaySupervision<f64>,
}

fn pixel2(img: &Image, u: usize, v: usize) -> [f64; 2] {
    [img.get(u, v, 0), img.get(u, v, 1)]
}

/// Draws `n` rays uniformly over (frame, pixel) of the training views and
/// attaches color, depth and 2D flow targets.
pub fn sample_ray_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    targets: &[Image],
    rng: &mut R,
    n: usize,
    samples: usize,
    stratified: bool,
) -> Result<TrainBatch> {
    let f = dataset.frame_count;
    let views = &dataset.train;
    if f == 0 || views.len() != f || targets.len() != f {
        return invalid("dataset needs one training view per frame");
    }
    let has_flow = dataset.flow_fwd.len() + 1 == f && dataset.flow_bwd.len() + 1 == f;
    let has_depth = views.depth.len() == f;
    let mut rays = Vec::with_capacity(n);
    let mut sets = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    let mut pixels = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut flow_fwd = Vec::with_capacity(n);
    let mut flow_bwd = Vec::with_capacity(n);
    for _ in 0..n {
        let frame = rng.random_range(0..f);
        let cam = &views.cameras[frame];
        let u = rng.random_range(0..cam.width);
        let v = rng.random_range(0..cam.height);
        let ray = generate_ray(cam, [u as f64, v as f64], frame, dataset.bounds)?;
        sets.push(stratified_samples(&ray, samples, rng, stratified)?);
        rays.push(ray);
        colors.extend_from_slice(targets[frame].pixel(u, v));
        pixels.push([u as f64 + 0.5, v as f64 + 0.5]);
        if has_depth {
            depth.push(views.depth[frame].get(u, v, 0));
        }
        if has_flow {
            flow_fwd.push(if frame + 1 < f { pixel2(&dataset.flow_fwd[frame], u, v) } else { [0.0; 2] });
            flow_bwd.push(if frame > 0 { pixel2(&dataset.flow_bwd[frame - 1], u, v) } else { [0.0; 2] });
        }
    }
    Ok(TrainBatch {
        rays: RayBatch::new(&rays, &sets, f)?,
        supervision: RaySupervision {
            colors: Tensor::new(n, 3, colors)?,
            pixels,
            depth: has_depth.then_some(depth),
            flow_fwd: has_flow.then_some(flow_fwd),
            flow_bwd: has_flow.then_some(flow_bwd),
        },
    })
}

/// Dynamic field with both disocclusion weights replaced by one.
struct UnitWeights<'a, D: ?Sized>(&'a D);

impl<D: DynamicRadiance<f64> + ?Sized> DynamicRadiance<f64> for UnitWeights<'_, D> {
    fn query(
        &self,
        tape: &mut Tape<f64>,
        positions: Var,
        dirs: &Tensor<f64>,
        times: &Tensor<f64>,
    ) -> Result<DynamicQuery> {
        let mut q = self.0.query(tape, positions, dirs, times)?;
        let ones = tape.constant(Tensor::filled(dirs.rows(), 1, 1.0));
        q.w_fwd = ones;
        q.w_bwd = ones;
        Ok(q)
    }
}

/// Fresh networks for a sequence, drawn from `rng`.
pub fn init_model<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    frame_count: usize,
    bounds: Bounds<f64>,
    rng: &mut R,
) -> Result<Model> {
    let mut dynamic = MlpParams::init(&cfg.dynamic_arch, rng)?;
    if cfg.time_invariant_init {
        dynamic.zero_time_inputs();
    }
    let static_field = if cfg.components.static_branch {
        Some(MlpParams::init(&cfg.static_arch, rng)?)
    } else {
        None
    };
    Ok(Model {
        dynamic,
        static_field,
        frame_count,
        bounds,
    })
}

/// Loss and gradients of one batch.
pub struct Step {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Tensor<f64>>,
}

/// Evaluates the objective on `batch` and backpropagates to every tensor
/// of `model` (dynamic tensors first).
pub fn loss_and_gradients(
    model: &Model,
    batch: &TrainBatch,
    cameras: &[crate::geometry::Camera<f64>],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Step> {
    let (weights, nbhd) = cfg.effective_objective()?;
    let c = &cfg.components;
    let sup = &batch.supervision;
    let supervision = RaySupervision {
        colors: sup.colors.clone(),
        pixels: sup.pixels.clone(),
        depth: sup.depth.clone().filter(|_| c.depth_prior),
        flow_fwd: sup.flow_fwd.clone().filter(|_| c.flow_prior && c.scene_flow),
        flow_bwd: sup.flow_bwd.clone().filter(|_| c.flow_prior && c.scene_flow),
    };
    let mut tape = Tape::new();
    let dynamic = model.dynamic.bind(&mut tape, 0);
    let n_dyn = model.dynamic.num_tensors();
    let stat = model.static_field.as_ref().map(|s| s.bind(&mut tape, n_dyn));
    let ctx = LossContext {
        batch: &batch.rays,
        supervision: &supervision,
        cameras,
        weights: &weights,
        neighborhood: &nbhd,
        iteration,
    };
    let out = if c.disocclusion_weights {
        total_loss(&mut tape, stat.as_ref(), &dynamic, &ctx)?
    } else {
        total_loss(&mut tape, stat.as_ref(), &UnitWeights(&dynamic), &ctx)?
    };
    let g = tape.backward(out.total)?;
    let grads: Vec<Tensor<f64>> = model
        .tensors()
        .enumerate()
        .map(|(k, t)| g.get_or_zeros(ParamId(k), t.rows(), t.cols()))
        .collect();
    if !grads.iter().all(Tensor::all_finite) {
        return Err(Error::Divergence(format!(
            "non-finite gradient at iteration {iteration} ({})",
            out.breakdown.describe()
        )));
    }
    Ok(Step {
        breakdown: out.breakdown,
        grads,
    })
}

/// One line of the loss-curve log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    /// Unweighted term values in [`LOG_TERMS`] order; absent terms are `None`.
    pub terms: Vec<Option<f64>>,
    pub total: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("iteration,{},total,wall_time\n", LOG_TERMS.join(","));
        for r in &self.rows {
            let terms: Vec<String> = r
                .terms
                .iter()
                .map(|t| t.map(|v| format!("{v:e}")).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{},{},{:e},{:.3}", r.iteration, terms.join(","), r.total, r.wall_time);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    iteration: usize,
    frame_count: usize,
    near: f64,
    far: f64,
    dynamic_arch: FieldArch,
    static_arch: Option<FieldArch>,
    dynamic_values: usize,
    static_values: usize,
}

/// A saved model and the iteration it was saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub iteration: usize,
}

/// Layout: magic `NSFC`, `u32` version, `u64` header length, JSON header,
/// then every parameter as little-endian `f64`, dynamic network first.
pub fn checkpoint_bytes(model: &Model, iteration: usize) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        iteration,
        frame_count: model.frame_count,
        near: model.bounds.near,
        far: model.bounds.far,
        dynamic_arch: model.dynamic.arch.clone(),
        static_arch: model.static_field.as_ref().map(|s| s.arch.clone()),
        dynamic_values: model.dynamic.num_values(),
        static_values: model.static_field.as_ref().map_or(0, MlpParams::num_values),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (header.dynamic_values + header.static_values));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
        return format_err("not a checkpoint file");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let Some(json) = bytes.get(16..16 + len) else {
        return format_err("truncated checkpoint header");
    };
    let h: CheckpointHeader = serde_json::from_slice(json)?;
    let body = &bytes[16 + len..];
    if body.len() != 8 * (h.dynamic_values + h.static_values) {
        return format_err("checkpoint parameter count does not match its header");
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (dv, sv) = values.split_at(h.dynamic_values);
    let dynamic = MlpParams::from_flat(h.dynamic_arch, dv)?;
    let static_field = match h.static_arch {
        Some(arch) => Some(MlpParams::from_flat(arch, sv)?),
        None if sv.is_empty() => None,
        None => return format_err("static parameters without an architecture"),
    };
    Ok(Checkpoint {
        model: Model {
            dynamic,
            static_field,
            frame_count: h.frame_count,
            bounds: Bounds { near: h.near, far: h.far },
        },
        iteration: h.iteration,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, iteration: usize) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, iteration)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub log: TrainLog,
    pub optimizer: OptimizerState,
}

/// Name of the final checkpoint inside the output directory.
pub const FINAL_CHECKPOINT: &str = "final.nsfc";
pub const LOG_FILE: &str = "log.csv";

/// Runs the optimization. With `out_dir`, writes `log.csv`, intermediate
/// checkpoints `ckpt_XXXXXX.nsfc` and `final.nsfc`; on divergence the log
/// up to the failing iteration is written before the error is returned.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(cfg, dataset.frame_count, dataset.bounds, &mut rng)?;
    let mut state = OptimizerState::new(model.tensors());
    let targets = dataset.targets(cfg.use_float_targets);
    let mut log = TrainLog::default();
    let start = Instant::now();
    let write_log = |log: &TrainLog| -> Result<()> {
        if let Some(dir) = out_dir {
            fs::write(dir.join(LOG_FILE), log.to_csv())?;
        }
        Ok(())
    };
    for it in 0..cfg.iterations {
        let batch = sample_ray_batch(
            dataset,
            targets,
            &mut rng,
            cfg.rays_per_batch,
            cfg.samples_per_ray,
            cfg.stratified,
        )?;
        let step = match loss_and_gradients(&model, &batch, &dataset.train.cameras, cfg, it) {
            Ok(s) => s,
            Err(e) => {
                write_log(&log)?;
                return Err(e);
            }
        };
        adam_step(
            model.tensors_mut(),
            &step.grads,
            &mut state,
            cfg.learning_rate_at(it),
            &cfg.adam,
        )?;
        let b = &step.breakdown;
        log.rows.push(LogRow {
            iteration: it,
            terms: LOG_TERMS.iter().map(|n| b.get(n).map(|t| t.value)).collect(),
            total: b.total,
            wall_time: if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
        });
        let done = it + 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.iterations {
                save_checkpoint(&dir.join(format!("ckpt_{done:06}.nsfc")), &model, done)?;
                write_log(&log)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &model, cfg.iterations)?;
        write_log(&log)?;
    }
    Ok(TrainResult {
        model,
        log,
        optimizer: state,
    })
}
