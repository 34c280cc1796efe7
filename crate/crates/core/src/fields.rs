//! Learned scene representations.
//!
//! The dynamic field maps `(x, d, i)` to color, density, forward/backward
//! scene flow and the two disocclusion weights. The static field maps
//! `(x, d)` to color, density and the static/dynamic blend weight `v`.
//! Both share one MLP layout: a ReLU trunk over encoded position (and
//! time), view-independent heads off the trunk, and a small view-dependent
//! color branch that sees the encoded direction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inverse, ParamId, Tape, Tensor, Var};
use crate::error::{domain, Error, Result};
use crate::geometry::{encoded_len, positional_encode, Vec3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Dynamic,
    Static,
}

/// Layer layout of a field network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldArch {
    pub kind: FieldKind,
    /// Number of trunk layers.
    pub depth: usize,
    pub width: usize,
    /// Trunk layer whose input is concatenated with the encoded input.
    pub skip: Option<usize>,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub time_freqs: usize,
    pub include_input: bool,
    pub color_width: usize,
}

impl FieldArch {
    pub fn dynamic() -> Self {
        Self {
            kind: FieldKind::Dynamic,
            depth: 4,
            width: 64,
            skip: Some(2),
            pos_freqs: 8,
            dir_freqs: 4,
            time_freqs: 4,
            include_input: true,
            color_width: 32,
        }
    }

    pub fn static_field() -> Self {
        Self {
            kind: FieldKind::Static,
            time_freqs: 0,
            ..Self::dynamic()
        }
    }

    /// Same layout with a different trunk size.
    pub fn with_size(mut self, depth: usize, width: usize) -> Self {
        self.depth = depth;
        self.width = width;
        self.color_width = (width / 2).max(1);
        self
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(3, self.pos_freqs, self.include_input)
    }

    pub fn time_dim(&self) -> usize {
        match self.kind {
            FieldKind::Dynamic => encoded_len(1, self.time_freqs, self.include_input),
            FieldKind::Static => 0,
        }
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(3, self.dir_freqs, self.include_input)
    }

    pub fn input_dim(&self) -> usize {
        self.pos_dim() + self.time_dim()
    }

    fn has_skip(&self, layer: usize) -> bool {
        layer > 0 && self.skip == Some(layer)
    }

    /// Output width of the view-independent head.
    fn head_dim(&self) -> usize {
        match self.kind {
            // sigma, flow fwd (3), flow bwd (3), w fwd, w bwd
            FieldKind::Dynamic => 9,
            // sigma, blend
            FieldKind::Static => 2,
        }
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        for layer in 0..self.depth {
            let fan_in = if layer == 0 {
                self.input_dim()
            } else if self.has_skip(layer) {
                self.width + self.input_dim()
            } else {
                self.width
            };
            shapes.push((fan_in, self.width));
            shapes.push((1, self.width));
        }
        shapes.push((self.width, self.head_dim()));
        shapes.push((1, self.head_dim()));
        shapes.push((self.width, self.width));
        shapes.push((1, self.width));
        shapes.push((self.width + self.dir_dim(), self.color_width));
        shapes.push((1, self.color_width));
        shapes.push((self.color_width, 3));
        shapes.push((1, 3));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::Validation("field layers must be non-empty".into()));
        }
        if let Some(s) = self.skip {
            if s == 0 {
                return Err(Error::Validation("skip layer must be >= 1".into()));
            }
        }
        if self.kind == FieldKind::Static && self.time_freqs != 0 {
            return Err(Error::Validation("static field takes no time input".into()));
        }
        Ok(())
    }
}

/// Weights and biases of one field network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub arch: FieldArch,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> MlpParams<T> {
    /// Fan-in scaled uniform init for the trunk; zero flow head; disocclusion
    /// bias `+4`; density bias giving `softplus(b) = 0.5`.
    pub fn init<R: Rng + ?Sized>(arch: &FieldArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols)
                .map(|_| T::c(rng.random_range(-bound..bound)))
                .collect();
            Tensor::from_parts(rows, cols, data)
        };
        let trunk_len = 2 * arch.depth;
        for (k, &(rows, cols)) in shapes.iter().enumerate() {
            let is_bias = k % 2 == 1;
            let t = if is_bias {
                Tensor::zeros(rows, cols)
            } else if k < trunk_len {
                uniform(rows, cols, (6.0 / rows as f64).sqrt())
            } else if k == trunk_len {
                // head weights: small density/blend slopes, exact zeros for
                // flow and disocclusion weights
                let mut w = uniform(rows, cols, 0.1 * (3.0 / rows as f64).sqrt());
                if arch.kind == FieldKind::Dynamic {
                    for r in 0..rows {
                        for c in 1..9 {
                            w.set(r, c, T::zero());
                        }
                    }
                }
                w
            } else {
                uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt())
            };
            tensors.push(t);
        }
        let head_bias = &mut tensors[trunk_len + 1];
        head_bias.set(0, 0, softplus_inverse(T::c(0.5)));
        if arch.kind == FieldKind::Dynamic {
            head_bias.set(0, 7, T::c(4.0));
            head_bias.set(0, 8, T::c(4.0));
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn from_flat(arch: FieldArch, flat: &[T]) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if total != flat.len() {
            return Err(Error::Format(format!(
                "architecture needs {total} parameters, found {}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = shapes
            .iter()
            .map(|&(r, c)| {
                let t = Tensor::from_parts(r, c, flat[offset..offset + r * c].to_vec());
                offset += r * c;
                t
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Zeroes every weight reading the time encoding, making the dynamic
    /// field independent of `i`.
    pub fn zero_time_inputs(&mut self) {
        let pos = self.arch.pos_dim();
        let time = self.arch.time_dim();
        let width = self.arch.width;
        for layer in 0..self.arch.depth {
            let offset = if layer == 0 {
                pos
            } else if self.arch.has_skip(layer) {
                width + pos
            } else {
                continue;
            };
            let w = &mut self.tensors[2 * layer];
            for r in offset..offset + time {
                for c in 0..w.cols() {
                    w.set(r, c, T::zero());
                }
            }
        }
    }

    /// Registers every tensor as a trainable leaf with ids starting at `first_id`.
    pub fn bind(&self, tape: &mut Tape<T>, first_id: usize) -> BoundField {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(k, t)| tape.param(ParamId(first_id + k), t.clone()))
            .collect();
        BoundField {
            arch: self.arch.clone(),
            vars,
        }
    }

    /// Registers the tensors as constants (forward-only evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundField {
        let vars = self.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        BoundField {
            arch: self.arch.clone(),
            vars,
        }
    }
}

/// Outputs of the dynamic field for a batch of points, all on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DynamicQuery {
    /// `n x 3`, in `[0, 1]`.
    pub color: Var,
    /// `n x 1`, non-negative.
    pub sigma: Var,
    /// `n x 3`, offset to the point's position at `i + 1`.
    pub flow_fwd: Var,
    /// `n x 3`, offset to the point's position at `i - 1`.
    pub flow_bwd: Var,
    /// `n x 1`, in `[0, 1]`.
    pub w_fwd: Var,
    pub w_bwd: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StaticQuery {
    pub color: Var,
    pub sigma: Var,
    /// `n x 1` blend weight `v` in `[0, 1]`.
    pub blend: Var,
}

/// A time-varying radiance field with scene flow.
pub trait DynamicRadiance<T: Real> {
    /// Evaluates `n` points. `positions` is `n x 3` on the tape, `dirs` is
    /// `n x 3` unit vectors, `times` is `n x 1` normalized to `[0, 1]`.
    fn query(
        &self,
        tape: &mut Tape<T>,
        positions: Var,
        dirs: &Tensor<T>,
        times: &Tensor<T>,
    ) -> Result<DynamicQuery>;
}

/// A time-invariant radiance field with a blend weight.
pub trait StaticRadiance<T: Real> {
    fn query(&self, tape: &mut Tape<T>, positions: Var, dirs: &Tensor<T>) -> Result<StaticQuery>;
}

/// A field network whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundField {
    pub arch: FieldArch,
    pub vars: Vec<Var>,
}

/// Positional encoding of a tape value, laid out like [`positional_encode`].
pub fn encode_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    num_freqs: usize,
    include_input: bool,
) -> Result<Var> {
    if !tape.requires_grad(x) {
        let encoded = encode_rows(tape.value(x), num_freqs, include_input);
        return Ok(tape.constant(encoded));
    }
    let mut parts = Vec::with_capacity(1 + 2 * num_freqs);
    if include_input {
        parts.push(x);
    }
    for k in 0..num_freqs {
        let scaled = tape.scale(x, T::c((1u64 << k) as f64) * T::PI())?;
        parts.push(tape.sin(scaled)?);
        parts.push(tape.cos(scaled)?);
    }
    if parts.is_empty() {
        return Ok(tape.constant(Tensor::zeros(tape.value(x).rows(), 0)));
    }
    tape.concat(&parts)
}

/// Row-wise [`positional_encode`].
pub fn encode_rows<T: Real>(x: &Tensor<T>, num_freqs: usize, include_input: bool) -> Tensor<T> {
    let cols = encoded_len(x.cols(), num_freqs, include_input);
    let mut data = Vec::with_capacity(x.rows() * cols);
    for r in 0..x.rows() {
        data.extend(positional_encode(x.row(r), num_freqs, include_input));
    }
    Tensor::from_parts(x.rows(), cols, data)
}

fn check_inputs<T: Real>(tape: &Tape<T>, positions: Var, dirs: &Tensor<T>) -> Result<usize> {
    let p = tape.value(positions);
    if p.cols() != 3 || dirs.shape() != p.shape() {
        return Err(Error::Shape {
            op: "field query",
            lhs: p.shape(),
            rhs: dirs.shape(),
        });
    }
    if !p.all_finite() || !dirs.all_finite() {
        return domain("non-finite field input");
    }
    Ok(p.rows())
}

impl BoundField {
    /// Trunk features and the raw head pre-activations.
    fn trunk<T: Real>(
        &self,
        tape: &mut Tape<T>,
        positions: Var,
        times: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let a = &self.arch;
        let enc_x = encode_on_tape(tape, positions, a.pos_freqs, a.include_input)?;
        let input = match times {
            Some(t) => {
                let enc_t = tape.constant(encode_rows(t, a.time_freqs, a.include_input));
                tape.concat(&[enc_x, enc_t])?
            }
            None => enc_x,
        };
        let mut h = input;
        for layer in 0..a.depth {
            let x = if a.has_skip(layer) {
                tape.concat(&[h, input])?
            } else {
                h
            };
            let z = tape.affine(x, self.vars[2 * layer], self.vars[2 * layer + 1])?;
            h = tape.relu(z)?;
        }
        let k = 2 * a.depth;
        let head = tape.affine(h, self.vars[k], self.vars[k + 1])?;
        Ok((h, head))
    }

    fn color<T: Real>(&self, tape: &mut Tape<T>, h: Var, dirs: &Tensor<T>) -> Result<Var> {
        let a = &self.arch;
        let k = 2 * a.depth + 2;
        let feat = tape.affine(h, self.vars[k], self.vars[k + 1])?;
        let enc_d = tape.constant(encode_rows(dirs, a.dir_freqs, a.include_input));
        let x = tape.concat(&[feat, enc_d])?;
        let z = tape.affine(x, self.vars[k + 2], self.vars[k + 3])?;
        let z = tape.relu(z)?;
        let rgb = tape.affine(z, self.vars[k + 4], self.vars[k + 5])?;
        tape.sigmoid(rgb)
    }
}

impl<T: Real> DynamicRadiance<T> for BoundField {
    fn query(
        &self,
        tape: &mut Tape<T>,
        positions: Var,
        dirs: &Tensor<T>,
        times: &Tensor<T>,
    ) -> Result<DynamicQuery> {
        if self.arch.kind != FieldKind::Dynamic {
            return domain("static network queried as a dynamic field");
        }
        let n = check_inputs(tape, positions, dirs)?;
        if times.shape() != (n, 1) {
            return Err(Error::Shape {
                op: "dynamic query times",
                lhs: (n, 1),
                rhs: times.shape(),
            });
        }
        if !times.all_finite() {
            return domain("non-finite time input");
        }
        let (h, head) = self.trunk(tape, positions, Some(times))?;
        let raw_sigma = tape.slice_cols(head, 0, 1)?;
        let sigma = tape.softplus(raw_sigma)?;
        let flow_fwd = tape.slice_cols(head, 1, 4)?;
        let flow_bwd = tape.slice_cols(head, 4, 7)?;
        let raw_w = tape.slice_cols(head, 7, 9)?;
        let w = tape.sigmoid(raw_w)?;
        let w_fwd = tape.slice_cols(w, 0, 1)?;
        let w_bwd = tape.slice_cols(w, 1, 2)?;
        let color = self.color(tape, h, dirs)?;
        Ok(DynamicQuery {
            color,
            sigma,
            flow_fwd,
            flow_bwd,
            w_fwd,
            w_bwd,
        })
    }
}

impl<T: Real> StaticRadiance<T> for BoundField {
    fn query(&self, tape: &mut Tape<T>, positions: Var, dirs: &Tensor<T>) -> Result<StaticQuery> {
        if self.arch.kind != FieldKind::Static {
            return domain("dynamic network queried as a static field");
        }
        check_inputs(tape, positions, dirs)?;
        let (h, head) = self.trunk(tape, positions, None)?;
        let raw_sigma = tape.slice_cols(head, 0, 1)?;
        let sigma = tape.softplus(raw_sigma)?;
        let raw_v = tape.slice_cols(head, 1, 2)?;
        let blend = tape.sigmoid(raw_v)?;
        let color = self.color(tape, h, dirs)?;
        Ok(StaticQuery {
            color,
            sigma,
            blend,
        })
    }
}

/// Point evaluation of the dynamic field.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicFieldOutput<T> {
    pub color: Vec3<T>,
    pub sigma: T,
    pub flow_fwd: Vec3<T>,
    pub flow_bwd: Vec3<T>,
    pub w_fwd: T,
    pub w_bwd: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticFieldOutput<T> {
    pub color: Vec3<T>,
    pub sigma: T,
    pub blend: T,
}

fn row3<T: Real>(t: &Tensor<T>) -> Vec3<T> {
    [t.get(0, 0), t.get(0, 1), t.get(0, 2)]
}

fn unit_dir<T: Real>(d: Vec3<T>) -> Result<()> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !n.is_finite() || (n - T::one()).abs() > T::c(1e-6) {
        return domain("viewing direction must be a unit vector");
    }
    Ok(())
}

/// Evaluates the dynamic field at one point. `time` is normalized to `[0, 1]`.
pub fn eval_dynamic<T: Real>(
    params: &MlpParams<T>,
    x: Vec3<T>,
    d: Vec3<T>,
    time: T,
) -> Result<DynamicFieldOutput<T>> {
    if !(time >= T::zero() && time <= T::one()) {
        return domain("normalized time must lie in [0, 1]");
    }
    if x.iter().chain(&d).any(|v| !v.is_finite()) {
        return domain("non-finite field input");
    }
    unit_dir(d)?;
    let mut tape = Tape::new();
    let net = params.bind_frozen(&mut tape);
    let pos = tape.constant(Tensor::from_rows(&[x]));
    let q = DynamicRadiance::query(
        &net,
        &mut tape,
        pos,
        &Tensor::from_rows(&[d]),
        &Tensor::scalar(time),
    )?;
    Ok(DynamicFieldOutput {
        color: row3(tape.value(q.color)),
        sigma: tape.value(q.sigma).item(),
        flow_fwd: row3(tape.value(q.flow_fwd)),
        flow_bwd: row3(tape.value(q.flow_bwd)),
        w_fwd: tape.value(q.w_fwd).item(),
        w_bwd: tape.value(q.w_bwd).item(),
    })
}

/// Evaluates the static field at one point.
pub fn eval_static<T: Real>(
    params: &MlpParams<T>,
    x: Vec3<T>,
    d: Vec3<T>,
) -> Result<StaticFieldOutput<T>> {
    if x.iter().chain(&d).any(|v| !v.is_finite()) {
        return domain("non-finite field input");
    }
    unit_dir(d)?;
    let mut tape = Tape::new();
    let net = params.bind_frozen(&mut tape);
    let pos = tape.constant(Tensor::from_rows(&[x]));
    let q = StaticRadiance::query(&net, &mut tape, pos, &Tensor::from_rows(&[d]))?;
    Ok(StaticFieldOutput {
        color: row3(tape.value(q.color)),
        sigma: tape.value(q.sigma).item(),
        blend: tape.value(q.blend).item(),
    })
}

/// Dynamic field given point-wise by a closure of position, direction
/// and normalized time. Outputs enter the tape as constants.
pub struct FnDynamicField<F>(pub F);

impl<T: Real, F> DynamicRadiance<T> for FnDynamicField<F>
where
    F: Fn(Vec3<T>, Vec3<T>, T) -> DynamicFieldOutput<T>,
{
    fn query(
        &self,
        tape: &mut Tape<T>,
        positions: Var,
        dirs: &Tensor<T>,
        times: &Tensor<T>,
    ) -> Result<DynamicQuery> {
        let x = tape.value(positions);
        let n = x.rows();
        if dirs.shape() != (n, 3) || times.shape() != (n, 1) {
            return Err(Error::Shape {
                op: "field query",
                lhs: x.shape(),
                rhs: dirs.shape(),
            });
        }
        let outs: Vec<_> = (0..n)
            .map(|r| {
                let p = [x.get(r, 0), x.get(r, 1), x.get(r, 2)];
                let d = [dirs.get(r, 0), dirs.get(r, 1), dirs.get(r, 2)];
                (self.0)(p, d, times.get(r, 0))
            })
            .collect();
        let col3 = |f: &dyn Fn(&DynamicFieldOutput<T>) -> Vec3<T>| {
            Tensor::from_parts(n, 3, outs.iter().flat_map(f).collect())
        };
        let col1 = |f: &dyn Fn(&DynamicFieldOutput<T>) -> T| Tensor::column(outs.iter().map(f).collect());
        let color = col3(&|o| o.color);
        let flow_fwd = col3(&|o| o.flow_fwd);
        let flow_bwd = col3(&|o| o.flow_bwd);
        let sigma = col1(&|o| o.sigma);
        let w_fwd = col1(&|o| o.w_fwd);
        let w_bwd = col1(&|o| o.w_bwd);
        Ok(DynamicQuery {
            color: tape.constant(color),
            sigma: tape.constant(sigma),
            flow_fwd: tape.constant(flow_fwd),
            flow_bwd: tape.constant(flow_bwd),
            w_fwd: tape.constant(w_fwd),
            w_bwd: tape.constant(w_bwd),
        })
    }
}

/// Static field given point-wise by a closure of position and direction.
pub struct FnStaticField<F>(pub F);

impl<T: Real, F> StaticRadiance<T> for FnStaticField<F>
where
    F: Fn(Vec3<T>, Vec3<T>) -> StaticFieldOutput<T>,
{
    fn query(&self, tape: &mut Tape<T>, positions: Var, dirs: &Tensor<T>) -> Result<StaticQuery> {
        let x = tape.value(positions);
        let n = x.rows();
        if dirs.shape() != (n, 3) {
            return Err(Error::Shape {
                op: "field query",
                lhs: x.shape(),
                rhs: dirs.shape(),
            });
        }
        let mut color = Vec::with_capacity(n * 3);
        let mut sigma = Vec::with_capacity(n);
        let mut blend = Vec::with_capacity(n);
        for r in 0..n {
            let o = (self.0)(
                [x.get(r, 0), x.get(r, 1), x.get(r, 2)],
                [dirs.get(r, 0), dirs.get(r, 1), dirs.get(r, 2)],
            );
            color.extend_from_slice(&o.color);
            sigma.push(o.sigma);
            blend.push(o.blend);
        }
        Ok(StaticQuery {
            color: tape.constant(Tensor::from_parts(n, 3, color)),
            sigma: tape.constant(Tensor::column(sigma)),
            blend: tape.constant(Tensor::column(blend)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut ChaCha8Rng) -> (Vec3<f64>, Vec3<f64>) {
        let x = [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ];
        let d = normalize3([
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        (x, d)
    }

    /// Fully random parameters, including the heads init pins.
    fn scrambled(arch: &FieldArch, seed: u64, scale: f64) -> MlpParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams::init(arch, &mut rng).unwrap();
        for t in &mut p.tensors {
            for v in t.data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
        p
    }

    #[test]
    fn init_contract() {
        let arch = FieldArch::dynamic();
        let a = MlpParams::<f64>::init(&arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = MlpParams::<f64>::init(&arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        for (t, s) in a.tensors.iter().zip(arch.param_shapes()) {
            assert_eq!(t.shape(), s);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mean_sigma = 0.0;
        for _ in 0..200 {
            let (x, d) = rand_point(&mut rng);
            let out = eval_dynamic(&a, x, d, rng.random_range(0.0..1.0)).unwrap();
            assert_eq!(out.flow_fwd, [0.0; 3]);
            assert_eq!(out.flow_bwd, [0.0; 3]);
            let lo = crate::autodiff::sigmoid(3.9);
            assert!(out.w_fwd >= lo && out.w_fwd < 1.0);
            assert!(out.w_bwd >= lo && out.w_bwd < 1.0);
            mean_sigma += out.sigma / 200.0;
        }
        assert!((mean_sigma - 0.5).abs() < 0.2, "mean sigma {mean_sigma}");
    }

    #[test]
    fn output_ranges_hold_for_arbitrary_parameters() {
        let arch = FieldArch::dynamic().with_size(3, 16);
        let p = scrambled(&arch, 2, 3.0);
        let sarch = FieldArch::static_field().with_size(3, 16);
        let s = scrambled(&sarch, 3, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let (x, d) = rand_point(&mut rng);
            let o = eval_dynamic(&p, x, d, rng.random_range(0.0..1.0)).unwrap();
            assert!(o.sigma >= 0.0);
            assert!(o.color.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!((0.0..=1.0).contains(&o.w_fwd) && (0.0..=1.0).contains(&o.w_bwd));
            let so = eval_static(&s, x, d).unwrap();
            assert!(so.sigma >= 0.0 && (0.0..=1.0).contains(&so.blend));
            assert!(so.color.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn static_field_is_deterministic() {
        let arch = FieldArch::static_field().with_size(2, 16);
        let s = scrambled(&arch, 5, 1.0);
        let (x, d) = rand_point(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(eval_static(&s, x, d).unwrap(), eval_static(&s, x, d).unwrap());
    }

    #[test]
    fn zeroed_time_path_removes_time_dependence() {
        let arch = FieldArch::dynamic().with_size(4, 16);
        let mut p = scrambled(&arch, 6, 1.0);
        let (x, d) = rand_point(&mut ChaCha8Rng::seed_from_u64(2));
        let a = eval_dynamic(&p, x, d, 0.1).unwrap();
        let b = eval_dynamic(&p, x, d, 0.8).unwrap();
        assert_ne!(a, b);
        p.zero_time_inputs();
        let a = eval_dynamic(&p, x, d, 0.1).unwrap();
        let b = eval_dynamic(&p, x, d, 0.8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_validation() {
        let arch = FieldArch::dynamic().with_size(2, 8);
        let p = scrambled(&arch, 7, 1.0);
        assert!(eval_dynamic(&p, [f64::NAN, 0.0, 0.0], [0.0, 0.0, 1.0], 0.5).is_err());
        assert!(eval_dynamic(&p, [0.0; 3], [0.0, 0.0, 1.0], 1.5).is_err());
        assert!(eval_dynamic(&p, [0.0; 3], [0.0, 0.0, 2.0], 0.5).is_err());
        let sarch = FieldArch::static_field();
        assert!(MlpParams::<f64>::from_flat(sarch, &[0.0; 3]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let arch = FieldArch::static_field().with_size(2, 8);
        let p = scrambled(&arch, 8, 1.0);
        let q = MlpParams::from_flat(arch, &p.flat()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        // moderate encoding frequencies keep the central difference truncation error small
        let arch = FieldArch {
            pos_freqs: 4,
            ..FieldArch::dynamic().with_size(2, 8)
        };
        let p = scrambled(&arch, 10, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<(Vec3<f64>, Vec3<f64>)> = (0..3).map(|_| rand_point(&mut rng)).collect();
        let positions = Tensor::from_rows(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
        let dirs = Tensor::from_rows(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
        let times = Tensor::column(vec![0.2, 0.5, 0.9]);
        // scalar probe touching every head
        let probe = |tape: &mut Tape<f64>, net: &BoundField, pos: Var| -> Result<Var> {
            let q = DynamicRadiance::query(net, tape, pos, &dirs, &times)?;
            let parts = tape.concat(&[q.color, q.sigma, q.flow_fwd, q.flow_bwd, q.w_fwd, q.w_bwd])?;
            let coef = tape.constant(Tensor::new(3, 12, (0..36).map(|k| 0.1 + 0.05 * k as f64).collect())?);
            let m = tape.mul(parts, coef)?;
            tape.sum(m)
        };
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, 0);
        let pos = tape.param(ParamId(1000), positions.clone());
        let out = probe(&mut tape, &net, pos).unwrap();
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        let eval = |params: &MlpParams<f64>, pos_t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let net = params.bind_frozen(&mut tape);
            let pos = tape.constant(pos_t.clone());
            let out = probe(&mut tape, &net, pos).unwrap();
            tape.scalar_value(out)
        };
        for (ti, t) in p.tensors.iter().enumerate() {
            let g = grads.get_or_zeros(ParamId(ti), t.rows(), t.cols());
            for k in (0..t.len()).step_by(7) {
                let mut plus = p.clone();
                plus.tensors[ti].data_mut()[k] += h;
                let mut minus = p.clone();
                minus.tensors[ti].data_mut()[k] -= h;
                let fd = (eval(&plus, &positions) - eval(&minus, &positions)) / (2.0 * h);
                let an = g.data()[k];
                assert!((fd - an).abs() / an.abs().max(1.0) < 1e-6, "tensor {ti} idx {k}: {fd} vs {an}");
            }
        }
        let gpos = grads.get(ParamId(1000)).unwrap();
        for k in 0..positions.len() {
            let mut plus = positions.clone();
            plus.data_mut()[k] += h;
            let mut minus = positions.clone();
            minus.data_mut()[k] -= h;
            let fd = (eval(&p, &plus) - eval(&p, &minus)) / (2.0 * h);
            assert!((fd - gpos.data()[k]).abs() / gpos.data()[k].abs().max(1.0) < 1e-6);
        }
    }
}
