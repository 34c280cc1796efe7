//! Pinhole cameras, ray generation, quadrature sampling and positional encoding.
//!
//! Conventions: the camera looks down its local `-z` axis with `+x` to the
//! right and `+y` up; image rows grow downwards. Integer pixel `(u, v)`
//! is traversed through its center `(u + 0.5, v + 0.5)`, so [`project`]
//! returns continuous image coordinates and exactly inverts
//! [`generate_ray`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::scalar::Real;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

#[inline]
pub fn add3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Real>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

pub fn normalize3<T: Real>(a: Vec3<T>) -> Vec3<T> {
    scale3(a, T::one() / norm3(a))
}

/// Near and far ray bounds in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds<T> {
    pub near: T,
    pub far: T,
}

/// Pinhole camera with a rigid world-from-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// Columns are the camera axes expressed in world coordinates.
    pub rotation: Mat3<T>,
    /// Camera center in world coordinates.
    pub center: Vec3<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Camera<T> {
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        rotation: Mat3<T>,
        center: Vec3<T>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            center,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera from a row-major 3x4 `[R | t]` world-from-camera pose.
    pub fn from_pose(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        pose: &[T; 12],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let rotation = [
            [pose[0], pose[1], pose[2]],
            [pose[4], pose[5], pose[6]],
            [pose[8], pose[9], pose[10]],
        ];
        let center = [pose[3], pose[7], pose[11]];
        Self::new(fx, fy, cx, cy, rotation, center, width, height)
    }

    /// Camera at `eye` looking at `target`, with intrinsics derived from a
    /// horizontal field of view in degrees.
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        fov_x_deg: T,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let back = normalize3(sub3(eye, target));
        let right = normalize3(cross3(up, back));
        let true_up = cross3(back, right);
        let rotation = [
            [right[0], true_up[0], back[0]],
            [right[1], true_up[1], back[1]],
            [right[2], true_up[2], back[2]],
        ];
        let half = T::c(0.5);
        let w = T::from_count(width);
        let h = T::from_count(height);
        let f = half * w / (fov_x_deg.to_radians() * half).tan();
        Self::new(f, f, half * w, half * h, rotation, eye, width, height)
    }

    pub fn pose(&self) -> [T; 12] {
        let r = &self.rotation;
        let c = &self.center;
        [
            r[0][0], r[0][1], r[0][2], c[0], r[1][0], r[1][1], r[1][2], c[1], r[2][0], r[2][1],
            r[2][2], c[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return domain("focal lengths must be positive");
        }
        let w = T::from_count(self.width);
        let h = T::from_count(self.height);
        if !(self.cx > T::zero() && self.cx < w && self.cy > T::zero() && self.cy < h) {
            return domain("principal point outside the image");
        }
        let tol = T::c(1e-9).max(T::epsilon() * T::c(1e3));
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut rtr = T::zero();
                for k in 0..3 {
                    rtr += r[k][i] * r[k][j];
                }
                let target = if i == j { T::one() } else { T::zero() };
                if (rtr - target).abs() >= tol {
                    return domain("rotation is not orthonormal");
                }
            }
        }
        let det = dot3(
            [r[0][0], r[1][0], r[2][0]],
            cross3([r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]),
        );
        if det <= T::zero() {
            return domain("rotation has negative determinant");
        }
        Ok(())
    }

    /// Unit optical axis (camera `-z`) in world coordinates.
    pub fn forward(&self) -> Vec3<T> {
        let r = &self.rotation;
        [-r[0][2], -r[1][2], -r[2][2]]
    }

    pub fn world_to_camera(&self, point: Vec3<T>) -> Vec3<T> {
        let d = sub3(point, self.center);
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn camera_to_world_dir(&self, v: Vec3<T>) -> Vec3<T> {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let m = |x: T| U::c(x.as_f64());
        Camera {
            fx: m(self.fx),
            fy: m(self.fy),
            cx: m(self.cx),
            cy: m(self.cy),
            rotation: self.rotation.map(|row| row.map(m)),
            center: self.center.map(m),
            width: self.width,
            height: self.height,
        }
    }
}

/// Camera ray with its integration interval and source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
    pub t_near: T,
    pub t_far: T,
    pub time_index: usize,
}

impl<T: Real> Ray<T> {
    pub fn point_at(&self, t: T) -> Vec3<T> {
        add3(self.origin, scale3(self.direction, t))
    }
}

/// Ray through the center of `pixel` (integer-valued coordinates, or any
/// point inside `[0, width) x [0, height)`).
pub fn generate_ray<T: Real>(
    camera: &Camera<T>,
    pixel: [T; 2],
    time_index: usize,
    bounds: Bounds<T>,
) -> Result<Ray<T>> {
    let [u, v] = pixel;
    let w = T::from_count(camera.width);
    let h = T::from_count(camera.height);
    if !(u >= T::zero() && u < w && v >= T::zero() && v < h) {
        return domain(format!("pixel ({u}, {v}) outside {}x{}", camera.width, camera.height));
    }
    if !(bounds.near < bounds.far) {
        return domain("t_near must be below t_far");
    }
    let half = T::c(0.5);
    let local = [
        (u + half - camera.cx) / camera.fx,
        -(v + half - camera.cy) / camera.fy,
        -T::one(),
    ];
    let direction = normalize3(camera.camera_to_world_dir(local));
    Ok(Ray {
        origin: camera.center,
        direction,
        t_near: bounds.near,
        t_far: bounds.far,
        time_index,
    })
}

/// Continuous image coordinates of a world point.
pub fn project<T: Real>(camera: &Camera<T>, point: Vec3<T>) -> Result<[T; 2]> {
    let p = camera.world_to_camera(point);
    let depth = -p[2];
    if depth <= T::c(1e-9) {
        return Err(Error::BehindCamera(depth.as_f64()));
    }
    Ok([
        camera.fx * p[0] / depth + camera.cx,
        -camera.fy * p[1] / depth + camera.cy,
    ])
}

/// Ordered sample positions along a ray and the length each one stands for.
///
/// Sample `k` owns the interval between the midpoints to its neighbours
/// (clamped to the ray bounds), so the deltas tile `[t_near, t_far]`
/// exactly. For bin midpoints this is the bin width.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet<T> {
    pub t_values: Vec<T>,
    pub deltas: Vec<T>,
}

impl<T: Real> SampleSet<T> {
    pub fn from_t_values(t_values: Vec<T>, t_near: T, t_far: T) -> Result<Self> {
        let n = t_values.len();
        if n == 0 {
            return domain("empty sample set");
        }
        if t_values.windows(2).any(|w| !(w[0] < w[1])) {
            return domain("sample positions must be strictly increasing");
        }
        let half = T::c(0.5);
        let mut deltas = Vec::with_capacity(n);
        let mut lower = t_near;
        for k in 0..n {
            let upper = if k + 1 < n {
                half * (t_values[k] + t_values[k + 1])
            } else {
                t_far
            };
            deltas.push((upper - lower).max(T::zero()));
            lower = upper;
        }
        Ok(Self { t_values, deltas })
    }

    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }
}

/// One sample per equal-width bin of the ray interval: bin midpoints when
/// `stratified` is false, a uniform draw inside each bin otherwise.
pub fn stratified_samples<T: Real, R: Rng + ?Sized>(
    ray: &Ray<T>,
    n: usize,
    rng: &mut R,
    stratified: bool,
) -> Result<SampleSet<T>> {
    if n < 2 {
        return domain("at least two samples per ray are required");
    }
    let t_values = bin_positions(ray.t_near, ray.t_far, n, |_| {
        if stratified {
            T::c(rng.random::<f64>())
        } else {
            T::c(0.5)
        }
    });
    SampleSet::from_t_values(t_values, ray.t_near, ray.t_far)
}

pub(crate) fn bin_positions<T: Real>(
    near: T,
    far: T,
    n: usize,
    mut jitter: impl FnMut(usize) -> T,
) -> Vec<T> {
    let width = (far - near) / T::from_count(n);
    (0..n)
        .map(|k| {
            // keep the draw strictly inside the bin so positions stay increasing
            let u = jitter(k).max(T::c(1e-6)).min(T::c(1.0 - 1e-6));
            near + (T::from_count(k) + u) * width
        })
        .collect()
}

/// Number of values [`positional_encode`] produces for a `dim`-vector.
pub fn encoded_len(dim: usize, num_freqs: usize, include_input: bool) -> usize {
    dim * (usize::from(include_input) + 2 * num_freqs)
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`
/// where each entry is a block of all components of `x`.
pub fn positional_encode<T: Real>(x: &[T], num_freqs: usize, include_input: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), num_freqs, include_input));
    if include_input {
        out.extend_from_slice(x);
    }
    for k in 0..num_freqs {
        let freq = T::c((1u64 << k) as f64) * T::PI();
        out.extend(x.iter().map(|&v| (freq * v).sin()));
        out.extend(x.iter().map(|&v| (freq * v).cos()));
    }
    out
}
