//! Pinhole cameras, rigid poses, epipolar projection and sample schedules.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel `(u, v)` has `u` pointing right and `v` down, with the origin at
//!   the centre of the top-left pixel.
//! * A [`PoseSE3`] `(R, t)` relates the source (input) camera to a target
//!   camera: `x_target = R x_source + t`. Equivalently it is the source
//!   camera's camera-to-world transform when the target camera is the world
//!   frame. Projecting a target pixel lifted to depth `d` back into the
//!   source therefore computes `R^T (d K^-1 p) - R^T t`.

use diffcore::{CustomOp, Graph, Tensor, Var};
use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Below this magnitude the depth along the source optical axis is treated
/// as degenerate.
pub const DEGENERATE_DEPTH: f64 = 1e-9;

/// Stand-in coordinate for degenerate projections; far enough outside any
/// raster that bilinear lookups treat it as a miss.
const MISS: f64 = -1.0e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!("invalid camera {self:?}")));
        }
        Ok(())
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K^-1 (u, v, 1)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection; `None` when the point is (nearly) on the
    /// camera plane.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if p.z.abs() < DEGENERATE_DEPTH {
            return None;
        }
        Some([self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }

    /// Intrinsics for a 2x box-downsampled raster.
    pub fn downsample2(&self) -> Camera {
        Camera {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: (self.cx + 0.5) / 2.0 - 0.5,
            cy: (self.cy + 0.5) / 2.0 - 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    /// Integer pixel centres as an `[H, W, 2]` tensor of `(u, v)`.
    pub fn pixel_grid(&self) -> Tensor {
        let w = self.width;
        Tensor::from_fn(&[self.height, w, 2], |i| {
            let p = i / 2;
            if i % 2 == 0 {
                (p % w) as f64
            } else {
                (p / w) as f64
            }
        })
    }

    /// Pixel centres scaled to `[-1, 1]` across the image extents.
    pub fn normalized_grid(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let scale = |x: usize, n: usize| {
            if n > 1 {
                2.0 * x as f64 / (n - 1) as f64 - 1.0
            } else {
                0.0
            }
        };
        Tensor::from_fn(&[h, w, 2], |i| {
            let p = i / 2;
            if i % 2 == 0 {
                scale(p % w, w)
            } else {
                scale(p / w, h)
            }
        })
    }
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coefficients(w.norm_squared());
    let k = w.cross_matrix();
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation (angle in `[0, pi]`).
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// `sin(th)/th`, `(1-cos(th))/th^2` and their derivatives divided by `th`,
/// as functions of `th^2`, with series expansions near zero.
fn rodrigues_coefficients(th2: f64) -> (f64, f64, f64, f64) {
    if th2 < 1e-8 {
        (
            1.0 - th2 / 6.0,
            0.5 - th2 / 24.0,
            -1.0 / 3.0 + th2 / 30.0,
            -1.0 / 12.0 + th2 / 180.0,
        )
    } else {
        let th = th2.sqrt();
        let (s, c) = th.sin_cos();
        let a = s / th;
        let b = (1.0 - c) / th2;
        let da = (th * c - s) / (th2 * th);
        let db = (th * s - 2.0 * (1.0 - c)) / (th2 * th2);
        (a, b, da, db)
    }
}

/// `dR / dw_k` for `R = so3_exp(w)`.
pub fn so3_exp_jacobian(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (a, b, da, db) = rodrigues_coefficients(w.norm_squared());
    let k = w.cross_matrix();
    let k2 = k * k;
    std::array::from_fn(|i| {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let ei = e.cross_matrix();
        k * (da * w[i]) + ei * a + k2 * (db * w[i]) + (ei * k + k * ei) * b
    })
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * vt;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validating constructor: `R^T R = I` and `det R = 1` within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        if !(ortho <= 1e-9 && det <= 1e-9) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "not a rigid transform (|R^T R - I| = {ortho:.2e}, |det R - 1| = {det:.2e})"
            )));
        }
        Ok(PoseSE3 {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(w: Vector3<f64>, t: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: so3_exp(&w),
            translation: t,
        }
    }

    /// `[wx, wy, wz, tx, ty, tz]`.
    pub fn from_params(p: &[f64; 6]) -> Self {
        Self::from_axis_angle(
            Vector3::new(p[0], p[1], p[2]),
            Vector3::new(p[3], p[4], p[5]),
        )
    }

    pub fn params(&self) -> [f64; 6] {
        let w = so3_log(&self.rotation);
        let t = self.translation;
        [w.x, w.y, w.z, t.x, t.y, t.z]
    }

    /// Twelve reals: row-major `R` followed by `t`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    /// Inverse of [`to_row_major`](Self::to_row_major) for `[R | t]` given
    /// as three rows of four.
    pub fn from_rt_rows(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::invalid(format!("pose needs 12 reals, got {}", v.len())));
        }
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        Self::new(r, t)
    }

    /// Row-major `[R | t]` (3 rows of 4).
    pub fn to_rt_rows(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Geodesic angle between the rotations, radians.
    pub fn rotation_error(&self, other: &PoseSE3) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Angle between translation vectors, radians; scale is ignored.
    pub fn translation_direction_error(&self, other: &PoseSE3) -> f64 {
        let (a, b) = (self.translation, other.translation);
        let (na, nb) = (a.norm(), b.norm());
        if na < 1e-12 || nb < 1e-12 {
            return if na < 1e-12 && nb < 1e-12 {
                0.0
            } else {
                std::f64::consts::FRAC_PI_2
            };
        }
        (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0).acos()
    }

    /// Re-project the rotation onto SO(3).
    pub fn orthonormalized(&self) -> PoseSE3 {
        PoseSE3 {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// Log-spaced ray distances, index 0 at the far bound.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSchedule {
    pub near: f64,
    pub far: f64,
    pub distances: Vec<f64>,
}

impl SampleSchedule {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(self.distances.clone())
    }
}

/// `t_i = near * (far / near)^(1 - i / (n - 1))`.
pub fn make_exponential_schedule(near: f64, far: f64, n: usize) -> Result<SampleSchedule> {
    if !(near > 0.0 && far > near && far.is_finite()) || n < 2 {
        return Err(Error::invalid(format!(
            "schedule needs 0 < near < far and n >= 2 (got {near}, {far}, {n})"
        )));
    }
    let ratio = far / near;
    let mut distances: Vec<f64> = (0..n)
        .map(|i| near * ratio.powf(1.0 - i as f64 / (n - 1) as f64))
        .collect();
    distances[0] = far;
    distances[n - 1] = near;
    Ok(SampleSchedule {
        near,
        far,
        distances,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub pixel: [f64; 2],
    /// Depth of the lifted point along the source camera's optical axis.
    pub depth: f64,
}

/// Lift target pixel `p` to `depth` and project it into the source image.
///
/// Negative depths are legal (they lift behind the target camera). Returns
/// `None` when the point lands on the source camera plane.
pub fn epipolar_project(p: [f64; 2], depth: f64, pose: &PoseSE3, cam: &Camera) -> Option<Projected> {
    if pose.is_identity() {
        return Some(Projected { pixel: p, depth });
    }
    let world = cam.ray(p[0], p[1]) * depth;
    let rt = pose.rotation.transpose();
    let pc = rt * world - rt * pose.translation;
    let pixel = cam.project(&pc)?;
    Some(Projected {
        pixel,
        depth: pc.z,
    })
}

/// Resample `img` through the pure-rotation homography `K R K^-1`:
/// `out(p) = img(K R K^-1 p)`. Returns the warped image and the per-pixel
/// fraction of the lookup that landed inside `img` as an `[H, W, 1]` tensor.
pub fn rotation_align_warp(img: &Image, rotation: &Matrix3<f64>, cam: &Camera) -> Result<(Image, Tensor)> {
    let (h, w) = (img.height(), img.width());
    if cam.width != w || cam.height != h {
        return Err(Error::invalid("camera does not match image size"));
    }
    let hom = cam.k() * rotation * cam.k().try_inverse().expect("pinhole K is invertible");
    let coords = Tensor::from_fn(&[h, w, 2], |i| {
        let p = i / 2;
        let q = hom * Vector3::new((p % w) as f64, (p / w) as f64, 1.0);
        if q.z.abs() < DEGENERATE_DEPTH {
            MISS
        } else if i % 2 == 0 {
            q.x / q.z
        } else {
            q.y / q.z
        }
    });
    let mut g = Graph::new();
    let src = g.constant(img.tensor().clone());
    let c = g.constant(coords);
    let (out, validity) = g.bilinear_sample(src, c, diffcore::SampleMode::Full, 0.0)?;
    Ok((Image::from_tensor(g.value(out).clone())?, validity.reshape(&[h, w, 1])?))
}

// ---- differentiable pieces -------------------------------------------------

/// `w[3] -> R[9]` (row-major) inside a graph.
struct So3ExpOp;

impl CustomOp for So3ExpOp {
    fn name(&self) -> &'static str {
        "so3_exp"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let w = inputs[0].data();
        let jac = so3_exp_jacobian(&Vector3::new(w[0], w[1], w[2]));
        let g = grad.data();
        let gw: Vec<f64> = jac
            .iter()
            .map(|j| {
                let mut acc = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        acc += g[3 * a + b] * j[(a, b)];
                    }
                }
                acc
            })
            .collect();
        vec![Some(Tensor::from_vec(gw))]
    }
}

pub fn so3_exp_var(g: &mut Graph, w: Var) -> Result<Var> {
    let wv = g.value(w);
    if wv.len() != 3 {
        return Err(Error::invalid("axis-angle needs 3 values"));
    }
    let d = wv.data();
    let r = so3_exp(&Vector3::new(d[0], d[1], d[2]));
    let mut out = Vec::with_capacity(9);
    for a in 0..3 {
        for b in 0..3 {
            out.push(r[(a, b)]);
        }
    }
    Ok(g.custom(&[w], Tensor::from_vec(out), Box::new(So3ExpOp))?)
}

/// Pose as a 12-vector node: row-major `R` then `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoseVar(pub Var);

impl PoseVar {
    pub fn constant(g: &mut Graph, pose: &PoseSE3) -> PoseVar {
        PoseVar(g.constant(Tensor::from_vec(pose.to_row_major().to_vec())))
    }

    /// From a `[w, t]` parameter node.
    pub fn from_params(g: &mut Graph, params: Var) -> Result<PoseVar> {
        let w = g.slice(params, 0, 0, 3)?;
        let t = g.slice(params, 0, 3, 6)?;
        let r = so3_exp_var(g, w)?;
        Ok(PoseVar(g.concat(&[r, t])?))
    }

    /// Same translation, identity rotation.
    pub fn translation_only(self, g: &mut Graph) -> Result<PoseVar> {
        let t = g.slice(self.0, 0, 9, 12)?;
        let eye = g.constant(Tensor::from_vec(vec![
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ]));
        Ok(PoseVar(g.concat(&[eye, t])?))
    }

    pub fn value(&self, g: &Graph) -> PoseSE3 {
        let d = g.value(self.0).data();
        PoseSE3 {
            rotation: Matrix3::new(d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7], d[8]),
            translation: Vector3::new(d[9], d[10], d[11]),
        }
    }
}

struct ProjectOp {
    cam: Camera,
}

impl ProjectOp {
    fn unpack(pose: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
        (
            Matrix3::new(
                pose[0], pose[1], pose[2], pose[3], pose[4], pose[5], pose[6], pose[7], pose[8],
            ),
            Vector3::new(pose[9], pose[10], pose[11]),
        )
    }
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "epipolar_project"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (depth, pose) = (inputs[0], inputs[1]);
        let (r, t) = Self::unpack(pose.data());
        let rt = r.transpose();
        let k = depth.channels();
        let w = self.cam.width;
        let (dd, od, gd) = (depth.data(), output.data(), grad.data());
        let mut gdepth = Tensor::zeros(depth.shape());
        let mut g_r = Matrix3::<f64>::zeros();
        let mut g_t = Vector3::<f64>::zeros();
        for (s, &d) in dd.iter().enumerate() {
            if od[2 * s] == MISS {
                continue;
            }
            let (gu, gv) = (gd[2 * s], gd[2 * s + 1]);
            if gu == 0.0 && gv == 0.0 {
                continue;
            }
            let p = s / k;
            let ray = self.cam.ray((p % w) as f64, (p / w) as f64);
            let z = ray * d - t;
            let y = rt * z;
            let gy = Vector3::new(
                self.cam.fx * gu / y.z,
                self.cam.fy * gv / y.z,
                -(self.cam.fx * gu * y.x + self.cam.fy * gv * y.y) / (y.z * y.z),
            );
            let q = r * gy;
            gdepth.data_mut()[s] = q.dot(&ray);
            g_t -= q;
            g_r += z * gy.transpose();
        }
        let mut gpose = Vec::with_capacity(12);
        for a in 0..3 {
            for b in 0..3 {
                gpose.push(g_r[(a, b)]);
            }
        }
        gpose.extend_from_slice(g_t.as_slice());
        vec![Some(gdepth), Some(Tensor::from_vec(gpose))]
    }
}

/// Project every target pixel at each of its `K` depths into the source.
///
/// `depth` is `[H, W, K]` over the target raster described by `cam`; the
/// result holds `[H, W, K, 2]` source coordinates plus a `[H, W, K]` mask
/// that is zero where the projection was degenerate.
pub fn project_samples(g: &mut Graph, depth: Var, pose: PoseVar, cam: &Camera) -> Result<(Var, Tensor)> {
    let dv = g.value(depth);
    let shape = dv.shape().to_vec();
    if shape.len() != 3 || shape[0] != cam.height || shape[1] != cam.width {
        return Err(Error::invalid(format!(
            "depth samples {shape:?} do not match a {}x{} camera",
            cam.height, cam.width
        )));
    }
    let (r, t) = ProjectOp::unpack(g.value(pose.0).data());
    let rt = r.transpose();
    let k = shape[2];
    let w = cam.width;
    let identity = r == Matrix3::identity() && t == Vector3::zeros();
    let mut coords = vec![0.0; dv.len() * 2];
    let mut ok = vec![1.0; dv.len()];
    for (s, &d) in dv.data().iter().enumerate() {
        let p = s / k;
        if identity {
            // exact pass-through so identity renders reproduce their input bit for bit
            coords[2 * s] = (p % w) as f64;
            coords[2 * s + 1] = (p / w) as f64;
            continue;
        }
        let ray = cam.ray((p % w) as f64, (p / w) as f64);
        let pc = rt * (ray * d - t);
        match cam.project(&pc) {
            Some([u, v]) => {
                coords[2 * s] = u;
                coords[2 * s + 1] = v;
            }
            None => {
                coords[2 * s] = MISS;
                coords[2 * s + 1] = MISS;
                ok[s] = 0.0;
            }
        }
    }
    let mut cshape = shape.clone();
    cshape.push(2);
    let out = Tensor::new(cshape, coords).map_err(Error::from)?;
    let var = g.custom(&[depth, pose.0], out, Box::new(ProjectOp { cam: *cam }))?;
    Ok((var, Tensor::new(shape, ok).map_err(Error::from)?))
}

/// `[H, W, K]` tensor repeating `values` at every pixel.
pub fn broadcast_depths(cam: &Camera, values: &[f64]) -> Tensor {
    let k = values.len();
    Tensor::from_fn(&[cam.height, cam.width, k], |i| values[i % k])
}
