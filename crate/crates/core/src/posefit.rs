//! Relative pose between a source view and a target view by direct
//! photometric alignment.
//!
//! The two-stage estimator first fits the six pose parameters together with
//! one fronto-parallel depth, then removes the estimated rotation by warping
//! the target through `K R0 K^-1` and fits a residual pose with a per-pixel
//! depth map on the rotation-aligned pair. The coarse stage runs
//! coarse-to-fine over an image pyramid; the refinement runs at full
//! resolution only.

use diffcore::{Graph, Kernel, SampleMode, Tensor, Var};
use log::{debug, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::Adam;
use crate::geometry::{project_samples, rotation_align_warp, so3_exp, Camera, PoseSE3, PoseVar};
use crate::image::Image;
use crate::objective::smoothness_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseFitConfig {
    /// Adam step size for pose parameters.
    pub lr: f64,
    /// Adam step size for the residual pose of the refinement stage, which
    /// starts next to the answer.
    pub refine_lr: f64,
    /// Adam step size for (log inverse) depth parameters.
    pub depth_lr: f64,
    pub iters_per_level: usize,
    pub levels: usize,
    /// Depth the fronto-parallel proxy starts from.
    pub initial_depth: f64,
    /// Edge-aware smoothness weight on the per-pixel depth.
    pub smoothness: f64,
    /// Consecutive loss increases that count as divergence.
    pub divergence_patience: usize,
    /// Fraction of each level's per-pixel depth iterations run with the pose
    /// held fixed, so depth settles before it can trade off against rotation.
    pub depth_warmup: f64,
    /// Gaussian pre-blur of both images for per-pixel depth fits; keeps
    /// resampling error on fine texture from rewarding spurious depth.
    pub prefilter_sigma: f64,
}

impl Default for PoseFitConfig {
    fn default() -> Self {
        PoseFitConfig {
            lr: 1e-2,
            refine_lr: 2e-3,
            depth_lr: 1e-2,
            iters_per_level: 200,
            levels: 3,
            initial_depth: 4.0,
            smoothness: 0.0,
            divergence_patience: 50,
            depth_warmup: 0.5,
            prefilter_sigma: 1.0,
        }
    }
}

impl PoseFitConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lr) || !pos(self.refine_lr) || !pos(self.depth_lr) || !pos(self.initial_depth) {
            return Err(Error::invalid("step sizes and the initial depth must be positive"));
        }
        if self.levels == 0 || self.divergence_patience == 0 {
            return Err(Error::invalid("levels and divergence patience must be positive"));
        }
        if !(0.0..1.0).contains(&self.depth_warmup) {
            return Err(Error::invalid("depth warmup must lie in [0, 1)"));
        }
        if !(self.smoothness >= 0.0) || !(self.prefilter_sigma >= 0.0 && self.prefilter_sigma.is_finite()) {
            return Err(Error::invalid("smoothness weight and prefilter sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// Result of [`estimate_pose`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEstimate {
    pub coarse: PoseSE3,
    /// `(dR axis-angle, dt)` with `dt` expressed in the rotation-aligned frame.
    pub residual: [f64; 6],
    /// `coarse.compose(residual)`.
    pub final_pose: PoseSE3,
    /// Full-resolution photometric loss of the coarse pose on the prefiltered
    /// aligned pair.
    pub coarse_loss: f64,
    /// Full-resolution photometric loss of the final pose; never above `coarse_loss`.
    pub final_loss: f64,
    /// Set when any stage stopped early after repeated loss increases.
    pub diverged: bool,
}

impl PoseEstimate {
    pub fn residual_pose(&self) -> PoseSE3 {
        PoseSE3::from_params(&self.residual)
    }
}

struct Level {
    source: Image,
    target: Image,
    /// `[H, W, 1]` pixels of the target that carry data.
    target_valid: Tensor,
    cam: Camera,
}

fn pyramid(source: &Image, target: &Image, target_valid: &Tensor, cam: &Camera, levels: usize) -> Vec<Level> {
    let mut out = vec![Level {
        source: source.clone(),
        target: target.clone(),
        target_valid: target_valid.clone(),
        cam: *cam,
    }];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        if last.cam.width < 16 || last.cam.height < 16 {
            break;
        }
        let valid = Image::from_tensor(last.target_valid.clone()).expect("[H, W, 1] mask");
        let down = valid.downsample2().map(|v| if v > 0.999 { 1.0 } else { 0.0 });
        out.push(Level {
            source: last.source.downsample2(),
            target: last.target.downsample2(),
            target_valid: down.into_tensor(),
            cam: last.cam.downsample2(),
        });
    }
    out.reverse();
    out
}

/// `I(g(p, d(p), pose))` for every target pixel and the mask of pixels whose
/// lookup landed inside the source.
fn warp(g: &mut Graph, source: &Image, depth: Var, pose: PoseVar, cam: &Camera) -> Result<(Var, Tensor)> {
    let (coords, ok) = project_samples(g, depth, pose, cam)?;
    let src = g.constant(source.tensor().clone());
    let (sampled, validity) = g.bilinear_sample(src, coords, SampleMode::Full, 0.0)?;
    let (h, w, c) = (cam.height, cam.width, source.channels());
    let img = g.reshape(sampled, &[h, w, c])?;
    let mask = Tensor::from_fn(&[h, w, 1], |i| {
        if validity.data()[i] > 0.999 && ok.data()[i] > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    Ok((img, mask))
}

/// Mean `|warp - target|` over pixels valid in both.
fn photometric(g: &mut Graph, warped: Var, mask: &Tensor, lvl: &Level) -> Result<Var> {
    let m = Tensor::from_fn(mask.shape(), |i| mask.data()[i] * lvl.target_valid.data()[i]);
    let count = m.sum() * lvl.target.channels() as f64;
    if count == 0.0 {
        return Err(Error::NoValidPixels);
    }
    let t = g.constant(lvl.target.tensor().clone());
    let d = g.sub(warped, t)?;
    let a = g.abs(d)?;
    let mv = g.constant(m);
    let masked = g.mul(a, mv)?;
    let s = g.sum(masked)?;
    Ok(g.mul_scalar(s, 1.0 / count)?)
}

/// Depth map from log inverse depth `s`: `d = exp(-s)`.
fn depth_from_log_inv(g: &mut Graph, s: Var) -> Result<Var> {
    let n = g.mul_scalar(s, -1.0)?;
    Ok(g.exp(n)?)
}

/// Tracks the lowest loss and flags runs of consecutive increases.
struct Monitor {
    best: f64,
    last: f64,
    rising: usize,
    patience: usize,
}

impl Monitor {
    fn new(patience: usize) -> Self {
        Monitor {
            best: f64::INFINITY,
            last: f64::INFINITY,
            rising: 0,
            patience,
        }
    }

    /// Returns `(is_new_best, diverged)`.
    fn observe(&mut self, loss: f64) -> (bool, bool) {
        self.rising = if loss > self.last { self.rising + 1 } else { 0 };
        self.last = loss;
        let better = loss < self.best;
        if better {
            self.best = loss;
        }
        (better, self.rising >= self.patience || !loss.is_finite())
    }
}

struct StageOutput {
    params: [f64; 6],
    log_inv_depth: Tensor,
    diverged: bool,
}

/// Minimize the photometric loss over pose parameters and a log inverse
/// depth (`[1]` for a fronto-parallel proxy, `[H, W, 1]` per pixel),
/// coarse-to-fine. Returns the best state seen at the finest level.
fn optimize(
    levels: &[Level],
    init_params: [f64; 6],
    init_log_inv: f64,
    per_pixel: bool,
    iters: usize,
    pose_lr: f64,
    cfg: &PoseFitConfig,
) -> Result<StageOutput> {
    let mut params = Tensor::from_vec(init_params.to_vec());
    let mut s = Tensor::from_vec(vec![init_log_inv]);
    let mut diverged = false;
    for (li, lvl) in levels.iter().enumerate() {
        let (h, w) = (lvl.cam.height, lvl.cam.width);
        if per_pixel && s.shape() != [h, w, 1] {
            s = resize_map(&s, h, w);
        }
        let depth_shape = s.shape().to_vec();
        let mut pose_adam = Adam::new(&[&[6]], 0.9, 0.999, 1e-8);
        let mut depth_adam = Adam::new(&[&depth_shape], 0.9, 0.999, 1e-8);
        let mut mon = Monitor::new(cfg.divergence_patience);
        let mut best = (params.clone(), s.clone());
        let warmup = if per_pixel { (cfg.depth_warmup * iters as f64) as usize } else { 0 };
        // the final iteration only evaluates so the last update is scored too
        for it in 0..=iters {
            let mut g = Graph::new();
            let pv = g.leaf(params.clone());
            let sv = g.leaf(s.clone());
            let pose = PoseVar::from_params(&mut g, pv)?;
            let d = depth_from_log_inv(&mut g, sv)?;
            let dmap = if per_pixel {
                d
            } else {
                let ones = g.constant(Tensor::ones(&[h, w, 1]));
                g.mul(ones, d)?
            };
            let (warped, mask) = warp(&mut g, &lvl.source, dmap, pose, &lvl.cam)?;
            let photo = photometric(&mut g, warped, &mask, lvl)?;
            let value = g.value(photo).item();
            let (better, div) = mon.observe(value);
            if better {
                best = (params.clone(), s.clone());
            }
            if div {
                warn!("pose fit: loss rose for {} consecutive steps at level {li}, keeping best", cfg.divergence_patience);
                diverged = true;
                break;
            }
            if it == iters {
                break;
            }
            let loss = if per_pixel && cfg.smoothness > 0.0 {
                let sm = smoothness_loss(&mut g, dmap, &lvl.target)?;
                let sm = g.mul_scalar(sm, cfg.smoothness)?;
                g.add(photo, sm)?
            } else {
                photo
            };
            let mut grads = g.backward(loss)?;
            let (gp, gs) = (grads.take(pv), grads.take(sv));
            if it >= warmup {
                pose_adam.step(&mut [&mut params], &[gp], pose_lr)?;
            }
            depth_adam.step(&mut [&mut s], &[gs], cfg.depth_lr)?;
            if it % 50 == 0 {
                debug!("pose fit level {li} iteration {it}: loss {value:.6}");
            }
        }
        // every level hands its best state to the next
        (params, s) = best;
    }
    let p = params.data();
    Ok(StageOutput {
        params: [p[0], p[1], p[2], p[3], p[4], p[5]],
        log_inv_depth: s,
        diverged,
    })
}

/// Bilinear resize of an `[h0, w0, 1]` map (or broadcast of a scalar) to `[h, w, 1]`.
fn resize_map(m: &Tensor, h: usize, w: usize) -> Tensor {
    if m.len() == 1 {
        return Tensor::full(&[h, w, 1], m.item());
    }
    let (h0, w0) = (m.shape()[0], m.shape()[1]);
    let (sy, sx) = (h0 as f64 / h as f64, w0 as f64 / w as f64);
    Tensor::from_fn(&[h, w, 1], |i| {
        let (y, x) = (i / w, i % w);
        let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as f64);
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w0 - 1), (y0 + 1).min(h0 - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let at = |xx: usize, yy: usize| m.data()[yy * w0 + xx];
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
    })
}

/// Gaussian blur with `cfg.prefilter_sigma`; identity for zero sigma or
/// images smaller than the stencil.
fn prefilter(img: &Image, cfg: &PoseFitConfig) -> Result<Image> {
    let sigma = cfg.prefilter_sigma;
    let n = 2 * (3.0 * sigma).ceil() as usize + 1;
    if sigma == 0.0 || img.width() <= n || img.height() <= n {
        return Ok(img.clone());
    }
    let mut g = Graph::new();
    let x = g.constant(img.tensor().clone());
    let y = g.conv2d_fixed(x, &Kernel::gaussian(n, sigma)?)?;
    Image::from_tensor(g.value(y).clone())
}

fn check_pair(source: &Image, target: &Image, cam: &Camera) -> Result<()> {
    cam.validate()?;
    if !source.same_shape(target) || source.width() != cam.width || source.height() != cam.height {
        return Err(Error::invalid("source, target and camera must agree in size"));
    }
    Ok(())
}

/// Full-resolution photometric loss of `pose` with per-pixel log inverse depth `s`.
fn evaluate(lvl: &Level, params: &[f64; 6], s: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(Tensor::from_vec(params.to_vec()));
    let sv = g.constant(resize_map(s, lvl.cam.height, lvl.cam.width));
    let pose = PoseVar::from_params(&mut g, pv)?;
    let d = depth_from_log_inv(&mut g, sv)?;
    let (warped, mask) = warp(&mut g, &lvl.source, d, pose, &lvl.cam)?;
    let photo = photometric(&mut g, warped, &mask, lvl)?;
    Ok(g.value(photo).item())
}

/// Mean `|I(g(p, depth(p), pose)) - target(p)|` over target pixels whose
/// lookup lands inside `source`.
pub fn photometric_loss(source: &Image, target: &Image, cam: &Camera, pose: &PoseSE3, depth: &Image) -> Result<f64> {
    check_pair(source, target, cam)?;
    if depth.width() != cam.width || depth.height() != cam.height || depth.channels() != 1 {
        return Err(Error::invalid("depth must be a single-channel map of the camera size"));
    }
    let lvl = Level {
        source: source.clone(),
        target: target.clone(),
        target_valid: Tensor::ones(&[cam.height, cam.width, 1]),
        cam: *cam,
    };
    let s = depth.tensor().map(|d| -d.ln());
    evaluate(&lvl, &pose.params(), &s)
}

/// Pose parameters and a single fronto-parallel depth, fitted from the identity.
pub fn fit_pose_coarse(source: &Image, target: &Image, cam: &Camera, cfg: &PoseFitConfig) -> Result<(PoseSE3, f64, bool)> {
    cfg.validate()?;
    check_pair(source, target, cam)?;
    let all = Tensor::ones(&[cam.height, cam.width, 1]);
    let levels = pyramid(source, target, &all, cam, cfg.levels);
    let out = optimize(&levels, [0.0; 6], -cfg.initial_depth.ln(), false, cfg.iters_per_level, cfg.lr, cfg)?;
    let pose = PoseSE3::from_params(&out.params).orthonormalized();
    Ok((pose, (-out.log_inv_depth.item()).exp(), out.diverged))
}

/// Rotation-align the target with `coarse` and fit a residual pose together
/// with a per-pixel depth map.
pub fn refine_pose_rotation_aligned(
    source: &Image,
    target: &Image,
    cam: &Camera,
    coarse: &PoseSE3,
    coarse_depth: f64,
    cfg: &PoseFitConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    check_pair(source, target, cam)?;
    // aligned frame a: x_c = R0 x_a, so source -> a is (I, R0^T t0) before
    // any residual; dt below is measured in frame a
    let (aligned, valid) = rotation_align_warp(target, &coarse.rotation, cam)?;
    let valid = valid.map(|v| if v > 0.999 { 1.0 } else { 0.0 });
    // full resolution only: per-pixel depth on coarser levels cannot resolve
    // the parallax and lets the residual rotation drift; the coarse stage has
    // already absorbed large motion, so the level budget is spent here
    let levels = pyramid(&prefilter(source, cfg)?, &prefilter(&aligned, cfg)?, &valid, cam, 1);
    let base_t = coarse.rotation.transpose() * coarse.translation;
    let init = [0.0, 0.0, 0.0, base_t.x, base_t.y, base_t.z];
    let s0 = -coarse_depth.ln();
    let finest = levels.last().expect("at least one level");
    let coarse_loss = evaluate(finest, &init, &Tensor::from_vec(vec![s0]))?;

    let out = optimize(&levels, init, s0, true, cfg.levels * cfg.iters_per_level, cfg.refine_lr, cfg)?;
    let final_loss = evaluate(finest, &out.params, &out.log_inv_depth)?;
    let (residual, final_loss) = if final_loss <= coarse_loss {
        let p = out.params;
        ([p[0], p[1], p[2], p[3] - base_t.x, p[4] - base_t.y, p[5] - base_t.z], final_loss)
    } else {
        ([0.0; 6], coarse_loss)
    };
    let dr = so3_exp(&Vector3::new(residual[0], residual[1], residual[2]));
    let delta = PoseSE3 {
        rotation: dr,
        translation: Vector3::new(residual[3], residual[4], residual[5]),
    };
    Ok(PoseEstimate {
        coarse: *coarse,
        residual,
        final_pose: coarse.compose(&delta).orthonormalized(),
        coarse_loss,
        final_loss,
        diverged: out.diverged,
    })
}

/// Two-stage estimate of the pose taking `source` to `target`.
pub fn estimate_pose(source: &Image, target: &Image, cam: &Camera, cfg: &PoseFitConfig) -> Result<PoseEstimate> {
    let (coarse, depth, div) = fit_pose_coarse(source, target, cam, cfg)?;
    let mut est = refine_pose_rotation_aligned(source, target, cam, &coarse, depth, cfg)?;
    est.diverged |= div;
    Ok(est)
}

/// Baseline without rotation alignment: pose and per-pixel depth fitted
/// jointly from the identity with the two-stage budget.
pub fn estimate_pose_single_stage(source: &Image, target: &Image, cam: &Camera, cfg: &PoseFitConfig) -> Result<PoseEstimate> {
    cfg.validate()?;
    check_pair(source, target, cam)?;
    let all = Tensor::ones(&[cam.height, cam.width, 1]);
    let levels = pyramid(&prefilter(source, cfg)?, &prefilter(target, cfg)?, &all, cam, cfg.levels);
    let s0 = -cfg.initial_depth.ln();
    let finest = levels.last().expect("at least one level");
    let coarse_loss = evaluate(finest, &[0.0; 6], &Tensor::from_vec(vec![s0]))?;
    let out = optimize(&levels, [0.0; 6], s0, true, 2 * cfg.iters_per_level, cfg.lr, cfg)?;
    let pose = PoseSE3::from_params(&out.params).orthonormalized();
    Ok(PoseEstimate {
        coarse: PoseSE3::identity(),
        residual: out.params,
        final_pose: pose,
        coarse_loss,
        final_loss: evaluate(finest, &out.params, &out.log_inv_depth)?,
        diverged: out.diverged,
    })
}
