//! View-dependent effects as negative-disparity resampling.
//!
//! Highlights that "follow" the camera are rendered by sampling the source
//! along the negative-depth half of each epipolar line, using only the
//! camera translation. The per-pixel disparity range is bounded by the
//! scene disparity `1 / D(p)`.

use diffcore::{Graph, Kernel, SampleMode, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{project_samples, Camera, PoseVar};
use crate::image::Image;
use crate::renderer::{project_logits, ProjectedProbs};

/// Default smallest disparity magnitude.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Width of the box filter separating low and high frequencies.
pub const BOX_SIZE: usize = 5;

/// `I * k5x5` with reflect padding.
pub fn low_pass(img: &Image) -> Result<Image> {
    let mut g = Graph::new();
    let x = g.constant(img.tensor().clone());
    let y = g.conv2d_fixed(x, &Kernel::box_filter(BOX_SIZE)?)?;
    Image::from_tensor(g.value(y).clone())
}

/// `I_H = I - I * k5x5`.
pub fn high_freq_residual(img: &Image) -> Result<Image> {
    let lp = low_pass(img)?;
    let data = img.data().iter().zip(lp.data()).map(|(a, b)| a - b).collect();
    Image::from_tensor(Tensor::new(img.tensor().shape().to_vec(), data)?)
}

/// Per-pixel VDE disparities `[H, W, N_v]`, all in `[-1/D, -eps]`.
#[derive(Clone, Debug)]
pub struct VdeSchedule {
    pub v: Tensor,
    pub epsilon: f64,
}

impl VdeSchedule {
    pub fn new(depth: &Image, n_v: usize, epsilon: f64) -> Result<Self> {
        let mut g = Graph::new();
        let d = g.constant(depth.tensor().clone());
        let v = vde_disparity_schedule(&mut g, d, n_v, epsilon)?;
        Ok(VdeSchedule {
            v: g.value(v).clone(),
            epsilon,
        })
    }
}

/// `v_j = -(j / (N_v - 1)) (1 / D - eps) - eps` from `depth[H, W, 1]`.
pub fn vde_disparity_schedule(g: &mut Graph, depth: Var, n_v: usize, epsilon: f64) -> Result<Var> {
    if n_v < 2 || !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "VDE schedule needs N_v >= 2 and epsilon > 0 (got {n_v}, {epsilon})"
        )));
    }
    let dv = g.value(depth);
    if dv.channels() != 1 {
        return Err(Error::invalid("VDE schedule expects a single-channel depth map"));
    }
    if dv.data().iter().any(|&d| d <= 0.0) {
        return Err(Error::invalid("VDE schedule needs positive depth"));
    }
    let inv = g.recip(depth)?;
    let frac: Vec<f64> = (0..n_v).map(|j| j as f64 / (n_v - 1) as f64).collect();
    let slope = g.constant(Tensor::new(vec![1, n_v], frac.iter().map(|f| -f).collect())?);
    let offset = g.constant(Tensor::from_vec(frac.iter().map(|f| f * epsilon - epsilon).collect()));
    Ok(g.linear(inv, slope, Some(offset))?)
}

/// VDE sampling positions `[H, W, N_v, 2]`: target pixels lifted to depth
/// `1 / v_j` and moved by the target translation only.
pub fn vde_coords(g: &mut Graph, v: Var, pose: PoseVar, cam: &Camera) -> Result<Var> {
    let depths = g.recip(v)?;
    let shift = pose.translation_only(g)?;
    Ok(project_samples(g, depths, shift, cam)?.0)
}

/// Projected VDE probabilities from `VL[H, W, N_v]`.
pub fn project_vde_logits(g: &mut Graph, vl: Var, coords: Var) -> Result<ProjectedProbs> {
    project_logits(g, vl, coords)
}

/// Source-side inputs of [`infuse_vde`], computed once per source image.
#[derive(Clone, Debug)]
pub struct InfusionBasis {
    pub image: Tensor,
    pub low: Tensor,
    /// `low` repeated over the VDE samples, `[H, W, N_v, C]`.
    low_rep: Tensor,
}

impl InfusionBasis {
    pub fn new(img: &Image, n_v: usize) -> Result<Self> {
        let low = low_pass(img)?.into_tensor();
        let c = img.channels();
        let low_rep = Tensor::from_fn(&[img.height(), img.width(), n_v, c], |i| {
            let (px, ch) = (i / (n_v * c), i % c);
            low.data()[px * c + ch]
        });
        Ok(InfusionBasis {
            image: img.tensor().clone(),
            low,
            low_rep,
        })
    }
}

/// `Iv(p) = I_H(p) + sum_j VP_j(p) I_L(g(p, 1/v_j, I|t))`.
///
/// Evaluated as `I + sum_j VP_j (I_L(g_j) - I_L(p))`, which is the same
/// quantity for convex `VP` and returns `I` bit for bit when every sample
/// lands on its own pixel.
pub fn infuse_vde(g: &mut Graph, basis: &InfusionBasis, probs: Var, coords: Var) -> Result<Var> {
    let low = g.constant(basis.low.clone());
    let (samples, _) = g.bilinear_sample(low, coords, SampleMode::Full, 0.0)?;
    if g.shape(samples) != basis.low_rep.shape() {
        return Err(Error::invalid("VDE sample count does not match the infusion basis"));
    }
    let rep = g.constant(basis.low_rep.clone());
    let diff = g.sub(samples, rep)?;
    let mixed = g.weighted_sum(probs, diff)?;
    let image = g.constant(basis.image.clone());
    Ok(g.add(image, mixed)?)
}

/// `V(p) = sum_j v_j(p) softmax(VL(p))_j`, shape `[H, W, 1]`.
pub fn vde_activation(g: &mut Graph, vl: Var, v: Var) -> Result<Var> {
    let probs = g.softmax_channels(vl)?;
    let prod = g.mul(probs, v)?;
    let n = g.value(prod).channels();
    let ones = g.constant(Tensor::ones(&[n, 1]));
    Ok(g.linear(prod, ones, None)?)
}
