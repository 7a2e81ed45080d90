//! Self-supervised photometric objective.

use diffcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Validity above which a pixel takes part in the synthesis loss.
pub const VALID_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Perceptual weight; kept for configuration compatibility, no
    /// perceptual term is evaluated.
    pub alpha_p: f64,
    pub alpha_sm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_p: 0.01,
            alpha_sm: 0.05,
        }
    }
}

/// `I^o = (1 - O) I_gt + O I_pred`.
pub fn occlusion_blend(g: &mut Graph, pred: Var, gt: Var, occlusion: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::invalid("prediction and target differ in shape"));
    }
    let diff = g.sub(pred, gt)?;
    let gated = g.mul(diff, occlusion)?;
    Ok(g.add(gt, gated)?)
}

/// Binary `[H, W, 1]` mask of pixels whose validity exceeds [`VALID_THRESHOLD`].
pub fn valid_mask(validity: &Tensor) -> Tensor {
    validity.map(|v| if v > VALID_THRESHOLD { 1.0 } else { 0.0 })
}

/// Mean of `|I^o - I_gt|` over valid pixels and all channels.
pub fn synthesis_loss(g: &mut Graph, blended: Var, gt: Var, validity: &Tensor) -> Result<Var> {
    let shape = g.shape(blended).to_vec();
    if shape != g.shape(gt) || shape.len() != 3 || validity.shape() != [shape[0], shape[1], 1] {
        return Err(Error::invalid("synthesis loss inputs disagree in shape"));
    }
    let mask = valid_mask(validity);
    let count = mask.sum() * shape[2] as f64;
    if count == 0.0 {
        return Err(Error::NoValidPixels);
    }
    let m = g.constant(mask);
    let diff = g.sub(blended, gt)?;
    let abs = g.abs(diff)?;
    let masked = g.mul(abs, m)?;
    let total = g.sum(masked)?;
    Ok(g.mul_scalar(total, 1.0 / count)?)
}

/// Forward differences along `axis` (0 = rows, 1 = columns).
fn forward_diff(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    let n = g.shape(x)[axis];
    let a = g.slice(x, axis, 1, n)?;
    let b = g.slice(x, axis, 0, n - 1)?;
    Ok(g.sub(a, b)?)
}

fn edge_weights(gray: &Image, axis: usize) -> Tensor {
    let (h, w) = (gray.height(), gray.width());
    let (dh, dw) = if axis == 0 { (h - 1, w) } else { (h, w - 1) };
    Tensor::from_fn(&[dh, dw, 1], |i| {
        let (y, x) = (i / dw, i % dw);
        let (y2, x2) = if axis == 0 { (y + 1, x) } else { (y, x + 1) };
        (-(gray.get(x2, y2, 0) - gray.get(x, y, 0)).abs()).exp()
    })
}

/// Edge-aware smoothness of the mean-normalized disparity `1 / D`:
/// `mean |dx d| exp(-|dx I|) + mean |dy d| exp(-|dy I|)`.
pub fn smoothness_loss(g: &mut Graph, depth: Var, image: &Image) -> Result<Var> {
    let s = g.shape(depth).to_vec();
    if s.len() != 3 || s[2] != 1 || s[0] != image.height() || s[1] != image.width() {
        return Err(Error::invalid("depth and image rasters differ"));
    }
    if s[0] < 2 || s[1] < 2 {
        return Err(Error::invalid("smoothness needs at least a 2x2 raster"));
    }
    let gray = image.luminance();
    let disp = g.recip(depth)?;
    let mean = g.mean(disp)?;
    let norm = g.div(disp, mean)?;
    let mut total = None;
    for axis in 0..2 {
        let d = forward_diff(g, norm, axis)?;
        let a = g.abs(d)?;
        let w = g.constant(edge_weights(&gray, axis));
        let wa = g.mul(a, w)?;
        let m = g.mean(wa)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("two axes"))
}

/// Inputs of [`total_loss`] for one target.
#[derive(Clone, Debug)]
pub struct TargetTerms<'a> {
    pub coarse: Var,
    pub fine: Var,
    pub gt: &'a Image,
    pub occlusion: Var,
    pub validity: &'a Tensor,
    pub depth: Var,
}

/// `l_syn(I'') + l_syn(I') + alpha_sm l_sm`.
///
/// The occlusion mask gates the loss as a fixed weight: its value is used
/// but no gradient flows into it, so the optimizer cannot lower the loss by
/// declaring pixels occluded.
pub fn total_loss(g: &mut Graph, t: &TargetTerms, source: &Image, w: &LossWeights) -> Result<Var> {
    if !(w.alpha_sm >= 0.0 && w.alpha_p >= 0.0) {
        return Err(Error::invalid("loss weights must be nonnegative"));
    }
    let gt = g.constant(t.gt.tensor().clone());
    let occ = g.constant(g.value(t.occlusion).clone());
    let mut parts = Vec::new();
    for pred in [t.coarse, t.fine] {
        let blended = occlusion_blend(g, pred, gt, occ)?;
        parts.push(synthesis_loss(g, blended, gt, t.validity)?);
    }
    let sm = smoothness_loss(g, t.depth, source)?;
    let sm = g.mul_scalar(sm, w.alpha_sm)?;
    let a = g.add(parts[0], parts[1])?;
    Ok(g.add(a, sm)?)
}
