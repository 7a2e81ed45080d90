//! Relaxed volumetric rendering: projected depth probabilities, coarse
//! synthesis, source depth, occlusion mask and novel-view depth.
//!
//! Logit volumes live on the source raster with channel `i` holding the score
//! for distance `schedule.distances[i]`. Every function that takes a target
//! pose samples the source at the epipolar projections of the target pixels.

use diffcore::{Graph, SampleMode, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{broadcast_depths, project_samples, Camera, PoseSE3, PoseVar, SampleSchedule};
use crate::image::Image;

/// Logit given to samples that miss the source raster.
pub const MISS_LOGIT: f64 = -30.0;

/// Tolerance on `sum(w*) = 1` accepted by [`novel_view_depth`].
pub const WEIGHT_TOLERANCE: f64 = 1e-4;

/// Source coordinates of every target pixel at every schedule distance.
#[derive(Clone, Copy, Debug)]
pub struct SampleCoords {
    /// `[H, W, N, 2]`.
    pub coords: Var,
}

/// Per-target-pixel probabilities over the schedule.
#[derive(Clone, Debug)]
pub struct ProjectedProbs {
    /// `[H, W, N]`, rows sum to one.
    pub probs: Var,
    /// `[H, W, 1]`: best per-sample fraction of bilinear weight inside the source.
    pub validity: Tensor,
}

pub fn schedule_coords(
    g: &mut Graph,
    schedule: &SampleSchedule,
    pose: PoseVar,
    cam: &Camera,
) -> Result<SampleCoords> {
    let depth = g.constant(broadcast_depths(cam, &schedule.distances));
    let (coords, _) = project_samples(g, depth, pose, cam)?;
    Ok(SampleCoords { coords })
}

/// Collapse a per-sample validity `[.., K]` into `[.., 1]` by maximum.
fn max_validity(v: &Tensor) -> Tensor {
    let k = v.channels();
    let mut shape = v.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    let data = v
        .data()
        .chunks(k)
        .map(|c| c.iter().copied().fold(0.0, f64::max))
        .collect();
    Tensor::new(shape, data).expect("shape derived from input")
}

/// Sample logit channel `i` at coordinate `i`, fill misses with
/// [`MISS_LOGIT`] and softmax over channels.
pub fn project_logits(g: &mut Graph, logits: Var, coords: Var) -> Result<ProjectedProbs> {
    let (sampled, valid) = g.bilinear_sample(logits, coords, SampleMode::Diagonal, MISS_LOGIT)?;
    let probs = g.softmax_channels(sampled)?;
    Ok(ProjectedProbs {
        probs,
        validity: max_validity(&valid),
    })
}

/// `I''(p) = sum_i DP_i(p) Ivc(g(p, t_i))`. Also returns the sampled colors
/// `[H, W, N, C]`, which feed the sampler head.
pub fn coarse_synthesize(g: &mut Graph, ivc: Var, probs: Var, coords: SampleCoords) -> Result<(Var, Var)> {
    let (colors, _) = g.bilinear_sample(ivc, coords.coords, SampleMode::Full, 0.0)?;
    let out = g.weighted_sum(probs, colors)?;
    Ok((out, colors))
}

/// Constant `[N, 1]` column holding the schedule distances.
fn distance_column(g: &mut Graph, schedule: &SampleSchedule) -> Result<Var> {
    let n = schedule.len();
    Ok(g.constant(Tensor::new(vec![n, 1], schedule.distances.clone())?))
}

/// `D(p) = sum_i t_i softmax(DL(p))_i`, shape `[H, W, 1]`.
pub fn depth_from_logits(g: &mut Graph, logits: Var, schedule: &SampleSchedule) -> Result<Var> {
    if g.value(logits).channels() != schedule.len() {
        return Err(Error::invalid("logit channels do not match the schedule"));
    }
    let probs = g.softmax_channels(logits)?;
    let col = distance_column(g, schedule)?;
    Ok(g.linear(probs, col, None)?)
}

/// `O(p) = clamp(sum_i softmax(DL)_i(g(p, t_i)), 0, 1)`, shape `[H, W, 1]`.
/// The softmax is taken on the source raster before sampling and misses
/// contribute nothing.
pub fn occlusion_mask(g: &mut Graph, logits: Var, coords: SampleCoords) -> Result<Var> {
    let probs = g.softmax_channels(logits)?;
    let (sampled, _) = g.bilinear_sample(probs, coords.coords, SampleMode::Diagonal, 0.0)?;
    let n = g.value(sampled).channels();
    let ones = g.constant(Tensor::ones(&[n, 1]));
    let total = g.linear(sampled, ones, None)?;
    Ok(g.clamp(total, 0.0, 1.0)?)
}

/// `sum_k t*_k w*_k` inside a graph, shape `[H, W, 1]`.
pub fn novel_view_depth_var(g: &mut Graph, tstar: Var, wstar: Var) -> Result<Var> {
    let prod = g.mul(tstar, wstar)?;
    let n = g.value(prod).channels();
    let ones = g.constant(Tensor::ones(&[n, 1]));
    Ok(g.linear(prod, ones, None)?)
}

/// `D_c(p) = sum_k t*_k(p) w*_k(p)` for `[H, W, N*]` tensors.
pub fn novel_view_depth(tstar: &Tensor, wstar: &Tensor) -> Result<Image> {
    if tstar.shape() != wstar.shape() || tstar.shape().len() != 3 {
        return Err(Error::invalid("t* and w* must share an [H, W, N*] shape"));
    }
    let k = tstar.channels();
    let mut out = Vec::with_capacity(tstar.len() / k);
    for (t, w) in tstar.data().chunks(k).zip(wstar.data().chunks(k)) {
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::Unnormalized(total));
        }
        out.push(t.iter().zip(w).map(|(a, b)| a * b).sum());
    }
    let s = tstar.shape();
    Image::from_tensor(Tensor::new(vec![s[0], s[1], 1], out)?)
}

/// A concrete logit volume with its schedule; convenience wrappers around
/// the graph functions above for callers that only need values.
#[derive(Clone, Debug)]
pub struct LogitVolume {
    pub logits: Tensor,
    pub schedule: SampleSchedule,
}

/// Value-only counterpart of [`ProjectedProbs`].
#[derive(Clone, Debug)]
pub struct ProjectedProbVolume {
    pub probs: Tensor,
    pub validity: Tensor,
}

impl LogitVolume {
    pub fn new(logits: Tensor, schedule: SampleSchedule) -> Result<Self> {
        if logits.shape().len() != 3 || logits.channels() != schedule.len() {
            return Err(Error::invalid(format!(
                "logits {:?} do not match a {}-sample schedule",
                logits.shape(),
                schedule.len()
            )));
        }
        if !logits.all_finite() {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(LogitVolume { logits, schedule })
    }

    fn check_camera(&self, cam: &Camera) -> Result<()> {
        let s = self.logits.shape();
        if s[0] != cam.height || s[1] != cam.width {
            return Err(Error::invalid("camera does not match the logit raster"));
        }
        Ok(())
    }

    pub fn project(&self, pose: &PoseSE3, cam: &Camera) -> Result<ProjectedProbVolume> {
        self.check_camera(cam)?;
        let mut g = Graph::new();
        let l = g.constant(self.logits.clone());
        let p = PoseVar::constant(&mut g, pose);
        let c = schedule_coords(&mut g, &self.schedule, p, cam)?;
        let pp = project_logits(&mut g, l, c.coords)?;
        Ok(ProjectedProbVolume {
            probs: g.value(pp.probs).clone(),
            validity: pp.validity,
        })
    }

    pub fn depth(&self) -> Result<Image> {
        let mut g = Graph::new();
        let l = g.constant(self.logits.clone());
        let d = depth_from_logits(&mut g, l, &self.schedule)?;
        Image::from_tensor(g.value(d).clone())
    }

    pub fn occlusion(&self, pose: &PoseSE3, cam: &Camera) -> Result<Image> {
        self.check_camera(cam)?;
        let mut g = Graph::new();
        let l = g.constant(self.logits.clone());
        let p = PoseVar::constant(&mut g, pose);
        let c = schedule_coords(&mut g, &self.schedule, p, cam)?;
        let o = occlusion_mask(&mut g, l, c)?;
        Image::from_tensor(g.value(o).clone())
    }

    /// Coarse render of `ivc` at `pose` using this volume's projection.
    pub fn coarse_render(&self, ivc: &Image, pose: &PoseSE3, cam: &Camera) -> Result<Image> {
        self.check_camera(cam)?;
        let mut g = Graph::new();
        let l = g.constant(self.logits.clone());
        let src = g.constant(ivc.tensor().clone());
        let p = PoseVar::constant(&mut g, pose);
        let c = schedule_coords(&mut g, &self.schedule, p, cam)?;
        let pp = project_logits(&mut g, l, c.coords)?;
        let (out, _) = coarse_synthesize(&mut g, src, pp.probs, c)?;
        Image::from_tensor(g.value(out).clone())
    }
}
