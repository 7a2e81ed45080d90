//! Per-scene optimization: Adam, the step-halving schedule and the fitting
//! loop over the two neighbouring target views.

use diffcore::{Graph, Tensor, Var};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::heads::{ModelConfig, SceneParams};
use crate::image::Image;
use crate::io::Checkpoint;
use crate::objective::{total_loss, LossWeights, TargetTerms};
use crate::metrics::{self, MetricReport};
use crate::pipeline::{pose_params_tensor, render_target, render_view, RenderedView, Source};
use crate::synthoracle::{FrameSet, NEXT, PREV, SOURCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub iters: usize,
    /// Fractions of `iters` at which the step size halves.
    pub lr_halving_points: Vec<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Loss above `divergence_factor` times the first loss aborts the fit.
    pub divergence_factor: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iters: 2000,
            lr_halving_points: vec![0.5, 0.75, 0.9],
            seed: 0,
            weights: LossWeights::default(),
            divergence_factor: 1e3,
        }
    }
}

impl FitConfig {
    /// Step size for fitting one scene from scratch within the default budget.
    pub const PER_SCENE_LR: f64 = 1e-2;
    /// Smoothness weight for fitting without a perceptual term; the L1 term
    /// alone is far weaker than L1 plus perceptual, so the default weight
    /// flattens depth discontinuities that lack an intensity edge.
    pub const PER_SCENE_ALPHA_SM: f64 = 0.005;

    /// Defaults with the per-scene step size and smoothness weight.
    pub fn per_scene() -> Self {
        FitConfig {
            lr: Self::PER_SCENE_LR,
            weights: LossWeights {
                alpha_sm: Self::PER_SCENE_ALPHA_SM,
                ..LossWeights::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.lr) || !pos(self.adam_eps) || !pos(self.divergence_factor) {
            return Err(Error::invalid("lr, adam_eps and divergence_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.iters == 0 {
            return Err(Error::invalid("iters must be positive"));
        }
        if self.lr_halving_points.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("lr halving points must be fractions"));
        }
        Ok(())
    }

    /// Step size at iteration `i`.
    pub fn lr_at(&self, i: usize) -> f64 {
        let halvings = self
            .lr_halving_points
            .iter()
            .filter(|&&f| i as f64 >= f * self.iters as f64)
            .count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// Adam moments for a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Steps taken, skipped ones included.
    pub t: u64,
    /// Steps skipped because a gradient was not finite.
    pub skipped: u64,
}

impl Adam {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            skipped: 0,
        }
    }

    /// One bias-corrected update. Returns `false` (and leaves parameters and
    /// moments untouched) when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("Adam state, parameters and gradients differ in count"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::invalid("Adam parameter and gradient shapes differ"));
            }
        }
        self.t += 1;
        if grads.iter().any(|g| !g.all_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// One supervised neighbour view.
#[derive(Clone, Debug)]
pub struct Target {
    pub image: Image,
    pub pose: PoseSE3,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub checkpoint: Checkpoint,
    /// Total loss before each step.
    pub trace: Vec<f64>,
    pub skipped_steps: u64,
}

/// Total loss over all targets as a graph node, with the parameter handles.
pub fn scene_loss(
    g: &mut Graph,
    cfg: &FitConfig,
    src: &Source,
    params: &SceneParams,
    targets: &[Target],
) -> Result<(Var, Vec<Var>)> {
    let vars = params.bind(g, true);
    let mut total: Option<Var> = None;
    for t in targets {
        let pp = g.constant(pose_params_tensor(&t.pose));
        let r = render_target(g, &cfg.model, src, &vars, pp)?;
        let terms = TargetTerms {
            coarse: r.coarse,
            fine: r.fine,
            gt: &t.image,
            occlusion: r.occlusion,
            validity: &r.validity,
            depth: r.depth,
        };
        let l = total_loss(g, &terms, &src.image, &cfg.weights)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("at least one target is required"))?;
    Ok((total, vars.all))
}

/// Fit scene parameters so the source re-renders every target.
pub fn fit(cfg: &FitConfig, source: &Image, cam: crate::geometry::Camera, targets: &[Target]) -> Result<FitResult> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("at least one target is required"));
    }
    for t in targets {
        if !t.image.same_shape(source) {
            return Err(Error::invalid("target and source images differ in shape"));
        }
    }
    let src = Source::new(source.clone(), cam, &cfg.model)?;
    let mut params = SceneParams::init(&cfg.model, cam.height, cam.width, cfg.seed)?;
    let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam = Adam::new(&shape_refs, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut trace = Vec::with_capacity(cfg.iters);

    for i in 0..cfg.iters {
        let mut g = Graph::new();
        let (loss, vars) = scene_loss(&mut g, cfg, &src, &params, targets)?;
        let value = g.value(loss).item();
        trace.push(value);
        if !value.is_finite() || value > cfg.divergence_factor * trace[0].max(1e-12) {
            warn!("fit diverged at iteration {i}: loss {value}");
            return Err(Error::Diverged {
                iteration: i,
                loss: value,
                trace,
            });
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
        let lr = cfg.lr_at(i);
        if !adam.step(&mut params.tensors_mut(), &grads, lr)? {
            warn!("iteration {i}: non-finite gradient, step skipped");
        }
        if i % 100 == 0 {
            debug!("iteration {i}: loss {value:.6} lr {lr:.2e}");
        }
    }
    info!(
        "fit finished: loss {:.6} -> {:.6} over {} iterations",
        trace[0],
        trace.last().copied().unwrap_or(f64::NAN),
        cfg.iters
    );
    Ok(FitResult {
        checkpoint: Checkpoint {
            config: cfg.model.clone(),
            cam,
            source: source.clone(),
            params,
            poses: targets.iter().map(|t| t.pose).collect(),
        },
        trace,
        skipped_steps: adam.skipped,
    })
}

/// Fit on frame 0 against the previous and next frames, using `poses` for
/// the targets (ground truth or estimated).
pub fn fit_scene(frames: &FrameSet, poses: &[PoseSE3], cfg: &FitConfig) -> Result<FitResult> {
    if frames.images.len() < 3 || poses.len() < 3 {
        return Err(Error::invalid("fitting needs a source and two neighbouring frames"));
    }
    let targets = [PREV, NEXT].map(|k| Target {
        image: frames.images[k].clone(),
        pose: poses[k],
    });
    fit(cfg, &frames.images[SOURCE], frames.cam, &targets)
}

/// Quality of a fitted scene at one frame of a synthetic sequence.
#[derive(Clone, Debug)]
pub struct ViewEvaluation {
    /// Metrics of the fine render over pixels visible in the source.
    pub report: MetricReport,
    /// Mean `|D - D_gt| / D_gt` of the source-raster depth.
    pub depth_rel_mae: f64,
    pub view: RenderedView,
}

/// Render `frames.images[k]` from the checkpoint and compare with ground truth.
pub fn evaluate_frame(ckpt: &Checkpoint, frames: &FrameSet, k: usize) -> Result<ViewEvaluation> {
    if k >= frames.images.len() {
        return Err(Error::invalid(format!("frame {k} does not exist")));
    }
    let src = Source::new(ckpt.source.clone(), ckpt.cam, &ckpt.config)?;
    let view = render_view(&ckpt.config, &src, &ckpt.params, &frames.poses[k])?;
    let report = metrics::report(&view.fine, &frames.images[k], Some(&frames.visibility[k]))?;
    let gt = &frames.depth[SOURCE];
    let rel: Vec<f64> = view
        .depth
        .data()
        .iter()
        .zip(gt.data())
        .map(|(d, g)| (d - g).abs() / g)
        .collect();
    Ok(ViewEvaluation {
        report,
        depth_rel_mae: rel.iter().sum::<f64>() / rel.len() as f64,
        view,
    })
}

/// Mean of each consecutive `window`-step block of the trace.
pub fn windowed_means(trace: &[f64], window: usize) -> Vec<f64> {
    trace
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// `iteration,loss` lines with a header.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l:.9e}\n"));
    }
    s
}
