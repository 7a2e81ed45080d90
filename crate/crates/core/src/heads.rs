//! Trainable per-scene parameters: feature grids, the recalibration heads
//! `F_D`/`F_V`, the positional encoding and the sampler head `F_S`.

use diffcore::{Graph, SampleMode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{make_exponential_schedule, project_samples, Camera, PoseVar, SampleSchedule};

/// Number of scalar inputs to the positional encoding: pixel (2), axis-angle
/// rotation (3), translation (3).
pub const ENCODING_INPUTS: usize = 8;

/// Initial F_V logit drop from the smallest to the largest VDE disparity.
pub const VDE_INIT_RAMP: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GammaMode {
    /// `Linear(8, 16) - ELU - Linear(16, 16)`.
    Learnable,
    /// `[sin(2^l pi x), cos(2^l pi x)]` for `l < frequencies`.
    Periodic { frequencies: usize },
}

/// Architecture and rendering hyperparameters shared by everything that
/// builds a render graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub n_v: usize,
    pub n_star: usize,
    pub near: f64,
    pub far: f64,
    pub feature_channels: usize,
    pub recal_hidden: usize,
    pub sampler_hidden: usize,
    pub gamma: GammaMode,
    pub gamma_hidden: usize,
    pub gamma_width: usize,
    pub epsilon_vde: f64,
    pub vde_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 32,
            n_v: 32,
            n_star: 16,
            near: 1.0,
            far: 16.0,
            feature_channels: 32,
            recal_hidden: 32,
            sampler_hidden: 64,
            gamma: GammaMode::Learnable,
            gamma_hidden: 16,
            gamma_width: 16,
            epsilon_vde: crate::vde::DEFAULT_EPSILON,
            vde_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n,
            self.n_v,
            self.n_star,
            self.feature_channels,
            self.recal_hidden,
            self.sampler_hidden,
            self.gamma_hidden,
            self.gamma_width,
        ];
        if counts.contains(&0) || self.n < 2 || self.n_v < 2 {
            return Err(Error::invalid("model sizes must be positive (N, N_v >= 2)"));
        }
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::invalid("need 0 < near < far"));
        }
        if !(self.epsilon_vde > 0.0 && self.epsilon_vde < 1.0 / self.far) {
            return Err(Error::invalid("epsilon_vde must lie in (0, 1/far)"));
        }
        if let GammaMode::Periodic { frequencies: 0 } = self.gamma {
            return Err(Error::invalid("periodic encoding needs at least one frequency"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<SampleSchedule> {
        make_exponential_schedule(self.near, self.far, self.n)
    }

    /// Width of `gamma(p, R, t)`.
    pub fn encoding_width(&self) -> usize {
        match self.gamma {
            GammaMode::Learnable => self.gamma_width,
            GammaMode::Periodic { frequencies } => ENCODING_INPUTS * 2 * frequencies,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully connected stack with ELU between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Weights uniform in `+-1/sqrt(fan_in)`, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|p| {
                let bound = 1.0 / (p[0] as f64).sqrt();
                Layer {
                    weight: Tensor::from_fn(&[p[0], p[1]], |_| rng.gen_range(-bound..bound)),
                    bias: Tensor::zeros(&[p[1]]),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zero_last_layer(mut self) -> Self {
        if let Some(l) = self.layers.last_mut() {
            l.weight = Tensor::zeros(l.weight.shape());
            l.bias = Tensor::zeros(l.bias.shape());
        }
        self
    }

    /// Set the last layer's bias to `f(j)` for output `j`.
    pub fn with_last_bias(mut self, f: impl Fn(usize) -> f64) -> Self {
        if let Some(l) = self.layers.last_mut() {
            l.bias = Tensor::from_fn(l.bias.shape(), f);
        }
        self
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }
}

/// Graph handles for one [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.elu(h)?;
            }
            h = g.linear(h, w, Some(b))?;
        }
        Ok(h)
    }
}

/// Everything optimized per scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// `W_D[H, W, C]`.
    pub w_d: Tensor,
    /// `W_V[H, W, C]`.
    pub w_v: Tensor,
    pub f_d: Mlp,
    pub f_v: Mlp,
    pub f_s: Mlp,
    pub gamma: Option<Mlp>,
}

/// Graph handles for [`SceneParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub w_d: Var,
    pub w_v: Var,
    pub f_d: MlpVars,
    pub f_v: MlpVars,
    pub f_s: MlpVars,
    pub gamma: Option<MlpVars>,
    /// Every handle in [`SceneParams::named`] order.
    pub all: Vec<Var>,
}

impl SceneParams {
    pub fn init(cfg: &ModelConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.feature_channels;
        let grid = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[height, width, c], |_| rng.gen_range(-1.0..1.0));
        let w_d = grid(&mut rng);
        let w_v = grid(&mut rng);
        let enc = cfg.encoding_width();
        let f_d = Mlp::new(&[c + enc, cfg.recal_hidden, cfg.n], &mut rng);
        // start near-Lambertian: VDE mass on the smallest disparity
        let ramp = VDE_INIT_RAMP / (cfg.n_v - 1) as f64;
        let f_v = Mlp::new(&[c + enc, cfg.recal_hidden, cfg.n_v], &mut rng).with_last_bias(|j| -ramp * j as f64);
        let f_s = Mlp::new(
            &[4 * cfg.n, cfg.sampler_hidden, cfg.sampler_hidden, 2 * cfg.n_star],
            &mut rng,
        )
        .zero_last_layer();
        let gamma = match cfg.gamma {
            GammaMode::Learnable => Some(Mlp::new(
                &[ENCODING_INPUTS, cfg.gamma_hidden, cfg.gamma_width],
                &mut rng,
            )),
            GammaMode::Periodic { .. } => None,
        };
        Ok(SceneParams {
            w_d,
            w_v,
            f_d,
            f_v,
            f_s,
            gamma,
        })
    }

    pub fn height(&self) -> usize {
        self.w_d.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w_d.shape()[1]
    }

    fn mlps(&self) -> Vec<(&'static str, &Mlp)> {
        let mut v = vec![("f_d", &self.f_d), ("f_v", &self.f_v), ("f_s", &self.f_s)];
        if let Some(gm) = &self.gamma {
            v.push(("gamma", gm));
        }
        v
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("w_d".to_string(), &self.w_d), ("w_v".to_string(), &self.w_v)];
        for (name, m) in self.mlps() {
            for (i, l) in m.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &l.weight));
                out.push((format!("{name}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    /// Mutable tensors in [`named`](Self::named) order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_d, &mut self.w_v];
        let mut mlps = vec![&mut self.f_d, &mut self.f_v, &mut self.f_s];
        if let Some(gm) = self.gamma.as_mut() {
            mlps.push(gm);
        }
        for m in mlps {
            for l in m.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Rebuild from tensors laid out like [`init`](Self::init) would for `cfg`.
    pub fn from_named(cfg: &ModelConfig, h: usize, w: usize, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut p = Self::init(cfg, h, w, 0)?;
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(p.tensors_mut()) {
            let t = lookup(name).ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(p)
    }

    /// Register every tensor in `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let all: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.vars_from(&all).expect("one handle per named tensor")
    }

    /// Handles for tensors already registered in [`named`](Self::named) order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<ParamVars> {
        if vars.len() != self.named().len() {
            return Err(Error::invalid(format!(
                "expected {} parameter handles, got {}",
                self.named().len(),
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("count checked above");
        let w_d = next();
        let w_v = next();
        let mut mlp = |m: &Mlp| MlpVars {
            layers: m.layers.iter().map(|_| (next(), next())).collect(),
        };
        let f_d = mlp(&self.f_d);
        let f_v = mlp(&self.f_v);
        let f_s = mlp(&self.f_s);
        let gamma = self.gamma.as_ref().map(&mut mlp);
        Ok(ParamVars {
            w_d,
            w_v,
            f_d,
            f_v,
            f_s,
            gamma,
            all: vars.to_vec(),
        })
    }
}

/// `gamma(p, R, t)` for every pixel, shape `[H, W, D_gamma]`.
///
/// `pose_params` is the 6-vector `[axis-angle, translation]` of the target.
pub fn positional_encoding(
    g: &mut Graph,
    cam: &Camera,
    pose_params: Var,
    mode: GammaMode,
    gamma: Option<&MlpVars>,
) -> Result<Var> {
    if g.value(pose_params).len() != 6 {
        return Err(Error::invalid("pose parameters must have 6 entries"));
    }
    let grid = g.constant(cam.normalized_grid());
    let pose = g.tile(pose_params, &[cam.height, cam.width])?;
    let input = g.concat(&[grid, pose])?;
    match mode {
        GammaMode::Learnable => {
            let m = gamma.ok_or_else(|| Error::invalid("learnable encoding needs gamma parameters"))?;
            m.forward(g, input)
        }
        GammaMode::Periodic { frequencies } => {
            let mut parts = Vec::with_capacity(2 * frequencies);
            for l in 0..frequencies {
                let x = g.mul_scalar(input, f64::powi(2.0, l as i32) * std::f64::consts::PI)?;
                parts.push(g.unary(diffcore::UnaryOp::Sin, x)?);
                parts.push(g.unary(diffcore::UnaryOp::Cos, x)?);
            }
            Ok(g.concat(&parts)?)
        }
    }
}

/// `F(W(p), gamma(p))`: per-pixel logits from features and encoding.
pub fn recalibrate(g: &mut Graph, features: Var, encoding: Var, head: &MlpVars) -> Result<Var> {
    let x = g.concat(&[features, encoding])?;
    head.forward(g, x)
}

/// `F_S` on `[DP, colors]`: returns `(t*, w*)`, each `[H, W, N*]`.
///
/// Distances are `near (far/near)^sigmoid(raw)`; weights are a softmax.
pub fn sampler_head(
    g: &mut Graph,
    probs: Var,
    colors: Var,
    head: &MlpVars,
    near: f64,
    far: f64,
) -> Result<(Var, Var)> {
    let ps = g.shape(probs).to_vec();
    let cs = g.shape(colors).to_vec();
    if ps.len() != 3 || cs.len() != 4 || cs[..3] != ps[..] {
        return Err(Error::invalid(format!(
            "sampler inputs {ps:?} and {cs:?} are inconsistent"
        )));
    }
    let flat = g.reshape(colors, &[ps[0], ps[1], cs[2] * cs[3]])?;
    let x = g.concat(&[probs, flat])?;
    let raw = head.forward(g, x)?;
    let width = g.value(raw).channels();
    if !width.is_multiple_of(2) {
        return Err(Error::invalid("sampler output width must be even"));
    }
    let k = width / 2;
    let dist = g.slice(raw, 2, 0, k)?;
    let wts = g.slice(raw, 2, k, width)?;
    let s = g.sigmoid(dist)?;
    let log_t = g.affine(s, (far / near).ln(), near.ln())?;
    let tstar = g.exp(log_t)?;
    let wstar = g.softmax_channels(wts)?;
    Ok((tstar, wstar))
}

/// `I'(p) = sum_k w*_k(p) Ivc(g(p, t*_k(p)))`. Also returns the per-pixel
/// validity `[H, W, N*]` of the fine samples.
pub fn fine_synthesize(
    g: &mut Graph,
    ivc: Var,
    tstar: Var,
    wstar: Var,
    pose: PoseVar,
    cam: &Camera,
) -> Result<(Var, Tensor)> {
    let (coords, ok) = project_samples(g, tstar, pose, cam)?;
    let (colors, valid) = g.bilinear_sample(ivc, coords, SampleMode::Full, 0.0)?;
    let valid = Tensor::new(
        valid.shape().to_vec(),
        valid.data().iter().zip(ok.data()).map(|(a, b)| a * b).collect(),
    )?;
    Ok((g.weighted_sum(wstar, colors)?, valid))
}
