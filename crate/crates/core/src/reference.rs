//! Scalar per-pixel reference implementation of the render pipeline.
//!
//! Every quantity is recomputed with plain loops straight from its defining
//! formula: no graph, no batching and no helpers shared with the vectorized
//! path. It exists to be compared against [`crate::pipeline`].

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::heads::{GammaMode, Mlp, ModelConfig, SceneParams};
use crate::image::Image;

/// Outputs of [`reference_render`].
#[derive(Clone, Debug)]
pub struct ReferenceRender {
    pub infused: Image,
    pub coarse: Image,
    pub fine: Image,
}

type Mat3 = [[f64; 3]; 3];

fn rodrigues(w: [f64; 3]) -> Mat3 {
    let th = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if th == 0.0 {
        return r;
    }
    let k = [w[0] / th, w[1] / th, w[2] / th];
    let (s, c) = th.sin_cos();
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = c * if i == j { 1.0 } else { 0.0 } + (1.0 - c) * k[i] * k[j];
        }
    }
    r[0][1] -= s * k[2];
    r[0][2] += s * k[1];
    r[1][0] += s * k[2];
    r[1][2] -= s * k[0];
    r[2][0] -= s * k[1];
    r[2][1] += s * k[0];
    r
}

/// Lift `(u, v)` to `depth`, apply `R^T (X - t)` and project.
fn project(cam: &Camera, r: &Mat3, t: [f64; 3], u: f64, v: f64, depth: f64) -> Option<(f64, f64)> {
    let x = [
        (u - cam.cx) / cam.fx * depth - t[0],
        (v - cam.cy) / cam.fy * depth - t[1],
        depth - t[2],
    ];
    let mut y = [0.0; 3];
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = r[0][i] * x[0] + r[1][i] * x[1] + r[2][i] * x[2];
    }
    if y[2].abs() < 1e-9 {
        return None;
    }
    Some((cam.fx * y[0] / y[2] + cam.cx, cam.fy * y[1] / y[2] + cam.cy))
}

/// Bilinear read of channel `ch` from an `[H, W, C]` buffer, `fill` outside.
fn sample(data: &[f64], h: usize, w: usize, c: usize, ch: usize, at: Option<(f64, f64)>, fill: f64) -> f64 {
    let Some((u, v)) = at else { return fill };
    if !(u.is_finite() && v.is_finite()) || u.abs() > 1e7 || v.abs() > 1e7 {
        return fill;
    }
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let read = |x: f64, y: f64| {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            fill
        } else {
            data[(y as usize * w + x as usize) * c + ch]
        }
    };
    (1.0 - fx) * (1.0 - fy) * read(x0, y0)
        + fx * (1.0 - fy) * read(x0 + 1.0, y0)
        + (1.0 - fx) * fy * read(x0, y0 + 1.0)
        + fx * fy * read(x0 + 1.0, y0 + 1.0)
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn mlp(m: &Mlp, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for (li, layer) in m.layers.iter().enumerate() {
        if li > 0 {
            for v in h.iter_mut() {
                if *v < 0.0 {
                    *v = v.exp() - 1.0;
                }
            }
        }
        let (din, dout) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let wd = layer.weight.data();
        let mut out = layer.bias.data().to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            for (k, hk) in h.iter().enumerate().take(din) {
                *o += hk * wd[k * dout + j];
            }
        }
        h = out;
    }
    h
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if i < 0 {
        (-i) as usize
    } else if i >= n {
        (2 * (n - 1) - i) as usize
    } else {
        i as usize
    }
}

/// Render the target with pose parameters `[axis-angle, t]` by direct
/// evaluation of every defining formula.
pub fn reference_render(
    cfg: &ModelConfig,
    image: &Image,
    cam: &Camera,
    params: &SceneParams,
    pose: &[f64; 6],
) -> Result<ReferenceRender> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if cam.width != w || cam.height != h || params.height() != h || params.width() != w {
        return Err(Error::invalid("reference inputs disagree in size"));
    }
    let r = rodrigues([pose[0], pose[1], pose[2]]);
    let t = [pose[3], pose[4], pose[5]];
    let eye = rodrigues([0.0; 3]);
    let src = image.data();
    let n = cfg.n;
    let ratio = cfg.far / cfg.near;
    let dist: Vec<f64> = (0..n)
        .map(|i| cfg.near * ratio.powf(1.0 - i as f64 / (n - 1) as f64))
        .collect();

    // per-pixel logits
    let feats = |grid: &[f64], px: usize| grid[px * cfg.feature_channels..(px + 1) * cfg.feature_channels].to_vec();
    let mut dl = vec![0.0; h * w * n];
    let mut vl = vec![0.0; h * w * cfg.n_v];
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            let norm = |a: usize, len: usize| if len > 1 { 2.0 * a as f64 / (len - 1) as f64 - 1.0 } else { 0.0 };
            let raw = [norm(x, w), norm(y, h), pose[0], pose[1], pose[2], pose[3], pose[4], pose[5]];
            let enc = match cfg.gamma {
                GammaMode::Learnable => mlp(params.gamma.as_ref().expect("learnable encoding"), &raw),
                GammaMode::Periodic { frequencies } => {
                    let mut e = Vec::new();
                    for l in 0..frequencies {
                        let f = (1u64 << l) as f64 * std::f64::consts::PI;
                        e.extend(raw.iter().map(|v| (v * f).sin()));
                        e.extend(raw.iter().map(|v| (v * f).cos()));
                    }
                    e
                }
            };
            let mut xin = feats(params.w_d.data(), px);
            xin.extend(&enc);
            dl[px * n..(px + 1) * n].copy_from_slice(&mlp(&params.f_d, &xin));
            let mut vin = feats(params.w_v.data(), px);
            vin.extend(&enc);
            vl[px * cfg.n_v..(px + 1) * cfg.n_v].copy_from_slice(&mlp(&params.f_v, &vin));
        }
    }

    // VDE infusion on the source raster
    let mut infused = src.to_vec();
    if cfg.vde_enabled {
        let mut low = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in -2isize..=2 {
                        for dx in -2isize..=2 {
                            let sy = reflect(y as isize + dy, h);
                            let sx = reflect(x as isize + dx, w);
                            acc += src[(sy * w + sx) * c + ch] / 25.0;
                        }
                    }
                    low[(y * w + x) * c + ch] = acc;
                }
            }
        }
        let nv = cfg.n_v;
        for y in 0..h {
            for x in 0..w {
                let px = y * w + x;
                let probs = softmax(&dl[px * n..(px + 1) * n]);
                let dhat: f64 = probs.iter().zip(&dist).map(|(p, d)| p * d).sum();
                let mut logits = Vec::with_capacity(nv);
                let mut at = Vec::with_capacity(nv);
                for j in 0..nv {
                    let frac = j as f64 / (nv - 1) as f64;
                    let v = -frac * (1.0 / dhat - cfg.epsilon_vde) - cfg.epsilon_vde;
                    let q = project(cam, &eye, t, x as f64, y as f64, 1.0 / v);
                    logits.push(sample(&vl, h, w, nv, j, q, -30.0));
                    at.push(q);
                }
                let vp = softmax(&logits);
                for ch in 0..c {
                    let high = src[px * c + ch] - low[px * c + ch];
                    let mixed: f64 = (0..nv).map(|j| vp[j] * sample(&low, h, w, c, ch, at[j], 0.0)).sum();
                    infused[px * c + ch] = high + mixed;
                }
            }
        }
    }

    // coarse and fine synthesis at every target pixel
    let mut coarse = vec![0.0; h * w * c];
    let mut fine = vec![0.0; h * w * c];
    let ns = cfg.n_star;
    for y in 0..h {
        for x in 0..w {
            let px = y * w + x;
            let at: Vec<_> = dist.iter().map(|&d| project(cam, &r, t, x as f64, y as f64, d)).collect();
            let logits: Vec<f64> = (0..n).map(|i| sample(&dl, h, w, n, i, at[i], -30.0)).collect();
            let dp = softmax(&logits);
            let mut colors = vec![0.0; n * c];
            for i in 0..n {
                for ch in 0..c {
                    colors[i * c + ch] = sample(&infused, h, w, c, ch, at[i], 0.0);
                    coarse[px * c + ch] += dp[i] * colors[i * c + ch];
                }
            }
            let mut sin = dp.clone();
            sin.extend(&colors);
            let raw = mlp(&params.f_s, &sin);
            let wts = softmax(&raw[ns..2 * ns]);
            for k in 0..ns {
                let sig = 1.0 / (1.0 + (-raw[k]).exp());
                let tk = cfg.near * ratio.powf(sig);
                let q = project(cam, &r, t, x as f64, y as f64, tk);
                for ch in 0..c {
                    fine[px * c + ch] += wts[k] * sample(&infused, h, w, c, ch, q, 0.0);
                }
            }
        }
    }

    let wrap = |d: Vec<f64>| Image::from_tensor(diffcore::Tensor::new(vec![h, w, c], d)?);
    Ok(ReferenceRender {
        infused: wrap(infused)?,
        coarse: wrap(coarse)?,
        fine: wrap(fine)?,
    })
}
