use rayon::prelude::*;

use crate::error::{DiffError, Result};
use crate::graph::SampleMode;
use crate::tensor::Tensor;

/// Coordinates beyond this magnitude (or non-finite) are treated as a miss.
const FAR: f64 = 1.0e7;

struct Layout {
    h: usize,
    w: usize,
    c: usize,
    /// Number of coordinate pairs.
    samples: usize,
    /// Values written per coordinate.
    width: usize,
}

fn layout(src: &Tensor, coords: &Tensor, mode: SampleMode) -> Result<Layout> {
    let ss = src.shape();
    let cs = coords.shape();
    if ss.len() != 3 {
        return Err(DiffError::InvalidArgument(format!(
            "bilinear source must be [H, W, C], got {ss:?}"
        )));
    }
    if *cs.last().unwrap() != 2 {
        return Err(DiffError::InvalidArgument(format!(
            "bilinear coordinates must end in 2, got {cs:?}"
        )));
    }
    let (h, w, c) = (ss[0], ss[1], ss[2]);
    let samples = coords.len() / 2;
    let width = match mode {
        SampleMode::Full => c,
        SampleMode::Diagonal => {
            if cs.len() < 2 || cs[cs.len() - 2] != c {
                return Err(DiffError::ShapeMismatch {
                    op: "bilinear_sample",
                    expected: vec![c, 2],
                    found: cs.to_vec(),
                });
            }
            1
        }
    };
    Ok(Layout {
        h,
        w,
        c,
        samples,
        width,
    })
}

#[derive(Clone, Copy)]
struct Corners {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

#[inline]
fn corners(u: f64, v: f64) -> Option<Corners> {
    if !(u.is_finite() && v.is_finite()) || u.abs() > FAR || v.abs() > FAR {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    Some(Corners {
        x0: x0 as isize,
        y0: y0 as isize,
        fx: u - x0,
        fy: v - y0,
    })
}

impl Layout {
    #[inline]
    fn inside(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h
    }

    #[inline]
    fn read(&self, data: &[f64], x: isize, y: isize, ch: usize, fill: f64) -> f64 {
        if self.inside(x, y) {
            data[(y as usize * self.w + x as usize) * self.c + ch]
        } else {
            fill
        }
    }

    /// Source channel read by output slot `j` of sample `s`.
    #[inline]
    fn channel(&self, mode: SampleMode, s: usize, j: usize) -> usize {
        match mode {
            SampleMode::Full => j,
            SampleMode::Diagonal => s % self.c,
        }
    }
}

pub(crate) fn forward(
    src: &Tensor,
    coords: &Tensor,
    mode: SampleMode,
    fill: f64,
) -> Result<(Tensor, Tensor)> {
    let l = layout(src, coords, mode)?;
    let sd = src.data();
    let cd = coords.data();
    let mut out = vec![0.0; l.samples * l.width];
    let mut validity = vec![0.0; l.samples];
    out.par_chunks_mut(l.width)
        .zip(validity.par_iter_mut())
        .enumerate()
        .for_each(|(s, (row, valid))| {
            let Some(k) = corners(cd[2 * s], cd[2 * s + 1]) else {
                row.iter_mut().for_each(|o| *o = fill);
                *valid = 0.0;
                return;
            };
            let taps = [
                (k.x0, k.y0, (1.0 - k.fx) * (1.0 - k.fy)),
                (k.x0 + 1, k.y0, k.fx * (1.0 - k.fy)),
                (k.x0, k.y0 + 1, (1.0 - k.fx) * k.fy),
                (k.x0 + 1, k.y0 + 1, k.fx * k.fy),
            ];
            *valid = taps
                .iter()
                .filter(|(x, y, _)| l.inside(*x, *y))
                .map(|t| t.2)
                .sum();
            for (j, o) in row.iter_mut().enumerate() {
                let ch = l.channel(mode, s, j);
                *o = taps
                    .iter()
                    .map(|&(x, y, wt)| wt * l.read(sd, x, y, ch, fill))
                    .sum();
            }
        });
    let mut out_shape = coords.shape()[..coords.shape().len() - 1].to_vec();
    if mode == SampleMode::Full {
        out_shape.push(l.c);
    }
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let vshape = if coords.shape().len() > 1 {
        coords.shape()[..coords.shape().len() - 1].to_vec()
    } else {
        vec![1]
    };
    Ok((Tensor::new(out_shape, out)?, Tensor::new(vshape, validity)?))
}

pub(crate) fn backward(
    src: &Tensor,
    coords: &Tensor,
    mode: SampleMode,
    fill: f64,
    grad: &Tensor,
    want_src: bool,
    want_coords: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let l = layout(src, coords, mode).expect("validated in forward");
    let sd = src.data();
    let cd = coords.data();
    let gd = grad.data();
    let mut gsrc = want_src.then(|| Tensor::zeros(src.shape()));
    let mut gcoords = want_coords.then(|| Tensor::zeros(coords.shape()));
    for s in 0..l.samples {
        let Some(k) = corners(cd[2 * s], cd[2 * s + 1]) else {
            continue;
        };
        let w00 = (1.0 - k.fx) * (1.0 - k.fy);
        let w10 = k.fx * (1.0 - k.fy);
        let w01 = (1.0 - k.fx) * k.fy;
        let w11 = k.fx * k.fy;
        let mut gu = 0.0;
        let mut gv = 0.0;
        for j in 0..l.width {
            let g = gd[s * l.width + j];
            if g == 0.0 {
                continue;
            }
            let ch = l.channel(mode, s, j);
            if let Some(gs) = gsrc.as_mut() {
                let gs = gs.data_mut();
                for (x, y, wt) in [
                    (k.x0, k.y0, w00),
                    (k.x0 + 1, k.y0, w10),
                    (k.x0, k.y0 + 1, w01),
                    (k.x0 + 1, k.y0 + 1, w11),
                ] {
                    if l.inside(x, y) {
                        gs[(y as usize * l.w + x as usize) * l.c + ch] += wt * g;
                    }
                }
            }
            if gcoords.is_some() {
                let v00 = l.read(sd, k.x0, k.y0, ch, fill);
                let v10 = l.read(sd, k.x0 + 1, k.y0, ch, fill);
                let v01 = l.read(sd, k.x0, k.y0 + 1, ch, fill);
                let v11 = l.read(sd, k.x0 + 1, k.y0 + 1, ch, fill);
                gu += g * ((1.0 - k.fy) * (v10 - v00) + k.fy * (v11 - v01));
                gv += g * ((1.0 - k.fx) * (v01 - v00) + k.fx * (v11 - v10));
            }
        }
        if let Some(gc) = gcoords.as_mut() {
            gc.data_mut()[2 * s] = gu;
            gc.data_mut()[2 * s + 1] = gv;
        }
    }
    (gsrc, gcoords)
}
