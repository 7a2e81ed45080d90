use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// Constant 2-D stencil with odd extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    rows: usize,
    cols: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(rows: usize, cols: usize, taps: Vec<f64>) -> Result<Self> {
        if rows.is_multiple_of(2) || cols.is_multiple_of(2) || taps.len() != rows * cols {
            return Err(DiffError::InvalidArgument(format!(
                "kernel must have odd extents and {rows}x{cols} taps"
            )));
        }
        Ok(Kernel { rows, cols, taps })
    }

    /// Normalized `n x n` box filter.
    pub fn box_filter(n: usize) -> Result<Self> {
        let w = 1.0 / (n * n) as f64;
        Self::new(n, n, vec![w; n * n])
    }

    /// Normalized `n x n` Gaussian with standard deviation `sigma`.
    pub fn gaussian(n: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(DiffError::InvalidArgument("gaussian sigma must be positive".into()));
        }
        let r = (n / 2) as f64;
        let g: Vec<f64> = (0..n)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let mut taps = Vec::with_capacity(n * n);
        for a in &g {
            for b in &g {
                taps.push(a * b);
            }
        }
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        Self::new(n, n, taps)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

/// Mirror an index into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn dims(x: &[usize], k: &Kernel) -> Result<(usize, usize, usize)> {
    if x.len() != 3 {
        return Err(DiffError::InvalidArgument(format!(
            "conv2d_fixed expects [H, W, C], got {x:?}"
        )));
    }
    let (h, w, c) = (x[0], x[1], x[2]);
    if k.rows > h || k.cols > w {
        return Err(DiffError::InvalidArgument(format!(
            "{}x{} kernel larger than {h}x{w} image",
            k.rows, k.cols
        )));
    }
    Ok((h, w, c))
}

pub(crate) fn forward(x: &Tensor, k: &Kernel) -> Result<Tensor> {
    let (h, w, c) = dims(x.shape(), k)?;
    let (ry, rx) = ((k.rows / 2) as isize, (k.cols / 2) as isize);
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            for dy in 0..k.rows {
                let sy = reflect(y as isize + dy as isize - ry, h);
                for dx in 0..k.cols {
                    let sx = reflect(xx as isize + dx as isize - rx, w);
                    let t = k.taps[dy * k.cols + dx];
                    let s = (sy * w + sx) * c;
                    for ch in 0..c {
                        od[o + ch] += t * xd[s + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`forward`] for a fixed kernel.
pub(crate) fn backward(shape: &[usize], k: &Kernel, grad: &Tensor) -> Tensor {
    let (h, w, c) = dims(shape, k).expect("validated in forward");
    let (ry, rx) = ((k.rows / 2) as isize, (k.cols / 2) as isize);
    let gd = grad.data();
    let mut gx = Tensor::zeros(shape);
    let gxd = gx.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            for dy in 0..k.rows {
                let sy = reflect(y as isize + dy as isize - ry, h);
                for dx in 0..k.cols {
                    let sx = reflect(xx as isize + dx as isize - rx, w);
                    let t = k.taps[dy * k.cols + dx];
                    let s = (sy * w + sx) * c;
                    for ch in 0..c {
                        gxd[s + ch] += t * gd[o + ch];
                    }
                }
            }
        }
    }
    gx
}
