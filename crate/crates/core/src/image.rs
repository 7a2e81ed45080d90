use diffcore::Tensor;

use crate::error::{Error, Result};

/// Dense `H x W x C` raster stored row-major. Colors live in `[-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image {
            tensor: Tensor::zeros(&[height, width, channels]),
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            tensor: Tensor::full(&[height, width, channels], value),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Image::new(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(x, y, c, f(x, y, c));
                }
            }
        }
        img
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 3 {
            return Err(Error::invalid(format!(
                "image tensor must be [H, W, C], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Image { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.tensor.data()[(y * self.width() + x) * self.channels() + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let (w, ch) = (self.width(), self.channels());
        self.tensor.data_mut()[(y * w + x) * ch + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.tensor.shape() == other.tensor.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            tensor: self.tensor.map(f),
        }
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self) -> Image {
        let c = self.channels();
        Image::from_fn(self.height(), self.width(), 1, |x, y, _| {
            (0..c).map(|ch| self.get(x, y, ch)).sum::<f64>() / c as f64
        })
    }

    /// Clamp colors to the displayable range.
    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(-0.5, 0.5))
    }

    /// 2x2 box downsampling (odd trailing rows/columns are dropped).
    pub fn downsample2(&self) -> Image {
        let (h, w, c) = (self.height() / 2, self.width() / 2, self.channels());
        Image::from_fn(h, w, c, |x, y, ch| {
            0.25 * (self.get(2 * x, 2 * y, ch)
                + self.get(2 * x + 1, 2 * y, ch)
                + self.get(2 * x, 2 * y + 1, ch)
                + self.get(2 * x + 1, 2 * y + 1, ch))
        })
    }
}
