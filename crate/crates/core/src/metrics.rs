//! Image-quality metrics. Inputs are colors in `[-0.5, 0.5]`; every metric
//! works on the `[0, 1]` rescaling.

use diffcore::{Graph, Kernel};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

/// Cap for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const LOWPASS_SIZE: usize = 21;
pub const LOWPASS_SIGMA: f64 = 3.5;
const SSIM_SIZE: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub psnr_lf: f64,
    pub ssim: f64,
    pub valid_fraction: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "scene_id,frame_id,mae,rmse,psnr,psnr_lf,ssim";

    pub fn csv_row(&self, scene_id: &str, frame_id: &str) -> String {
        format!(
            "{scene_id},{frame_id},{:.6},{:.6},{:.4},{:.4},{:.6}",
            self.mae, self.rmse, self.psnr, self.psnr_lf, self.ssim
        )
    }
}

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid("images differ in shape"));
    }
    Ok(())
}

fn check_mask(a: &Image, mask: Option<&Image>) -> Result<()> {
    if let Some(m) = mask {
        if m.height() != a.height() || m.width() != a.width() || m.channels() != 1 {
            return Err(Error::invalid("mask must be single-channel and match the image"));
        }
    }
    Ok(())
}

/// Per-pixel errors `a - b` over pixels where `mask > 0.5` (all if `None`).
fn diffs<'a>(a: &'a Image, b: &'a Image, mask: Option<&'a Image>) -> impl Iterator<Item = f64> + 'a {
    let c = a.channels();
    a.data()
        .iter()
        .zip(b.data())
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m.data()[i / c] > 0.5))
        .map(|(_, (x, y))| x - y)
}

fn mean_of(it: impl Iterator<Item = f64>) -> Result<f64> {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        return Err(Error::NoValidPixels);
    }
    Ok(diffcore::pairwise_sum(&v) / v.len() as f64)
}

pub fn mae(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    check(a, b)?;
    check_mask(a, mask)?;
    mean_of(diffs(a, b, mask).map(f64::abs))
}

pub fn mse(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    check(a, b)?;
    check_mask(a, mask)?;
    mean_of(diffs(a, b, mask).map(|d| d * d))
}

pub fn rmse(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    Ok(mse(a, b, mask)?.sqrt())
}

fn psnr_from_mse(m: f64) -> f64 {
    if m < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, mask)?))
}

fn filter(img: &Image, kernel: &Kernel) -> Result<Image> {
    let mut g = Graph::new();
    let x = g.constant(img.tensor().clone());
    let y = g.conv2d_fixed(x, kernel)?;
    Image::from_tensor(g.value(y).clone())
}

/// Gaussian low-pass used by [`psnr_lf`].
pub fn lowpass(img: &Image, sigma: f64) -> Result<Image> {
    filter(img, &Kernel::gaussian(LOWPASS_SIZE, sigma)?)
}

/// PSNR of both images after a 21x21 Gaussian low-pass.
pub fn psnr_lf(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    psnr_lf_sigma(a, b, mask, LOWPASS_SIGMA)
}

pub fn psnr_lf_sigma(a: &Image, b: &Image, mask: Option<&Image>, sigma: f64) -> Result<f64> {
    check(a, b)?;
    psnr(&lowpass(a, sigma)?, &lowpass(b, sigma)?, mask)
}

/// Mean local SSIM on channel-mean luminance.
pub fn ssim(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    check(a, b)?;
    check_mask(a, mask)?;
    let k = Kernel::gaussian(SSIM_SIZE, SSIM_SIGMA)?;
    let la = a.luminance().map(|v| v + 0.5);
    let lb = b.luminance().map(|v| v + 0.5);
    let prod = |x: &Image, y: &Image| {
        Image::from_fn(x.height(), x.width(), 1, |u, v, _| x.get(u, v, 0) * y.get(u, v, 0))
    };
    let mu_a = filter(&la, &k)?;
    let mu_b = filter(&lb, &k)?;
    let saa = filter(&prod(&la, &la), &k)?;
    let sbb = filter(&prod(&lb, &lb), &k)?;
    let sab = filter(&prod(&la, &lb), &k)?;
    let map: Vec<f64> = (0..la.pixels())
        .filter(|&i| mask.is_none_or(|m| m.data()[i] > 0.5))
        .map(|i| {
            let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
            let va = saa.data()[i] - ma * ma;
            let vb = sbb.data()[i] - mb * mb;
            let cov = sab.data()[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .collect();
    mean_of(map.into_iter())
}

/// Every metric at once; `valid_fraction` is the share of pixels in `mask`.
pub fn report(a: &Image, b: &Image, mask: Option<&Image>) -> Result<MetricReport> {
    check_mask(a, mask)?;
    let valid_fraction = match mask {
        None => 1.0,
        Some(m) => m.data().iter().filter(|&&v| v > 0.5).count() as f64 / m.pixels() as f64,
    };
    let shifted_a = a.map(|v| v + 0.5);
    let shifted_b = b.map(|v| v + 0.5);
    Ok(MetricReport {
        mae: mae(&shifted_a, &shifted_b, mask)?,
        rmse: rmse(&shifted_a, &shifted_b, mask)?,
        psnr: psnr(&shifted_a, &shifted_b, mask)?,
        psnr_lf: psnr_lf(&shifted_a, &shifted_b, mask)?,
        ssim: ssim(a, b, mask)?,
        valid_fraction,
    })
}
