//! Image quality metrics on [0, 1]-normalised images.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{perceptual_proxy, DEFAULT_PROXY_GAMMA};
use crate::tomo::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.values.dim() != b.values.dim() {
        return Err(Error::shape(format!("images differ: {:?} vs {:?}", a.values.dim(), b.values.dim())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let mse = crate::nn::mse(a.values.view(), b.values.view());
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// PSNR restricted to pixels where `mask` is true.
pub fn psnr_masked(a: &Image, b: &Image, mask: &Array2<bool>) -> Result<f64> {
    check_same(a, b)?;
    if mask.dim() != a.values.dim() {
        return Err(Error::shape("mask does not match image"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((x, y), m) in a.values.iter().zip(b.values.iter()).zip(mask.iter()) {
        if *m {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("mask selects no pixels"));
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Table form: infinite PSNR is capped.
pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid window positions only.
fn filter_valid(img: ArrayView2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            tmp[[r, c]] = (0..k).map(|i| win[i] * img[[r, c + i]]).sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..k).map(|i| win[i] * tmp[[r + i, c]]).sum::<f64>();
        }
    }
    out
}

/// Single-scale SSIM, dynamic range 1, mean over valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.values.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let win = gaussian_window();
    let x = a.values.view();
    let y = b.values.view();
    let mu_x = filter_valid(x, &win);
    let mu_y = filter_valid(y, &win);
    let xx = filter_valid((&x * &x).view(), &win);
    let yy = filter_valid((&y * &y).view(), &win);
    let xy = filter_valid((&x * &y).view(), &win);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x.as_slice().unwrap()[i], mu_y.as_slice().unwrap()[i]);
        let sx = xx.as_slice().unwrap()[i] - mx * mx;
        let sy = yy.as_slice().unwrap()[i] - my * my;
        let sxy = xy.as_slice().unwrap()[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Stand-in for a learned perceptual distance (lower is better).
pub fn proxy_distance(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    Ok(perceptual_proxy(a.values.view(), b.values.view(), DEFAULT_PROXY_GAMMA))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub proxy_perceptual: f64,
}

impl MetricReport {
    pub fn measure(estimate: &Image, truth: &Image) -> Result<Self> {
        Ok(MetricReport {
            psnr: cap_psnr(psnr(estimate, truth)?),
            ssim: ssim(estimate, truth)?,
            proxy_perceptual: proxy_distance(estimate, truth)?,
        })
    }

    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(MetricReport {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            proxy_perceptual: reports.iter().map(|r| r.proxy_perceptual).sum::<f64>() / n,
        })
    }
}
