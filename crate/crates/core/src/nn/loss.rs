//! Pixel and gradient-domain losses.
//!
//! `perceptual_proxy` is `MSE(a, b) + gamma * MSE(grad a, grad b)` with
//! forward differences along both axes. It is symmetric, vanishes only at
//! `a == b`, and is blind to constant offsets in its gradient term, which
//! makes it edge-sensitive without any pretrained features.

use ndarray::{Array2, ArrayView2};

pub const DEFAULT_PROXY_GAMMA: f64 = 0.5;

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mse operands differ in shape");
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// d mse / d a.
pub fn mse_grad(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = a.len() as f64;
    (&a - &b) * (2.0 / n)
}

pub fn perceptual_proxy(a: ArrayView2<f64>, b: ArrayView2<f64>, gamma: f64) -> f64 {
    assert_eq!(a.dim(), b.dim(), "proxy operands differ in shape");
    let (h, w) = a.dim();
    let d = &a - &b;
    let mut pix = 0.0;
    let mut gx = 0.0;
    let mut gy = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = d[[r, c]];
            pix += v * v;
            if c + 1 < w {
                let e = d[[r, c + 1]] - v;
                gx += e * e;
            }
            if r + 1 < h {
                let e = d[[r + 1, c]] - v;
                gy += e * e;
            }
        }
    }
    let mut total = pix / (h * w) as f64;
    if w > 1 {
        total += gamma * gx / (h * (w - 1)) as f64;
    }
    if h > 1 {
        total += gamma * gy / ((h - 1) * w) as f64;
    }
    total
}

/// d proxy / d a.
pub fn perceptual_proxy_grad(a: ArrayView2<f64>, b: ArrayView2<f64>, gamma: f64) -> Array2<f64> {
    let (h, w) = a.dim();
    let d = &a - &b;
    let mut g = &d * (2.0 / (h * w) as f64);
    let kx = if w > 1 { 2.0 * gamma / (h * (w - 1)) as f64 } else { 0.0 };
    let ky = if h > 1 { 2.0 * gamma / ((h - 1) * w) as f64 } else { 0.0 };
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                let e = kx * (d[[r, c + 1]] - d[[r, c]]);
                g[[r, c + 1]] += e;
                g[[r, c]] -= e;
            }
            if r + 1 < h {
                let e = ky * (d[[r + 1, c]] - d[[r, c]]);
                g[[r + 1, c]] += e;
                g[[r, c]] -= e;
            }
        }
    }
    g
}
