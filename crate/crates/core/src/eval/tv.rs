//! Total-variation reconstruction by the first-order primal-dual method.
//!
//! Solves `min_x 1/2 |M R x - y|^2 + lambda TV(x)` over `x in [0, 1]^n`, with
//! `K = [M R; c grad]` and `c = |M R| / sqrt(8)` so both blocks have
//! comparable norms. The box keeps the duality gap finite.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::tomo::{apply_mask, backproject, radon_forward, AngleMask, Image, Sinogram};

const POWER_ITERATIONS: usize = 50;
const CHECK_EVERY: usize = 10;
const RISING_CHECKS: usize = 10;

pub const DEFAULT_TV_ITERATIONS: usize = 500;
pub const DEFAULT_TV_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvCheckpoint {
    pub iteration: usize,
    /// Primal objective of the ergodic average.
    pub objective: f64,
    /// `|M R x - y|` of the ergodic average.
    pub residual: f64,
    pub gap: f64,
}

#[derive(Clone, Debug)]
pub struct TvResult {
    pub image: Image,
    pub checkpoints: Vec<TvCheckpoint>,
    /// Set when the gap rose at ten consecutive checks.
    pub non_convergent: bool,
}

/// Forward differences, zero across the far edge.
fn gradient(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let gy = Array2::from_shape_fn((h, w), |(r, c)| if r + 1 < h { x[[r + 1, c]] - x[[r, c]] } else { 0.0 });
    let gx = Array2::from_shape_fn((h, w), |(r, c)| if c + 1 < w { x[[r, c + 1]] - x[[r, c]] } else { 0.0 });
    (gy, gx)
}

/// Transpose of [`gradient`].
fn gradient_t(gy: &Array2<f64>, gx: &Array2<f64>) -> Array2<f64> {
    let (h, w) = gy.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut v = 0.0;
        if r + 1 < h {
            v -= gy[[r, c]];
        }
        if r > 0 {
            v += gy[[r - 1, c]];
        }
        if c + 1 < w {
            v -= gx[[r, c]];
        }
        if c > 0 {
            v += gx[[r, c - 1]];
        }
        v
    })
}

fn total_variation(x: &Array2<f64>) -> f64 {
    let (gy, gx) = gradient(x);
    Zip::from(&gy).and(&gx).fold(0.0, |acc, a, b| acc + (a * a + b * b).sqrt())
}

struct Operator<'a> {
    mask: &'a AngleMask,
    size: usize,
}

impl Operator<'_> {
    fn forward(&self, x: &Array2<f64>) -> Result<Sinogram> {
        let s = radon_forward(&Image { values: x.clone() }, &self.mask.geometry)?;
        apply_mask(&s, self.mask)
    }

    fn adjoint(&self, s: &Sinogram) -> Result<Array2<f64>> {
        Ok(backproject(&apply_mask(s, self.mask)?, self.size)?.values)
    }
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Power iteration for the largest singular value of `x -> (A x, c grad x)`.
fn operator_norm(op: &Operator, c: f64) -> Result<f64> {
    let n = op.size;
    // Deterministic, non-symmetric start vector.
    let mut x = Array2::from_shape_fn((n, n), |(r, col)| 1.0 + ((r * 31 + col * 17) % 13) as f64 / 13.0);
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let nx = norm(&x);
        x /= nx;
        let p = op.forward(&x)?;
        let (gy, gx) = gradient(&x);
        let mut next = op.adjoint(&p)?;
        if c > 0.0 {
            next.scaled_add(c * c, &gradient_t(&gy, &gx));
        }
        sigma = norm(&next).sqrt();
        x = next;
    }
    Ok(sigma)
}

pub fn tv_reconstruct(y: &Sinogram, mask: &AngleMask, size: usize, lambda_tv: f64, iters: usize) -> Result<TvResult> {
    mask.check_geometry(y)?;
    if !(lambda_tv >= 0.0 && lambda_tv.is_finite()) {
        return Err(Error::invalid(format!("lambda_tv = {lambda_tv} must be a non-negative number")));
    }
    if iters == 0 {
        return Err(Error::invalid("tv_reconstruct needs at least one iteration"));
    }
    let op = Operator { mask, size };
    let y = apply_mask(y, mask)?;
    let c = operator_norm(&op, 0.0)? / 8f64.sqrt();
    let k = operator_norm(&op, c)?;
    let tau = 0.99 / k;
    let sigma = 0.99 / k;
    // TV(x) = |grad x|_{2,1} = |c grad x|_{2,1} / c, so the dual ball has radius lambda / c.
    let radius = lambda_tv / c;

    let mut x = Array2::<f64>::zeros((size, size));
    let mut x_bar = x.clone();
    let mut p = Sinogram::zeros(&y.geometry);
    let (mut qy, mut qx) = (x.clone(), x.clone());
    let mut x_sum = x.clone();
    let mut p_sum = p.values.clone();
    let (mut qy_sum, mut qx_sum) = (x.clone(), x.clone());

    let mut checkpoints = Vec::new();
    let mut rising = 0usize;
    let mut non_convergent = false;
    for it in 1..=iters {
        // Dual ascent on the data block: prox of 1/2 |u - y|^2 conjugate.
        let ax = op.forward(&x_bar)?;
        Zip::from(&mut p.values)
            .and(&ax.values)
            .and(&y.values)
            .for_each(|p, &a, &yv| *p = (*p + sigma * (a - yv)) / (1.0 + sigma));
        // Dual ascent on the gradient block: projection onto the lambda / c ball.
        let (gy, gx) = gradient(&x_bar);
        Zip::from(&mut qy).and(&mut qx).and(&gy).and(&gx).for_each(|qy, qx, &a, &b| {
            let (uy, ux) = (*qy + sigma * c * a, *qx + sigma * c * b);
            let m = (uy * uy + ux * ux).sqrt();
            let s = if m > radius { radius / m } else { 1.0 };
            *qy = uy * s;
            *qx = ux * s;
        });
        let mut kt = op.adjoint(&p)?;
        kt.scaled_add(c, &gradient_t(&qy, &qx));
        let prev = x.clone();
        Zip::from(&mut x).and(&kt).for_each(|x, &g| *x = (*x - tau * g).clamp(0.0, 1.0));
        Zip::from(&mut x_bar).and(&x).and(&prev).for_each(|b, &x, &x0| *b = 2.0 * x - x0);

        x_sum += &x;
        p_sum += &p.values;
        qy_sum += &qy;
        qx_sum += &qx;
        if it % CHECK_EVERY == 0 || it == iters {
            let inv = 1.0 / it as f64;
            let xa = &x_sum * inv;
            let pa = y.with_values(&p_sum * inv);
            let (qya, qxa) = (&qy_sum * inv, &qx_sum * inv);
            let r = &op.forward(&xa)?.values - &y.values;
            let residual = norm(&r);
            let objective = 0.5 * residual * residual + lambda_tv * total_variation(&xa);
            // Dual value: -F*(z) - G*(-K^T z), with G the box indicator.
            let f_star = 0.5 * pa.values.iter().map(|v| v * v).sum::<f64>()
                + Zip::from(&pa.values).and(&y.values).fold(0.0, |acc, a, b| acc + a * b);
            let mut kta = op.adjoint(&pa)?;
            kta.scaled_add(c, &gradient_t(&qya, &qxa));
            let g_star: f64 = kta.iter().map(|v| (-v).max(0.0)).sum();
            let gap = objective + f_star + g_star;
            if let Some(last) = checkpoints.last() {
                let last: &TvCheckpoint = last;
                rising = if gap > last.gap { rising + 1 } else { 0 };
                if rising >= RISING_CHECKS {
                    non_convergent = true;
                }
            }
            checkpoints.push(TvCheckpoint { iteration: it, objective, residual, gap });
        }
    }
    if non_convergent {
        log::warn!("TV reconstruction: duality gap rose at {RISING_CHECKS} consecutive checks");
    }
    Ok(TvResult { image: Image { values: x }, checkpoints, non_convergent })
}
