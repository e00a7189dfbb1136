//! Joseph-style projector. Each ray is walked along its driving axis (the
//! image axis it is most aligned with); at every step the two neighbouring
//! pixels on the other axis are linearly interpolated. The back-projector
//! scatters through exactly the same stencil, so the pair is matched.

use ndarray::Array2;
use rayon::prelude::*;

use super::{Image, ScanGeometry, Sinogram};
use crate::error::{Error, Result};

/// Visit every (pixel, weight) tap on the ray through detector offset `t`
/// at direction angle with cosine `cos` and sine `sin`.
#[inline]
fn for_each_tap(size: usize, cos: f64, sin: f64, t: f64, mut tap: impl FnMut(usize, f64)) {
    let n = size as isize;
    let centre = (size as f64 - 1.0) / 2.0;
    if cos.abs() >= sin.abs() {
        // Drive over rows: x = (t - y sin) / cos.
        let step = 1.0 / cos.abs();
        for r in 0..size {
            let y = r as f64 - centre;
            let col = (t - y * sin) / cos + centre;
            let c0 = col.floor();
            let w = col - c0;
            let k = c0 as isize;
            if k >= 0 && k < n {
                tap(r * size + k as usize, (1.0 - w) * step);
            }
            if k + 1 >= 0 && k + 1 < n {
                tap(r * size + (k + 1) as usize, w * step);
            }
        }
    } else {
        // Drive over columns: y = (t - x cos) / sin.
        let step = 1.0 / sin.abs();
        for c in 0..size {
            let x = c as f64 - centre;
            let row = (t - x * cos) / sin + centre;
            let r0 = row.floor();
            let w = row - r0;
            let k = r0 as isize;
            if k >= 0 && k < n {
                tap(k as usize * size + c, (1.0 - w) * step);
            }
            if k + 1 >= 0 && k + 1 < n {
                tap((k + 1) as usize * size + c, w * step);
            }
        }
    }
}

pub fn radon_forward(img: &Image, geo: &ScanGeometry) -> Result<Sinogram> {
    geo.validate()?;
    let size = img.size();
    geo.check_image_size(size)?;
    let pixels = img
        .values
        .as_slice()
        .ok_or_else(|| Error::shape("image storage must be contiguous"))?;
    let bins = geo.detector_bins;
    let mut out = vec![0.0; geo.num_angles * bins];
    out.par_chunks_mut(bins).enumerate().for_each(|(i, row)| {
        let theta = geo.angle_rad(i);
        let (sin, cos) = theta.sin_cos();
        for (j, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for_each_tap(size, cos, sin, geo.detector_offset(j), |p, w| acc += w * pixels[p]);
            *cell = acc;
        }
    });
    let values = Array2::from_shape_vec((geo.num_angles, bins), out).expect("row-major shape");
    Ok(Sinogram { geometry: geo.clone(), values })
}

/// Exact transpose of [`radon_forward`] onto a `size` x `size` grid.
pub fn backproject(sino: &Sinogram, size: usize) -> Result<Image> {
    let geo = &sino.geometry;
    geo.validate()?;
    geo.check_image_size(size)?;
    if sino.values.dim() != (geo.num_angles, geo.detector_bins) {
        return Err(Error::shape("sinogram values do not match its geometry"));
    }
    let mut out = vec![0.0; size * size];
    for i in 0..geo.num_angles {
        let (sin, cos) = geo.angle_rad(i).sin_cos();
        for j in 0..geo.detector_bins {
            let s = sino.values[[i, j]];
            if s == 0.0 {
                continue;
            }
            for_each_tap(size, cos, sin, geo.detector_offset(j), |p, w| out[p] += w * s);
        }
    }
    Ok(Image { values: Array2::from_shape_vec((size, size), out).expect("square shape") })
}
