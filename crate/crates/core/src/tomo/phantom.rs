//! Synthetic test objects.

use ndarray::Array2;
use rand::Rng;

use super::Image;
use crate::rng;

struct Ellipse {
    intensity: f64,
    semi_x: f64,
    semi_y: f64,
    centre_x: f64,
    centre_y: f64,
    angle_deg: f64,
}

// Ten-ellipse head phantom, contrast-enhanced intensities (unit skull,
// 0.2 brain) so the interior structure survives a [0,1] rescale.
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Rasterise ellipses given in normalised coordinates ([-1, 1]^2, y up).
fn rasterise(size: usize, ellipses: &[Ellipse]) -> Array2<f64> {
    let half = size as f64 / 2.0;
    let c = (size as f64 - 1.0) / 2.0;
    let mut out = Array2::zeros((size, size));
    for e in ellipses {
        let (s, co) = e.angle_deg.to_radians().sin_cos();
        for ((r, col), v) in out.indexed_iter_mut() {
            let x = (col as f64 - c) / half - e.centre_x;
            let y = (c - r as f64) / half - e.centre_y;
            let u = x * co + y * s;
            let w = -x * s + y * co;
            if (u / e.semi_x).powi(2) + (w / e.semi_y).powi(2) <= 1.0 {
                *v += e.intensity;
            }
        }
    }
    out
}

/// Min-max rescale to [0, 1]; a constant image maps to zeros.
fn rescale(values: &mut Array2<f64>) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        values.mapv_inplace(|v| (v - lo) / span);
    } else {
        values.fill(0.0);
    }
}

pub fn shepp_logan(size: usize) -> Image {
    let ellipses: Vec<Ellipse> = SHEPP_LOGAN
        .iter()
        .map(|&(intensity, semi_x, semi_y, centre_x, centre_y, angle_deg)| Ellipse {
            intensity,
            semi_x,
            semi_y,
            centre_x,
            centre_y,
            angle_deg,
        })
        .collect();
    let mut values = rasterise(size, &ellipses);
    rescale(&mut values);
    Image { values }
}

/// 5 to 12 random ellipses with centres inside radius 0.8 (normalised),
/// signed intensities in [-0.5, 1], summed then clipped to [0, 1].
/// Everything outside the inscribed circle is zero.
pub fn random_ellipse_phantom(size: usize, seed: u64) -> Image {
    let mut rng = rng::stream(seed, 0x5048_414e);
    let count = rng.random_range(5..=12);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let radius = 0.8 * rng.random::<f64>().sqrt();
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            Ellipse {
                intensity: rng.random_range(-0.5..=1.0),
                semi_x: rng.random_range(0.05..0.45),
                semi_y: rng.random_range(0.05..0.45),
                centre_x: radius * phi.cos(),
                centre_y: radius * phi.sin(),
                angle_deg: rng.random_range(0.0..180.0),
            }
        })
        .collect();
    let mut values = rasterise(size, &ellipses);
    let inside = Image::inscribed_circle_mask(size);
    values.zip_mut_with(&inside, |v, &keep| *v = if keep { v.clamp(0.0, 1.0) } else { 0.0 });
    Image { values }
}
