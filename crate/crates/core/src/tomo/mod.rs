//! Parallel-beam tomography: image and sinogram containers, the matched
//! projector pair, filtered back-projection and the limited-angle mask.

mod fbp;
mod mask;
mod phantom;
mod projector;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use fbp::{fbp, ramp_filter_rows, Apodization};
pub use mask::{apply_mask, complement_mask, AngleMask};
pub use phantom::{random_ellipse_phantom, shepp_logan};
pub use projector::{backproject, radon_forward};

/// Smallest accepted image side length.
pub const MIN_IMAGE_SIZE: usize = 16;

/// Square attenuation image, row-major, `values[[row, col]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub values: Array2<f64>,
}

impl Image {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h != w {
            return Err(Error::shape(format!("image must be square, got {h}x{w}")));
        }
        if h < MIN_IMAGE_SIZE {
            return Err(Error::shape(format!("image size {h} below minimum {MIN_IMAGE_SIZE}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Image { values })
    }

    pub fn zeros(size: usize) -> Self {
        Image { values: Array2::zeros((size, size)) }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn clipped(&self) -> Image {
        Image { values: self.values.mapv(|v| v.clamp(0.0, 1.0)) }
    }

    /// Pixels whose centre lies inside the inscribed circle.
    pub fn inscribed_circle_mask(size: usize) -> Array2<bool> {
        let c = (size as f64 - 1.0) / 2.0;
        let r2 = (size as f64 / 2.0).powi(2);
        Array2::from_shape_fn((size, size), |(r, col)| {
            let dy = r as f64 - c;
            let dx = col as f64 - c;
            dx * dx + dy * dy <= r2
        })
    }
}

/// Parallel-beam scan description. Angle `i` sits at `i * angle_step_deg`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGeometry {
    pub num_angles: usize,
    pub angle_step_deg: f64,
    pub detector_bins: usize,
    pub detector_spacing: f64,
}

impl ScanGeometry {
    pub fn new(
        num_angles: usize,
        angle_step_deg: f64,
        detector_bins: usize,
        detector_spacing: f64,
    ) -> Result<Self> {
        let geo = ScanGeometry { num_angles, angle_step_deg, detector_bins, detector_spacing };
        geo.validate()?;
        Ok(geo)
    }

    /// 128x128 desk-scale default: 180 angles at 1 degree, 192 bins.
    pub fn desk_default() -> Self {
        ScanGeometry { num_angles: 180, angle_step_deg: 1.0, detector_bins: 192, detector_spacing: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_angles == 0 || self.detector_bins == 0 {
            return Err(Error::invalid("geometry needs at least one angle and one detector bin"));
        }
        if !(self.angle_step_deg > 0.0 && self.angle_step_deg.is_finite()) {
            return Err(Error::invalid(format!("angle step {} must be positive", self.angle_step_deg)));
        }
        if !(self.detector_spacing > 0.0 && self.detector_spacing.is_finite()) {
            return Err(Error::invalid(format!(
                "detector spacing {} must be positive",
                self.detector_spacing
            )));
        }
        if self.coverage_deg() > 180.0 + 1e-9 {
            return Err(Error::invalid(format!(
                "angular coverage {} deg exceeds a half rotation",
                self.coverage_deg()
            )));
        }
        Ok(())
    }

    /// Detector must span the image diagonal.
    pub fn check_image_size(&self, size: usize) -> Result<()> {
        let needed = (size as f64 * std::f64::consts::SQRT_2).ceil();
        let span = self.detector_bins as f64 * self.detector_spacing;
        if span + 1e-9 < needed {
            return Err(Error::shape(format!(
                "detector span {span} (bins {} x spacing {}) does not cover image diagonal {needed} for size {size}",
                self.detector_bins, self.detector_spacing
            )));
        }
        Ok(())
    }

    pub fn coverage_deg(&self) -> f64 {
        self.num_angles as f64 * self.angle_step_deg
    }

    pub fn angle_rad(&self, i: usize) -> f64 {
        (i as f64 * self.angle_step_deg).to_radians()
    }

    /// Signed detector coordinate of bin `j`, in pixel units.
    pub fn detector_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.detector_bins as f64 - 1.0) / 2.0) * self.detector_spacing
    }
}

/// Projection data, one row per angle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub geometry: ScanGeometry,
    pub values: Array2<f64>,
}

impl Sinogram {
    pub fn new(geometry: ScanGeometry, values: Array2<f64>) -> Result<Self> {
        let want = (geometry.num_angles, geometry.detector_bins);
        if values.dim() != want {
            return Err(Error::shape(format!(
                "sinogram shape {:?} does not match geometry {:?}",
                values.dim(),
                want
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sinogram contains non-finite values"));
        }
        Ok(Sinogram { geometry, values })
    }

    pub fn zeros(geometry: &ScanGeometry) -> Self {
        Sinogram {
            values: Array2::zeros((geometry.num_angles, geometry.detector_bins)),
            geometry: geometry.clone(),
        }
    }

    pub fn check_same_shape(&self, other: &Sinogram) -> Result<()> {
        if self.geometry != other.geometry || self.values.dim() != other.values.dim() {
            return Err(Error::shape(format!(
                "sinogram shapes differ: {:?} vs {:?}",
                self.values.dim(),
                other.values.dim()
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Sinogram {
        Sinogram { geometry: self.geometry.clone(), values: self.values.mapv(f) }
    }

    pub fn with_values(&self, values: Array2<f64>) -> Sinogram {
        debug_assert_eq!(values.dim(), self.values.dim());
        Sinogram { geometry: self.geometry.clone(), values }
    }
}
