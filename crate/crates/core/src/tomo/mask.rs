use super::{ScanGeometry, Sinogram};
use crate::error::{Error, Result};

/// Limited-angle degradation: one contiguous (possibly wrapping) block of
/// angle rows is missing. As an inpainting operator it is a diagonal 0/1
/// projection, so its pseudo-inverse is itself.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleMask {
    pub geometry: ScanGeometry,
    pub kept: Vec<bool>,
    pub missing_start_deg: f64,
    pub missing_deg: f64,
}

fn whole_rows(deg: f64, step: f64, what: &str) -> Result<usize> {
    let rows = deg / step;
    let rounded = rows.round();
    if (rows - rounded).abs() > 1e-6 || rounded < 0.0 {
        return Err(Error::invalid(format!(
            "{what} {deg} deg is not a whole number of {step} deg angle steps"
        )));
    }
    Ok(rounded as usize)
}

impl AngleMask {
    /// Missing block `[start, start + missing_deg)`, wrapping modulo the
    /// coverage. `start = None` selects the trailing block.
    pub fn wedge(geo: &ScanGeometry, missing_deg: f64, start_deg: Option<f64>) -> Result<Self> {
        geo.validate()?;
        let coverage = geo.coverage_deg();
        if !(missing_deg > 0.0 && missing_deg < coverage) {
            return Err(Error::invalid(format!(
                "missing wedge {missing_deg} deg must lie strictly between 0 and the coverage {coverage} deg"
            )));
        }
        let start = start_deg.unwrap_or(coverage - missing_deg);
        if !(0.0..coverage).contains(&start) {
            return Err(Error::invalid(format!("wedge start {start} deg outside [0, {coverage})")));
        }
        let count = whole_rows(missing_deg, geo.angle_step_deg, "missing wedge")?;
        let first = whole_rows(start, geo.angle_step_deg, "wedge start")?;
        let mut kept = vec![true; geo.num_angles];
        for k in 0..count {
            kept[(first + k) % geo.num_angles] = false;
        }
        Ok(AngleMask { geometry: geo.clone(), kept, missing_start_deg: start, missing_deg })
    }

    pub fn keep_all(geo: &ScanGeometry) -> Self {
        AngleMask {
            geometry: geo.clone(),
            kept: vec![true; geo.num_angles],
            missing_start_deg: 0.0,
            missing_deg: 0.0,
        }
    }

    /// Rebuild from a per-row flag vector; the missing rows must form one
    /// circular run.
    pub fn from_kept(geo: &ScanGeometry, kept: Vec<bool>) -> Result<Self> {
        if kept.len() != geo.num_angles {
            return Err(Error::shape(format!(
                "mask has {} rows, geometry has {} angles",
                kept.len(),
                geo.num_angles
            )));
        }
        let missing = kept.iter().filter(|k| !**k).count();
        if missing == 0 {
            return Ok(Self::keep_all(geo));
        }
        if missing == kept.len() {
            return Err(Error::invalid("mask keeps no angle rows"));
        }
        // Start of the run: a missing row whose predecessor is kept.
        let n = kept.len();
        let starts: Vec<usize> = (0..n).filter(|&i| !kept[i] && kept[(i + n - 1) % n]).collect();
        if starts.len() != 1 {
            return Err(Error::invalid("missing rows do not form one contiguous block"));
        }
        Ok(AngleMask {
            geometry: geo.clone(),
            kept,
            missing_start_deg: starts[0] as f64 * geo.angle_step_deg,
            missing_deg: missing as f64 * geo.angle_step_deg,
        })
    }

    pub fn missing_rows(&self) -> usize {
        self.kept.iter().filter(|k| !**k).count()
    }

    pub fn check_geometry(&self, sino: &Sinogram) -> Result<()> {
        if self.geometry != sino.geometry || self.kept.len() != sino.values.nrows() {
            return Err(Error::shape("mask geometry does not match sinogram geometry"));
        }
        Ok(())
    }
}

/// Zero the missing rows; kept rows are copied verbatim.
pub fn apply_mask(sino: &Sinogram, mask: &AngleMask) -> Result<Sinogram> {
    mask.check_geometry(sino)?;
    let mut out = sino.clone();
    for (mut row, &keep) in out.values.rows_mut().into_iter().zip(&mask.kept) {
        if !keep {
            row.fill(0.0);
        }
    }
    Ok(out)
}

/// `(I - A)`: keep only the missing rows.
pub fn complement_mask(sino: &Sinogram, mask: &AngleMask) -> Result<Sinogram> {
    mask.check_geometry(sino)?;
    let mut out = sino.clone();
    for (mut row, &keep) in out.values.rows_mut().into_iter().zip(&mask.kept) {
        if keep {
            row.fill(0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn paper_scale_ninety_degree_wedge_zeroes_360_rows() {
        let geo = ScanGeometry::new(720, 0.25, 512, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 90.0, None).unwrap();
        assert_eq!(mask.missing_rows(), 360);
        assert!(mask.kept[..360].iter().all(|k| *k));
        assert!(mask.kept[360..].iter().all(|k| !*k));
        let sino = Sinogram { geometry: geo.clone(), values: Array2::ones((720, 512)) };
        let masked = apply_mask(&sino, &mask).unwrap();
        let zero_rows = masked.values.rows().into_iter().filter(|r| r.iter().all(|v| *v == 0.0)).count();
        assert_eq!(zero_rows, 360);
    }

    #[test]
    fn keep_all_is_identity() {
        let geo = ScanGeometry::new(12, 15.0, 20, 1.0).unwrap();
        let sino = Sinogram { geometry: geo.clone(), values: Array2::from_shape_fn((12, 20), |(i, j)| (i * 20 + j) as f64) };
        assert_eq!(apply_mask(&sino, &AngleMask::keep_all(&geo)).unwrap(), sino);
    }

    #[test]
    fn wedge_wraps_and_round_trips_through_flags() {
        let geo = ScanGeometry::new(18, 10.0, 20, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 40.0, Some(160.0)).unwrap();
        let missing: Vec<usize> = (0..18).filter(|&i| !mask.kept[i]).collect();
        assert_eq!(missing, vec![0, 1, 16, 17]);
        let back = AngleMask::from_kept(&geo, mask.kept.clone()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn rejects_bad_wedges() {
        let geo = ScanGeometry::new(18, 10.0, 20, 1.0).unwrap();
        assert!(AngleMask::wedge(&geo, 0.0, None).is_err());
        assert!(AngleMask::wedge(&geo, 180.0, None).is_err());
        assert!(AngleMask::wedge(&geo, 35.0, None).is_err());
        let mut kept = vec![true; 18];
        kept[2] = false;
        kept[5] = false;
        assert!(AngleMask::from_kept(&geo, kept).is_err());
        let other = ScanGeometry::new(9, 20.0, 20, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 60.0, None).unwrap();
        assert!(apply_mask(&Sinogram::zeros(&other), &mask).is_err());
    }

    proptest! {
        #[test]
        fn mask_is_an_exact_projection(seed in any::<u64>(), missing in 1usize..17, start in 0usize..18) {
            let geo = ScanGeometry::new(18, 10.0, 8, 1.0).unwrap();
            let mask = AngleMask::wedge(&geo, missing as f64 * 10.0, Some(start as f64 * 10.0)).unwrap();
            let mut rng = crate::rng::stream(seed, 0);
            let vals = Array2::from_shape_fn((18, 8), |_| crate::rng::standard_normal(&mut rng));
            let s = Sinogram { geometry: geo.clone(), values: vals };
            let once = apply_mask(&s, &mask).unwrap();
            let twice = apply_mask(&once, &mask).unwrap();
            prop_assert_eq!(&once, &twice);
            let annihilated = complement_mask(&once, &mask).unwrap();
            prop_assert!(annihilated.values.iter().all(|v| *v == 0.0));
            // Range + null-space parts recompose the original exactly.
            let null = complement_mask(&s, &mask).unwrap();
            prop_assert_eq!(&once.values + &null.values, s.values);
        }
    }
}
