use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tomo::{AngleMask, Sinogram};

/// Fill the missing rows of `mu` by linear interpolation, per detector bin,
/// between the nearest kept rows on either side in angle. When the scan
/// covers a half turn the search wraps, and a row reached across the
/// 180 degree seam is read with its detector axis reversed.
pub fn low_fidelity_inpaint(mu: &Sinogram, mask: &AngleMask) -> Result<Sinogram> {
    mask.check_geometry(mu)?;
    let m = mu.geometry.num_angles;
    let bins = mu.geometry.detector_bins;
    if !mask.kept.iter().any(|&k| k) {
        return Err(Error::invalid("mask keeps no rows; nothing to interpolate from"));
    }
    let half_turn = (mu.geometry.coverage_deg() - 180.0).abs() < 1e-6;
    let mut out = mu.values.clone();

    // Nearest kept row walking in `dir`; returns (row, distance, flipped).
    let find = |i: usize, dir: isize| -> Option<(usize, usize, bool)> {
        for d in 1..=m {
            let raw = i as isize + dir * d as isize;
            if (0..m as isize).contains(&raw) {
                if mask.kept[raw as usize] {
                    return Some((raw as usize, d, false));
                }
            } else if half_turn {
                let r = raw.rem_euclid(m as isize) as usize;
                if mask.kept[r] {
                    return Some((r, d, true));
                }
            } else {
                return None;
            }
        }
        None
    };
    let read = |row: usize, flipped: bool, j: usize| {
        if flipped {
            mu.values[[row, bins - 1 - j]]
        } else {
            mu.values[[row, j]]
        }
    };

    for i in (0..m).filter(|&i| !mask.kept[i]) {
        match (find(i, -1), find(i, 1)) {
            (Some((p, dp, fp)), Some((q, dq, fq))) => {
                let w = dp as f64 / (dp + dq) as f64;
                for j in 0..bins {
                    out[[i, j]] = (1.0 - w) * read(p, fp, j) + w * read(q, fq, j);
                }
            }
            (Some((r, _, f)), None) | (None, Some((r, _, f))) => {
                for j in 0..bins {
                    out[[i, j]] = read(r, f, j);
                }
            }
            (None, None) => unreachable!("at least one row is kept"),
        }
    }
    Ok(mu.with_values(out))
}

/// `y + (I - M) x0_hat`: observed rows are copied from `y`, the rest come
/// from the restoration.
pub fn rectify_rnsd(x0_hat: &Sinogram, y: &Sinogram, mask: &AngleMask) -> Result<Sinogram> {
    mask.check_geometry(x0_hat)?;
    mask.check_geometry(y)?;
    x0_hat.check_same_shape(y)?;
    let mut out = Array2::zeros(y.values.dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let src = if mask.kept[i] { y.values.row(i) } else { x0_hat.values.row(i) };
        row.assign(&src);
    }
    Ok(y.with_values(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tomo::{apply_mask, radon_forward, Image, ScanGeometry};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_sino(geo: &ScanGeometry, seed: u64) -> Sinogram {
        let mut r = rng::stream(seed, 0);
        Sinogram::new(
            geo.clone(),
            Array2::from_shape_fn((geo.num_angles, geo.detector_bins), |_| r.random::<f64>()),
        )
        .unwrap()
    }

    #[test]
    fn full_mask_is_identity() {
        let geo = ScanGeometry::new(30, 6.0, 24, 1.0).unwrap();
        let s = random_sino(&geo, 1);
        let out = low_fidelity_inpaint(&s, &AngleMask::keep_all(&geo)).unwrap();
        assert_eq!(out.values, s.values);
    }

    #[test]
    fn single_gap_between_equal_rows_takes_their_value() {
        let geo = ScanGeometry::new(10, 10.0, 8, 1.0).unwrap();
        let mut kept = vec![true; 10];
        kept[4] = false;
        let mask = AngleMask::from_kept(&geo, kept).unwrap();
        let mut s = random_sino(&geo, 2);
        let row3 = s.values.row(3).to_owned();
        s.values.row_mut(5).assign(&row3);
        let out = low_fidelity_inpaint(&apply_mask(&s, &mask).unwrap(), &mask).unwrap();
        assert_eq!(out.values.row(4), row3);
    }

    #[test]
    fn kept_rows_are_untouched_and_gap_is_between_neighbours() {
        let geo = ScanGeometry::new(36, 5.0, 16, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 60.0, Some(40.0)).unwrap();
        let mu = apply_mask(&random_sino(&geo, 3), &mask).unwrap();
        let out = low_fidelity_inpaint(&mu, &mask).unwrap();
        for i in 0..36 {
            if mask.kept[i] {
                assert_eq!(out.values.row(i), mu.values.row(i));
            }
        }
        // Rows 8..20 are missing; 7 and 20 bound them without wrapping.
        for j in 0..16 {
            let (lo, hi) = (mu.values[[7, j]], mu.values[[20, j]]);
            let mid = out.values[[13, j]];
            assert!(mid >= lo.min(hi) - 1e-12 && mid <= lo.max(hi) + 1e-12);
            let expect = lo + (hi - lo) * 6.0 / 13.0;
            assert!((mid - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn wraps_with_detector_flip_on_half_turn() {
        // The projection at 180 degrees is the 0-degree row mirrored, so a
        // trailing wedge interpolates toward the mirrored first row.
        let geo = ScanGeometry::new(12, 15.0, 6, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 30.0, None).unwrap();
        assert_eq!(mask.kept, [true, true, true, true, true, true, true, true, true, true, false, false]);
        let s = random_sino(&geo, 4);
        let mu = apply_mask(&s, &mask).unwrap();
        let out = low_fidelity_inpaint(&mu, &mask).unwrap();
        for j in 0..6 {
            let before = s.values[[9, j]];
            let after = s.values[[0, 5 - j]];
            assert!((out.values[[10, j]] - (before * 2.0 / 3.0 + after / 3.0)).abs() < 1e-12);
            assert!((out.values[[11, j]] - (before / 3.0 + after * 2.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn no_wrap_below_half_turn_extends_nearest_row() {
        let geo = ScanGeometry::new(10, 10.0, 4, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 20.0, None).unwrap();
        let s = random_sino(&geo, 5);
        let out = low_fidelity_inpaint(&apply_mask(&s, &mask).unwrap(), &mask).unwrap();
        assert_eq!(out.values.row(8), s.values.row(7));
        assert_eq!(out.values.row(9), s.values.row(7));
    }

    #[test]
    fn rejects_mask_with_no_kept_rows() {
        let geo = ScanGeometry::new(4, 10.0, 4, 1.0).unwrap();
        let mask = AngleMask { kept: vec![false; 4], ..AngleMask::keep_all(&geo) };
        assert!(low_fidelity_inpaint(&Sinogram::zeros(&geo), &mask).is_err());
    }

    #[test]
    fn interpolation_beats_zero_fill_on_smooth_phantom() {
        let size = 64;
        let geo = ScanGeometry::new(90, 2.0, 92, 1.0).unwrap();
        let c = (size as f64 - 1.0) / 2.0;
        let smooth = Image::new(Array2::from_shape_fn((size, size), |(r, col)| {
            let (y, x) = (r as f64 - c, col as f64 - c);
            (-(x - 6.0).powi(2) / 120.0 - (y + 4.0).powi(2) / 60.0).exp()
        }))
        .unwrap();
        let truth = radon_forward(&smooth, &geo).unwrap();
        let mask = AngleMask::wedge(&geo, 60.0, None).unwrap();
        let mu = apply_mask(&truth, &mask).unwrap();
        let filled = low_fidelity_inpaint(&mu, &mask).unwrap();
        let peak = truth.values.iter().cloned().fold(0.0, f64::max);
        let psnr = |s: &Sinogram| {
            let mse = s.values.iter().zip(truth.values.iter()).map(|(a, b)| ((a - b) / peak).powi(2)).sum::<f64>()
                / s.values.len() as f64;
            -10.0 * mse.log10()
        };
        let (p_fill, p_zero) = (psnr(&filled), psnr(&mu));
        assert!(p_fill > p_zero + 3.0, "{p_fill} vs {p_zero}");
    }

    #[test]
    fn rectification_copies_observed_rows() {
        let geo = ScanGeometry::new(20, 9.0, 10, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 45.0, Some(90.0)).unwrap();
        let y = apply_mask(&random_sino(&geo, 6), &mask).unwrap();
        let x = random_sino(&geo, 7);
        let r = rectify_rnsd(&x, &y, &mask).unwrap();
        assert_eq!(apply_mask(&r, &mask).unwrap().values, y.values);
        for i in 0..20 {
            let want = if mask.kept[i] { y.values.row(i) } else { x.values.row(i) };
            assert_eq!(r.values.row(i), want);
        }
        let other = ScanGeometry::new(20, 9.0, 12, 1.0).unwrap();
        assert!(rectify_rnsd(&random_sino(&other, 1), &y, &mask).is_err());
    }

    proptest! {
        #[test]
        fn rectification_is_a_projection(seed in 0u64..1000, start in 0usize..20, missing in 1usize..19) {
            let geo = ScanGeometry::new(20, 9.0, 6, 1.0).unwrap();
            let mask = AngleMask::wedge(&geo, missing as f64 * 9.0, Some(start as f64 * 9.0)).unwrap();
            let y = apply_mask(&random_sino(&geo, seed), &mask).unwrap();
            let x = random_sino(&geo, seed + 1);
            let once = rectify_rnsd(&x, &y, &mask).unwrap();
            let twice = rectify_rnsd(&once, &y, &mask).unwrap();
            prop_assert_eq!(&once.values, &twice.values);
            // Consistent input is a fixed point.
            prop_assert_eq!(rectify_rnsd(&once, &y, &mask).unwrap().values, once.values);
        }
    }
}
