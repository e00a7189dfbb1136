use ndarray::{Array2, Zip};
use rand::Rng;
use rayon::prelude::*;

use super::training::{self, TrainControl, Trained};
use super::{ensemble_sample, reconstruct, Example, Model, ModelKind, TrainedPipeline, TrainingConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{mse, mse_grad, perceptual_proxy, perceptual_proxy_grad, Grid};
use crate::rng;
use crate::tomo::{AngleMask, Image, Sinogram};

const POSTPROC_TAG: u64 = 0xB0B0;
const INPUT_TAG: u64 = 0x1F1F;

/// Refinement input and target for one image.
#[derive(Clone, Debug)]
pub struct PostprocExample {
    pub mean: Image,
    pub std: Image,
    pub truth: Image,
}

/// Pixel-wise mean and unbiased standard deviation of the FBP images of
/// `members`. A single member has zero spread.
pub fn ensemble_images(members: &[Sinogram], size: usize) -> Result<(Image, Image)> {
    if members.is_empty() {
        return Err(Error::invalid("ensemble is empty"));
    }
    let images: Vec<Image> = members.par_iter().map(|m| reconstruct(m, size)).collect::<Result<_>>()?;
    let n = images.len() as f64;
    let mut mean = Array2::<f64>::zeros((size, size));
    for img in &images {
        mean += &img.values;
    }
    mean /= n;
    let mut var = Array2::<f64>::zeros((size, size));
    if images.len() > 1 {
        for img in &images {
            Zip::from(&mut var).and(&img.values).and(&mean).for_each(|v, &x, &m| *v += (x - m) * (x - m));
        }
        var /= n - 1.0;
    }
    Ok((Image::new(mean)?, Image::new(var.mapv(f64::sqrt))?))
}

/// Run the student ensemble on every example and collect refinement inputs.
pub fn postproc_inputs(
    student: &Model,
    s: &NoiseSchedule,
    examples: &[Example],
    n: usize,
    seed: u64,
) -> Result<Vec<PostprocExample>> {
    let base = rng::derive_seed(seed, INPUT_TAG);
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let members = ensemble_sample(student, s, &ex.mu, &ex.mask, n, rng::derive_seed(base, i as u64))?;
            let (mean, std) = ensemble_images(&members, ex.image.size())?;
            Ok(PostprocExample { mean, std, truth: ex.image.clone() })
        })
        .collect()
}

/// Refinement inputs that skip inpainting: FBP of the masked sinogram and
/// a zero spread channel.
pub fn masked_fbp_inputs(examples: &[Example]) -> Result<Vec<PostprocExample>> {
    examples
        .par_iter()
        .map(|ex| {
            let size = ex.image.size();
            Ok(PostprocExample { mean: reconstruct(&ex.mu, size)?, std: Image::zeros(size), truth: ex.image.clone() })
        })
        .collect()
}

pub fn postproc_refine(tau: &Model, fbp_mean: &Image, fbp_std: &Image) -> Result<Image> {
    if tau.kind != ModelKind::Postproc {
        return Err(Error::invalid("expected a post-processing model"));
    }
    if fbp_mean.size() != fbp_std.size() {
        return Err(Error::shape("mean and std images differ in size"));
    }
    let input = Grid::from_planes(&[fbp_mean.values.view(), fbp_std.values.view()])?;
    let out = tau.net.forward(&tau.params, &input, None)?.0;
    Image::new(out.plane(0).to_owned())
}

/// Train the refinement network on `mse_weight * MSE + proxy_weight * proxy`.
pub fn train_postproc(inputs: &[PostprocExample], cfg: &TrainingConfig, ctl: TrainControl) -> Result<Trained> {
    if inputs.is_empty() {
        return Err(Error::invalid("post-processing training needs at least one example"));
    }
    let model = Model::init(ModelKind::Postproc, cfg.hidden_channels, rng::derive_seed(cfg.seed, POSTPROC_TAG))?;
    let (wm, wp, gamma) = (cfg.postproc_mse_weight, cfg.postproc_proxy_weight, cfg.proxy_gamma);
    training::run(model.params.clone(), ctl, cfg, POSTPROC_TAG, |params, r| {
        let ex = &inputs[r.random_range(0..inputs.len())];
        let input = Grid::from_planes(&[ex.mean.values.view(), ex.std.values.view()])?;
        let (out, tape) = model.net.forward(params, &input, None)?;
        let (pred, truth) = (out.plane(0), ex.truth.values.view());
        let mut loss = wm * mse(pred, truth);
        let mut g = mse_grad(pred, truth) * wm;
        if wp > 0.0 {
            loss += wp * perceptual_proxy(pred, truth, gamma);
            g.scaled_add(wp, &perceptual_proxy_grad(pred, truth, gamma));
        }
        let upstream = Grid::from_planes(&[g.view()])?;
        Ok((loss, model.net.backward(params, &tape, &upstream, None)?.0))
    })
}

/// Final image plus the intermediates it was built from.
#[derive(Clone, Debug)]
pub struct Restoration {
    pub image: Image,
    pub members: Vec<Sinogram>,
    pub fbp_mean: Image,
    pub fbp_std: Image,
}

/// Ensemble inpainting, FBP of every member, then refinement.
pub fn full_restore(
    pipeline: &TrainedPipeline,
    y: &Sinogram,
    mask: &AngleMask,
    size: usize,
    n: usize,
    seed: u64,
) -> Result<Restoration> {
    let members = ensemble_sample(&pipeline.student, &pipeline.schedule, y, mask, n, seed)?;
    let (fbp_mean, fbp_std) = ensemble_images(&members, size)?;
    let image = postproc_refine(&pipeline.postproc, &fbp_mean, &fbp_std)?;
    Ok(Restoration { image, members, fbp_mean, fbp_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::psnr;
    use crate::pipeline::Stage;
    use crate::tomo::{random_ellipse_phantom, ScanGeometry};

    #[test]
    fn spread_of_identical_members_is_zero() {
        let geo = ScanGeometry::new(30, 6.0, 26, 1.0).unwrap();
        let ex = Example::new(random_ellipse_phantom(16, 1), &geo, AngleMask::wedge(&geo, 60.0, None).unwrap()).unwrap();
        let members = vec![ex.truth.clone(); 4];
        let (mean, std) = ensemble_images(&members, 16).unwrap();
        assert!(std.values.iter().all(|v| *v == 0.0));
        assert_eq!(mean.values, reconstruct(&ex.truth, 16).unwrap().values);
        let (_, single) = ensemble_images(&members[..1], 16).unwrap();
        assert!(single.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn spread_uses_unbiased_denominator() {
        let geo = ScanGeometry::new(30, 6.0, 26, 1.0).unwrap();
        let a = Sinogram::zeros(&geo);
        let mut b = Sinogram::zeros(&geo);
        b.values[[3, 13]] = 1.0;
        let (mean, std) = ensemble_images(&[a, b.clone()], 16).unwrap();
        let half = reconstruct(&b, 16).unwrap();
        for ((m, s), h) in mean.values.iter().zip(std.values.iter()).zip(half.values.iter()) {
            assert!((m - 0.5 * h).abs() < 1e-12);
            // Two samples x, 0: unbiased variance x^2 / 2.
            assert!((s - h.abs() / 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_initialised_refiner_outputs_zero_and_training_helps() {
        let geo = ScanGeometry::new(30, 6.0, 26, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 60.0, None).unwrap();
        let ex: Vec<Example> =
            (0..4).map(|i| Example::new(random_ellipse_phantom(16, 60 + i), &geo, mask.clone()).unwrap()).collect();
        let inputs = masked_fbp_inputs(&ex).unwrap();
        let fresh = Model::init(ModelKind::Postproc, 6, 0).unwrap();
        let out = postproc_refine(&fresh, &inputs[0].mean, &inputs[0].std).unwrap();
        assert!(out.values.iter().all(|v| *v == 0.0));

        let cfg = TrainingConfig {
            iterations: 400,
            batch_size: 2,
            hidden_channels: 6,
            lr_max: 3e-3,
            seed: 2,
            ..TrainingConfig::defaults(Stage::Postproc)
        };
        let t = train_postproc(&inputs, &cfg, TrainControl::default()).unwrap();
        let (first, last) = t.log.smoothed_ends(50).unwrap();
        assert!(last <= 0.5 * first, "{first} -> {last}");
        let tau = Model::from_params(ModelKind::Postproc, t.params).unwrap();
        let mut before = 0.0;
        let mut after = 0.0;
        for p in &inputs {
            before += psnr(&p.mean.clipped(), &p.truth).unwrap();
            after += psnr(&postproc_refine(&tau, &p.mean, &p.std).unwrap().clipped(), &p.truth).unwrap();
        }
        assert!(after > before, "refined {after} vs input {before}");
    }
}
