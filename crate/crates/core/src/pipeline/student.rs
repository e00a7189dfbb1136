use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::training::{self, TrainControl, Trained};
use super::{
    low_fidelity_inpaint, planes, plane_to_sinogram, rectify_rnsd, teacher_ode_from, Example, Model, ModelKind,
    TrainingConfig,
};
use crate::diffusion::{terminal_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{mse, mse_grad, perceptual_proxy, perceptual_proxy_grad, Grid, ModelParams};
use crate::rng;
use crate::tomo::{AngleMask, Sinogram};

const PAIR_ORDER_TAG: u64 = 0xA1A1;
const PAIR_NOISE_TAG: u64 = 0xA1A2;
const DISTILL_TAG: u64 = 0xD157;
const DIRECT_TAG: u64 = 0xD1EC;
const ENSEMBLE_TAG: u64 = 0xE5E5;

/// A terminal state and the teacher's deterministic restoration of it.
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub x_t: Sinogram,
    pub x0_hat: Sinogram,
    pub mu: Sinogram,
    pub mask: AngleMask,
    pub truth: Sinogram,
    /// Index of the example the pair was drawn from.
    pub source: usize,
}

/// `count` teacher pairs. Examples are visited in shuffled epochs, so a
/// request larger than the dataset wraps around with a fresh order.
pub fn generate_pairs(
    score: &Model,
    s: &NoiseSchedule,
    examples: &[Example],
    count: usize,
    seed: u64,
) -> Result<Vec<PairRecord>> {
    if examples.is_empty() {
        return Err(Error::invalid("pair generation needs at least one example"));
    }
    let n = examples.len();
    let epochs = count.div_ceil(n);
    let mut order = Vec::with_capacity(epochs * n);
    for e in 0..epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(rng::derive_seed(seed, PAIR_ORDER_TAG), e as u64));
        order.extend(idx);
    }
    let noise_seed = rng::derive_seed(seed, PAIR_NOISE_TAG);
    (0..count)
        .into_par_iter()
        .map(|i| {
            let ex = &examples[order[i]];
            let x_t = terminal_sample(s, &ex.mu, &mut rng::stream(noise_seed, i as u64));
            let x0_hat = teacher_ode_from(score, s, &x_t, &ex.mu, &ex.lowfid)?;
            Ok(PairRecord {
                x_t,
                x0_hat,
                mu: ex.mu.clone(),
                mask: ex.mask.clone(),
                truth: ex.truth.clone(),
                source: order[i],
            })
        })
        .collect()
}

fn residual(student: &Model, params: &ModelParams, x_t: &Sinogram, mu: &Sinogram, lowfid: &Sinogram) -> Result<Grid> {
    if student.kind != ModelKind::Student {
        return Err(Error::invalid("expected a student model"));
    }
    x_t.check_same_shape(mu)?;
    x_t.check_same_shape(lowfid)?;
    let input = planes(&[x_t, mu, lowfid])?;
    Ok(student.net.forward(params, &input, None)?.0)
}

/// Predicted residual `r = x_T - x_0`; the restoration is `x_T - r`.
pub fn student_predict(student: &Model, x_t: &Sinogram, mu: &Sinogram, mask: &AngleMask) -> Result<Sinogram> {
    let lowfid = low_fidelity_inpaint(mu, mask)?;
    let r = residual(student, &student.params, x_t, mu, &lowfid)?;
    Ok(plane_to_sinogram(x_t, &r))
}

/// One rectified student restoration of `x_T`.
pub fn restore_once(
    student: &Model,
    x_t: &Sinogram,
    mu: &Sinogram,
    mask: &AngleMask,
    lowfid: &Sinogram,
) -> Result<Sinogram> {
    let r = residual(student, &student.params, x_t, mu, lowfid)?;
    let restored = x_t.with_values(&x_t.values - &r.plane(0));
    rectify_rnsd(&restored, mu, mask)
}

/// Distillation objective for one pair and its gradient with respect to
/// the predicted residual. Returns `(total, teacher term, boundary term, grad)`;
/// the boundary term is already weighted by `omega`.
pub fn distill_loss(
    residual: &Array2<f64>,
    pair: &PairRecord,
    omega: f64,
    gamma: f64,
) -> (f64, f64, f64, Array2<f64>) {
    let target = &pair.x_t.values - &pair.x0_hat.values;
    let main = perceptual_proxy(residual.view(), target.view(), gamma);
    let mut grad = perceptual_proxy_grad(residual.view(), target.view(), gamma);
    if omega == 0.0 {
        return (main, main, 0.0, grad);
    }
    // z = (I - M)(x_T - r) + y
    let mut z = &pair.x_t.values - residual;
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        if pair.mask.kept[i] {
            row.assign(&pair.mu.values.row(i));
        }
    }
    let boundary = omega * perceptual_proxy(z.view(), pair.truth.values.view(), gamma);
    let gz = perceptual_proxy_grad(z.view(), pair.truth.values.view(), gamma);
    for (i, (mut g, gzr)) in grad.rows_mut().into_iter().zip(gz.rows()).enumerate() {
        if !pair.mask.kept[i] {
            g.scaled_add(-omega, &gzr);
        }
    }
    (main + boundary, main, boundary, grad)
}

/// Train the one-step student on teacher pairs.
pub fn distill_student(pairs: &[PairRecord], cfg: &TrainingConfig, ctl: TrainControl) -> Result<Trained> {
    if pairs.is_empty() {
        return Err(Error::invalid("distillation needs at least one pair"));
    }
    let lowfids: Vec<Sinogram> =
        pairs.par_iter().map(|p| low_fidelity_inpaint(&p.mu, &p.mask)).collect::<Result<_>>()?;
    let model = Model::init(ModelKind::Student, cfg.hidden_channels, rng::derive_seed(cfg.seed, DISTILL_TAG))?;
    let (omega, gamma) = (cfg.boundary_weight, cfg.proxy_gamma);
    training::run(model.params.clone(), ctl, cfg, DISTILL_TAG, |params, r| {
        let i = r.random_range(0..pairs.len());
        let pair = &pairs[i];
        let input = planes(&[&pair.x_t, &pair.mu, &lowfids[i]])?;
        let (out, tape) = model.net.forward(params, &input, None)?;
        let (loss, _, _, g) = distill_loss(&out.plane(0).to_owned(), pair, omega, gamma);
        let upstream = Grid::from_planes(&[g.view()])?;
        Ok((loss, model.net.backward(params, &tape, &upstream, None)?.0))
    })
}

/// The "without distillation" inpainter: the same student network and
/// inputs, trained by plain MSE between its restoration and the ground
/// truth on freshly drawn terminal states.
pub fn train_direct_mse(
    examples: &[Example],
    s: &NoiseSchedule,
    cfg: &TrainingConfig,
    ctl: TrainControl,
) -> Result<Trained> {
    if examples.is_empty() {
        return Err(Error::invalid("direct training needs at least one example"));
    }
    let model = Model::init(ModelKind::Student, cfg.hidden_channels, rng::derive_seed(cfg.seed, DIRECT_TAG))?;
    training::run(model.params.clone(), ctl, cfg, DIRECT_TAG, |params, r| {
        let ex = &examples[r.random_range(0..examples.len())];
        let x_t = terminal_sample(s, &ex.mu, r);
        let input = planes(&[&x_t, &ex.mu, &ex.lowfid])?;
        let (out, tape) = model.net.forward(params, &input, None)?;
        let restored = &x_t.values - &out.plane(0);
        let loss = mse(restored.view(), ex.truth.values.view());
        let g = -mse_grad(restored.view(), ex.truth.values.view());
        let upstream = Grid::from_planes(&[g.view()])?;
        Ok((loss, model.net.backward(params, &tape, &upstream, None)?.0))
    })
}

/// `n` rectified one-step restorations from independent terminal draws.
pub fn ensemble_sample(
    student: &Model,
    s: &NoiseSchedule,
    mu: &Sinogram,
    mask: &AngleMask,
    n: usize,
    seed: u64,
) -> Result<Vec<Sinogram>> {
    if n == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    mask.check_geometry(mu)?;
    let lowfid = low_fidelity_inpaint(mu, mask)?;
    let base = rng::derive_seed(seed, ENSEMBLE_TAG);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x_t = terminal_sample(s, mu, &mut rng::stream(base, i as u64));
            restore_once(student, &x_t, mu, mask, &lowfid)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Stage, TrainingConfig};
    use crate::tomo::{apply_mask, random_ellipse_phantom, ScanGeometry};

    fn setup() -> (NoiseSchedule, Vec<Example>) {
        let geo = ScanGeometry::new(30, 6.0, 26, 1.0).unwrap();
        let mask = AngleMask::wedge(&geo, 48.0, None).unwrap();
        let ex = (0..3)
            .map(|i| Example::new(random_ellipse_phantom(16, 40 + i), &geo, mask.clone()).unwrap())
            .collect();
        (NoiseSchedule::linear(10, 0.002, 0.04, 0.5).unwrap(), ex)
    }

    fn fake_pair(ex: &Example, s: &NoiseSchedule, seed: u64) -> PairRecord {
        let x_t = terminal_sample(s, &ex.mu, &mut rng::stream(seed, 0));
        let x0_hat = ex.truth.map(|v| v * 0.9);
        PairRecord { x_t, x0_hat, mu: ex.mu.clone(), mask: ex.mask.clone(), truth: ex.truth.clone(), source: 0 }
    }

    #[test]
    fn zero_initialised_student_returns_x_t_and_residual_identity_holds() {
        let (s, ex) = setup();
        let student = Model::init(ModelKind::Student, 4, 2).unwrap();
        let x_t = terminal_sample(&s, &ex[0].mu, &mut rng::stream(1, 0));
        let r = student_predict(&student, &x_t, &ex[0].mu, &ex[0].mask).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));

        let mut trained = student.clone();
        for p in trained.params.entries.values_mut() {
            p.value.iter_mut().enumerate().for_each(|(k, v)| *v += 0.01 * ((k % 7) as f64 - 3.0));
        }
        let r = student_predict(&trained, &x_t, &ex[0].mu, &ex[0].mask).unwrap();
        assert!(r.values.iter().any(|v| *v != 0.0));
        let restored = &x_t.values - &r.values;
        for ((a, b), x) in restored.iter().zip(r.values.iter()).zip(x_t.values.iter()) {
            assert!((a + b - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(b.abs()));
        }
        let once = restore_once(&trained, &x_t, &ex[0].mu, &ex[0].mask, &ex[0].lowfid).unwrap();
        let expect = rectify_rnsd(&x_t.with_values(restored), &ex[0].mu, &ex[0].mask).unwrap();
        assert_eq!(once.values, expect.values);
    }

    #[test]
    fn zero_omega_leaves_only_the_teacher_term() {
        let (s, ex) = setup();
        let pair = fake_pair(&ex[0], &s, 3);
        let r = pair.x_t.values.mapv(|v| 0.3 * v);
        let (total, main, boundary, g0) = distill_loss(&r, &pair, 0.0, 0.5);
        assert_eq!(boundary, 0.0);
        assert_eq!(total, main);
        let target = &pair.x_t.values - &pair.x0_hat.values;
        assert_eq!(main, perceptual_proxy(r.view(), target.view(), 0.5));
        let (_, main2, boundary2, g1) = distill_loss(&r, &pair, 0.01, 0.5);
        assert_eq!(main2, main);
        assert!(boundary2 > 0.0);
        assert_ne!(g0, g1);
    }

    #[test]
    fn boundary_term_vanishes_for_exact_restoration() {
        let (s, ex) = setup();
        // With x_T equal to the truth the exact residual is zero, so the
        // restoration is bit-exact.
        let mut pair = fake_pair(&ex[1], &s, 4);
        pair.x_t = pair.truth.clone();
        let exact = Array2::zeros(pair.truth.values.dim());
        let (_, _, boundary, _) = distill_loss(&exact, &pair, 0.5, 0.5);
        assert_eq!(boundary, 0.0);
    }

    #[test]
    fn distill_gradient_matches_finite_differences() {
        let (s, ex) = setup();
        let pair = fake_pair(&ex[2], &s, 5);
        let r = pair.x_t.values.mapv(|v| 0.2 * v);
        let (_, _, _, g) = distill_loss(&r, &pair, 0.3, 0.5);
        let h = 1e-6;
        for &(i, j) in &[(0, 3), (27, 10), (29, 25), (12, 0)] {
            let mut up = r.clone();
            up[[i, j]] += h;
            let mut dn = r.clone();
            dn[[i, j]] -= h;
            let fd = (distill_loss(&up, &pair, 0.3, 0.5).0 - distill_loss(&dn, &pair, 0.3, 0.5).0) / (2.0 * h);
            assert!((fd - g[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()), "({i},{j}) {fd} vs {}", g[[i, j]]);
        }
    }

    #[test]
    fn ensemble_members_agree_on_kept_rows() {
        let (s, ex) = setup();
        let mut student = Model::init(ModelKind::Student, 4, 2).unwrap();
        for p in student.params.entries.values_mut() {
            p.value.iter_mut().enumerate().for_each(|(k, v)| *v += 0.02 * ((k % 5) as f64 - 2.0));
        }
        let members = ensemble_sample(&student, &s, &ex[0].mu, &ex[0].mask, 5, 11).unwrap();
        assert_eq!(members.len(), 5);
        for m in &members {
            assert_eq!(apply_mask(m, &ex[0].mask).unwrap().values, ex[0].mu.values);
        }
        assert_ne!(members[0].values, members[1].values);
        let single = ensemble_sample(&student, &s, &ex[0].mu, &ex[0].mask, 1, 11).unwrap();
        assert_eq!(single[0].values, members[0].values);
        assert!(ensemble_sample(&student, &s, &ex[0].mu, &ex[0].mask, 0, 11).is_err());
    }

    #[test]
    fn pairs_wrap_and_replay() {
        let (s, ex) = setup();
        let score = Model::init(ModelKind::Score, 3, 8).unwrap();
        let pairs = generate_pairs(&score, &s, &ex, 7, 21).unwrap();
        assert_eq!(pairs.len(), 7);
        // Each epoch of three visits every example once.
        for epoch in pairs.chunks(3).filter(|c| c.len() == 3) {
            let mut seen: Vec<_> = epoch.iter().map(|p| p.truth.values.sum().to_bits()).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 3);
        }
        for p in &pairs {
            let lowfid = low_fidelity_inpaint(&p.mu, &p.mask).unwrap();
            let replay = teacher_ode_from(&score, &s, &p.x_t, &p.mu, &lowfid).unwrap();
            assert_eq!(replay.values, p.x0_hat.values);
        }
        let again = generate_pairs(&score, &s, &ex, 7, 21).unwrap();
        assert!(pairs.iter().zip(&again).all(|(a, b)| a.x_t.values == b.x_t.values));
    }

    #[test]
    fn distillation_reduces_loss_on_a_tiny_set() {
        let (s, ex) = setup();
        let pairs: Vec<_> = ex.iter().enumerate().map(|(i, e)| fake_pair(e, &s, i as u64)).collect();
        let cfg = TrainingConfig {
            iterations: 150,
            batch_size: 2,
            hidden_channels: 6,
            lr_max: 3e-3,
            seed: 1,
            ..TrainingConfig::defaults(Stage::Distill)
        };
        let t = distill_student(&pairs, &cfg, TrainControl::default()).unwrap();
        let (first, last) = t.log.smoothed_ends(20).unwrap();
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }
}
