//! Training stages and the inference path.
//!
//! 1. A score network is trained on noisy sinograms `x_t` of the
//!    mean-reverting process whose mean is the masked observation.
//! 2. The reverse ODE driven by that network is the teacher; it turns
//!    terminal samples `x_T` into restorations, and those pairs train a
//!    one-step student that predicts the residual `x_T - x_0`.
//! 3. Student restorations are rectified against the observation, back
//!    projected, and the ensemble mean and spread are refined by a
//!    post-processing network.
//!
//! Sinograms inside the pipeline are divided by the image size so that a
//! fully opaque ray integrates to about one.

mod conditioning;
mod postproc;
mod score;
mod student;
mod training;

use rayon::prelude::*;

pub use conditioning::{low_fidelity_inpaint, rectify_rnsd};
pub use postproc::{
    ensemble_images, full_restore, masked_fbp_inputs, postproc_inputs, postproc_refine, train_postproc,
    PostprocExample, Restoration,
};
pub use score::{predict_eps, teacher_ode_from, teacher_restore_ode, train_score};
pub use student::{
    distill_loss, distill_student, ensemble_sample, generate_pairs, restore_once, student_predict, train_direct_mse,
    PairRecord,
};
pub use training::{LossLog, LossRecord, TrainControl, Trained};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{ConvNet, Grid, ModelParams, NetSpec, DEFAULT_PROXY_GAMMA};
use crate::tomo::{apply_mask, fbp, radon_forward, AngleMask, Apodization, Image, ScanGeometry, Sinogram};

/// Projections of a `size` x `size` image scaled into the pipeline's units.
pub fn normalized_sinogram(img: &Image, geo: &ScanGeometry) -> Result<Sinogram> {
    let mut s = radon_forward(img, geo)?;
    let k = 1.0 / img.size() as f64;
    s.values.mapv_inplace(|v| v * k);
    Ok(s)
}

/// Unapodised FBP of a pipeline-unit sinogram, back in image units.
pub fn reconstruct(sino: &Sinogram, size: usize) -> Result<Image> {
    let mut img = fbp(sino, size, Apodization::None)?;
    img.values.mapv_inplace(|v| v * size as f64);
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Score,
    Distill,
    Postproc,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Score => "score",
            Stage::Distill => "distill",
            Stage::Postproc => "postproc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Stage::Score),
            "distill" => Ok(Stage::Distill),
            "postproc" => Ok(Stage::Postproc),
            other => Err(Error::config(format!("unknown stage {other:?} (expected score, distill or postproc)"))),
        }
    }
}

/// Hyperparameters for one training stage. The schedule fields are shared
/// by every stage that touches the diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub steps: usize,
    pub zeta_start: f64,
    pub zeta_end: f64,
    pub lambda: f64,
    pub hidden_channels: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// `omega`, weight of the boundary term during distillation.
    pub boundary_weight: f64,
    pub proxy_gamma: f64,
    pub postproc_mse_weight: f64,
    pub postproc_proxy_weight: f64,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (batch_size, iterations) = match stage {
            Stage::Score => (4, 20_000),
            Stage::Distill => (8, 5_000),
            Stage::Postproc => (8, 5_000),
        };
        TrainingConfig {
            stage,
            steps: 100,
            zeta_start: 0.002,
            zeta_end: 0.04,
            lambda: 0.5,
            hidden_channels: 16,
            batch_size,
            iterations,
            lr_max: 5e-4,
            lr_min: 1e-6,
            weight_decay: 0.0,
            boundary_weight: 0.01,
            proxy_gamma: DEFAULT_PROXY_GAMMA,
            postproc_mse_weight: 1.0,
            postproc_proxy_weight: 0.5,
            ensemble_size: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 1e-6) {
            return Err(Error::config(format!(
                "lambda = {} leaves the normalised noise undefined; it must be positive",
                self.lambda
            )));
        }
        if self.steps == 0 || self.batch_size == 0 || self.iterations == 0 || self.hidden_channels == 0 {
            return Err(Error::config("steps, batch_size, iterations and hidden_channels must be positive"));
        }
        if !(self.boundary_weight >= 0.0 && self.boundary_weight.is_finite()) {
            return Err(Error::config("boundary_weight must be a non-negative number"));
        }
        if !(self.proxy_gamma >= 0.0 && self.postproc_mse_weight >= 0.0 && self.postproc_proxy_weight >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::config("ensemble_size must be at least 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config("learning rates must satisfy 0 <= lr_min <= lr_max, lr_max > 0"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.validate()?;
        NoiseSchedule::linear(self.steps, self.zeta_start, self.zeta_end, self.lambda)
    }
}

/// The three network roles and their fixed layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Input `[x_t, mu, low-fidelity]` plus a `t / T` plane; predicts noise.
    Score,
    /// Input `[x_T, mu, low-fidelity]`, applied twice; predicts the residual.
    Student,
    /// Input `[fbp mean, fbp std]`; predicts the image.
    Postproc,
}

impl ModelKind {
    pub fn prefix(self) -> &'static str {
        match self {
            ModelKind::Score => "score.",
            ModelKind::Student => "student.",
            ModelKind::Postproc => "postproc.",
        }
    }

    pub fn spec(self, hidden: usize) -> NetSpec {
        match self {
            ModelKind::Score => NetSpec::new(4, 1, hidden, 1),
            ModelKind::Student => NetSpec::new(3, 1, hidden, 2),
            ModelKind::Postproc => NetSpec::new(2, 1, hidden, 1),
        }
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub net: ConvNet,
    pub params: ModelParams,
}

impl Model {
    pub fn init(kind: ModelKind, hidden: usize, seed: u64) -> Result<Self> {
        let net = ConvNet::new(kind.spec(hidden), kind.prefix())?;
        let mut params = ModelParams::new();
        net.init_params(&mut params, &mut crate::rng::stream(seed, 0))?;
        Ok(Model { kind, net, params })
    }

    /// Rebuild from stored parameters; the hidden width is read off the
    /// first layer.
    pub fn from_params(kind: ModelKind, params: ModelParams) -> Result<Self> {
        let name = format!("{}layer0.weight", kind.prefix());
        let hidden = params
            .entries
            .get(&name)
            .and_then(|p| p.shape.first().copied())
            .ok_or_else(|| Error::invalid(format!("parameters lack {name}")))?;
        let net = ConvNet::new(kind.spec(hidden), kind.prefix())?;
        for (k, &(cin, cout)) in net.spec.layer_channels().iter().enumerate() {
            let w = params.get(&format!("{}layer{k}.weight", kind.prefix()))?;
            if w.shape != [cout, cin, 3, 3] {
                return Err(Error::shape(format!("{:?} layer {k} has shape {:?}", kind, w.shape)));
            }
        }
        Ok(Model { kind, net, params })
    }
}

/// A training example: ground truth, its mask, and the conditioning
/// derived from the masked observation.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Image,
    pub truth: Sinogram,
    pub mask: AngleMask,
    pub mu: Sinogram,
    pub lowfid: Sinogram,
}

impl Example {
    pub fn new(image: Image, geo: &ScanGeometry, mask: AngleMask) -> Result<Self> {
        let truth = normalized_sinogram(&image, geo)?;
        Self::from_sinogram(image, truth, mask)
    }

    pub fn from_sinogram(image: Image, truth: Sinogram, mask: AngleMask) -> Result<Self> {
        let mu = apply_mask(&truth, &mask)?;
        let lowfid = low_fidelity_inpaint(&mu, &mask)?;
        Ok(Example { image, truth, mask, mu, lowfid })
    }
}

/// Build examples in parallel; order follows `images`.
pub fn build_examples(images: Vec<Image>, geo: &ScanGeometry, mask: &AngleMask) -> Result<Vec<Example>> {
    images.into_par_iter().map(|img| Example::new(img, geo, mask.clone())).collect()
}

fn planes(sinos: &[&Sinogram]) -> Result<Grid> {
    let views: Vec<_> = sinos.iter().map(|s| s.values.view()).collect();
    Grid::from_planes(&views)
}

fn plane_to_sinogram(template: &Sinogram, grid: &Grid) -> Sinogram {
    template.with_values(grid.plane(0).to_owned())
}

/// All stages trained: what inference needs.
#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub schedule: NoiseSchedule,
    pub student: Model,
    pub postproc: Model,
}
