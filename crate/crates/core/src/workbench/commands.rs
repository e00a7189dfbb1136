use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use super::{read_raw_slice, resample, write_atomic, write_pgm, Manifest, RunConfig, Tensor, TensorContainer};
use crate::error::{Error, Result};
use crate::eval::{masked_fbp, psnr, run_ablations, run_comparison, AblationModels};
use crate::nn::ModelParams;
use crate::pipeline::{
    distill_student, full_restore, generate_pairs, masked_fbp_inputs, normalized_sinogram, postproc_inputs,
    train_direct_mse, train_postproc, train_score, Example, LossLog, Model, ModelKind, PairRecord, Stage,
    TrainControl, TrainedPipeline, Trained,
};
use crate::rng;
use crate::tomo::{apply_mask, random_ellipse_phantom, AngleMask, Image, ScanGeometry, Sinogram};

const TRAIN_TAG: u64 = 0x7A1;
const TEST_TAG: u64 = 0x7E5;
const PAIRS_TAG: u64 = 0xFA12;
const POSTPROC_INPUT_TAG: u64 = 0x1A9;

/// Flags shared by the subcommands.
#[derive(Clone, Debug, Default)]
pub struct CommandOptions {
    /// Sampling seed for `infer` and `eval`; defaults to the config seed.
    pub seed: Option<u64>,
    pub allow_config_mismatch: bool,
    pub resume: bool,
    pub stop_at: Option<u64>,
    /// Test-set phantom to restore.
    pub phantom: Option<usize>,
    /// Container with a `sinogram` entry to restore instead of a phantom.
    pub input: Option<PathBuf>,
}

/// Directory layout of one run.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn stage(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs")
    }

    pub fn infer(&self) -> PathBuf {
        self.root.join("infer")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn missing(path: &Path, what: &str) -> Error {
    Error::MissingArtifact { path: path.to_path_buf(), what: what.to_string() }
}

fn read_container(path: &Path, what: &str) -> Result<TensorContainer> {
    if !path.exists() {
        return Err(missing(path, what));
    }
    TensorContainer::read(path)
}

fn check_hash(manifest: &Manifest, dir: &Path, cfg: &RunConfig, opts: &CommandOptions) -> Result<()> {
    let have = manifest.get("config_hash").unwrap_or("");
    let want = cfg.hash_hex();
    if have == want {
        return Ok(());
    }
    let msg = format!("{} was produced with config {have}, current config is {want}", dir.display());
    if opts.allow_config_mismatch {
        log::warn!("{msg}; continuing because the mismatch was allowed");
        Ok(())
    } else {
        Err(Error::config(format!("{msg} (pass --allow-config-mismatch to use it anyway)")))
    }
}

fn stack_images(images: &[Image]) -> Result<Tensor> {
    let s = images.first().map_or(0, Image::size);
    Tensor::from_f64(vec![images.len(), s, s], images.iter().flat_map(|i| i.values.iter().copied()))
}

fn stack_sinograms(sinos: &[Sinogram]) -> Result<Tensor> {
    let (a, b) = sinos.first().map_or((0, 0), |s| s.values.dim());
    Tensor::from_f64(vec![sinos.len(), a, b], sinos.iter().flat_map(|s| s.values.iter().copied()))
}

fn unstack(t: &Tensor, rows: usize, cols: usize, path: &Path, name: &str) -> Result<Vec<Array2<f64>>> {
    if t.dims.len() != 3 || t.dims[1] != rows || t.dims[2] != cols {
        return Err(Error::config(format!(
            "{} entry {name} has shape {:?}, the config expects [n, {rows}, {cols}]; regenerate the dataset",
            path.display(),
            t.dims
        )));
    }
    let all = Array2::from_shape_vec((t.dims[0] * rows, cols), t.to_f64()).expect("dims checked");
    Ok(all.axis_chunks_iter(Axis(0), rows.max(1)).map(|c| c.to_owned()).collect())
}

fn image_tensor(img: &Image) -> Result<Tensor> {
    Tensor::from_f64(vec![img.size(), img.size()], img.values.iter().copied())
}

fn sinogram_tensor(s: &Sinogram) -> Result<Tensor> {
    let (a, b) = s.values.dim();
    Tensor::from_f64(vec![a, b], s.values.iter().copied())
}

fn mask_tensor(mask: &AngleMask) -> Result<Tensor> {
    Tensor::from_f64(vec![mask.kept.len()], mask.kept.iter().map(|&k| if k { 1.0 } else { 0.0 }))
}

/// Parameters, Adam moments and the step counter (as four 16-bit words,
/// exact in f32).
pub fn params_to_container(p: &ModelParams) -> Result<TensorContainer> {
    let mut c = TensorContainer::new();
    for (name, param) in &p.entries {
        c.insert(name.clone(), Tensor::from_f64(param.shape.clone(), param.value.iter().copied())?)?;
        c.insert(format!("adam.m.{name}"), Tensor::from_f64(param.shape.clone(), param.first_moment.iter().copied())?)?;
        c.insert(format!("adam.v.{name}"), Tensor::from_f64(param.shape.clone(), param.second_moment.iter().copied())?)?;
    }
    let words = (0..4).map(|k| ((p.step_count >> (16 * k)) & 0xFFFF) as f64);
    c.insert("meta.step_count", Tensor::from_f64(vec![4], words)?)?;
    Ok(c)
}

pub fn params_from_container(c: &TensorContainer, path: &Path) -> Result<ModelParams> {
    let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    let mut p = ModelParams::new();
    for (name, t) in &c.entries {
        if name.starts_with("adam.") || name.starts_with("meta.") {
            continue;
        }
        let mut param = crate::nn::Param::new(t.dims.clone(), t.to_f64())?;
        for (prefix, slot) in [("adam.m.", &mut param.first_moment), ("adam.v.", &mut param.second_moment)] {
            let m = c.get(&format!("{prefix}{name}")).map_err(|e| bad(e.to_string()))?;
            if m.dims != t.dims {
                return Err(bad(format!("{prefix}{name} has shape {:?}", m.dims)));
            }
            *slot = m.to_f64();
        }
        p.insert(name.clone(), param)?;
    }
    let words = c.get("meta.step_count").map_err(|e| bad(e.to_string()))?;
    if words.values.len() != 4 {
        return Err(bad("meta.step_count must hold 4 words".into()));
    }
    p.step_count = words.values.iter().enumerate().map(|(k, &w)| (w as u64) << (16 * k)).sum();
    Ok(p)
}

/// Images and normalised full sinograms for the training and test splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub geometry: ScanGeometry,
    pub train_images: Vec<Image>,
    pub train_sinograms: Vec<Sinogram>,
    pub test_images: Vec<Image>,
    pub test_sinograms: Vec<Sinogram>,
}

impl Dataset {
    pub fn examples(&self, mask: &AngleMask) -> Result<Vec<Example>> {
        self.train_images
            .par_iter()
            .zip(&self.train_sinograms)
            .map(|(img, s)| Example::from_sinogram(img.clone(), s.clone(), mask.clone()))
            .collect()
    }
}

fn source_images(cfg: &RunConfig) -> Result<(Vec<Image>, Vec<Image>, String)> {
    let size = cfg.size()?;
    let (n_train, n_test) = (cfg.usize("dataset", "train_count")?, cfg.usize("dataset", "test_count")?);
    let raw_dir = cfg.text("dataset", "raw_dir");
    if raw_dir.is_empty() {
        let seed = cfg.seed();
        let make = |tag: u64, n: usize| -> Vec<Image> {
            (0..n as u64)
                .into_par_iter()
                .map(|i| random_ellipse_phantom(size, rng::derive_seed(rng::derive_seed(seed, tag), i)))
                .collect()
        };
        return Ok((make(TRAIN_TAG, n_train), make(TEST_TAG, n_test), "phantoms".into()));
    }
    let dir = Path::new(raw_dir);
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.len() < n_train + n_test {
        return Err(Error::config(format!(
            "{} holds {} slices, train_count + test_count = {}",
            dir.display(),
            files.len(),
            n_train + n_test
        )));
    }
    let side = cfg.usize("dataset", "raw_size")?;
    let images: Vec<Image> = files[..n_train + n_test]
        .par_iter()
        .map(|p| Ok(resample(&read_raw_slice(p, side)?, size)))
        .collect::<Result<_>>()?;
    let (train, test) = images.split_at(n_train);
    Ok((train.to_vec(), test.to_vec(), format!("raw:{}", dir.display())))
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub train: usize,
    pub test: usize,
    pub sinogram_shape: (usize, usize),
}

/// Phantoms (or imported slices), full sinograms and scenario masks.
pub fn cmd_gen_dataset(cfg: &RunConfig, ws: &Workspace) -> Result<DatasetSummary> {
    let t0 = Instant::now();
    let geo = cfg.geometry()?;
    let (train, test, source) = source_images(cfg)?;
    let sinos = |imgs: &[Image]| -> Result<Vec<Sinogram>> {
        imgs.par_iter().map(|i| normalized_sinogram(i, &geo)).collect()
    };
    let (train_s, test_s) = (sinos(&train)?, sinos(&test)?);
    let dir = ws.dataset();
    for (name, imgs, ss) in [("train.tns", &train, &train_s), ("test.tns", &test, &test_s)] {
        let mut c = TensorContainer::new();
        c.insert("images", stack_images(imgs)?)?;
        c.insert("sinograms", stack_sinograms(ss)?)?;
        c.write(&dir.join(name))?;
    }
    let mut masks = TensorContainer::new();
    for d in cfg.scenarios() {
        masks.insert(format!("mask.{d}"), mask_tensor(&AngleMask::wedge(&geo, d, None)?)?)?;
    }
    masks.write(&dir.join("masks.tns"))?;
    write_atomic(&ws.root.join("config.txt"), cfg.canonical().as_bytes())?;
    let mut m = Manifest::new("dataset", &cfg.hash_hex());
    m.set("seed", cfg.seed());
    m.set("source", source);
    m.set("train_count", train.len());
    m.set("test_count", test.len());
    m.set("image_size", cfg.size()?);
    m.set("sinogram_shape", format!("{}x{}", geo.num_angles, geo.detector_bins));
    m.set("files", "train.tns,test.tns,masks.tns");
    m.write(&dir)?;
    log::info!("gen-dataset: {} + {} images in {:.1}s", train.len(), test.len(), t0.elapsed().as_secs_f64());
    Ok(DatasetSummary { train: train.len(), test: test.len(), sinogram_shape: (geo.num_angles, geo.detector_bins) })
}

/// The dataset must match the configured geometry and image size; the
/// training keys may differ from the generating config.
pub fn load_dataset(cfg: &RunConfig, ws: &Workspace) -> Result<Dataset> {
    let dir = ws.dataset();
    Manifest::read(&dir).map_err(|_| missing(&dir.join("manifest.txt"), "dataset (run gen-dataset first)"))?;
    let geo = cfg.geometry()?;
    let size = cfg.size()?;
    let split = |name: &str| -> Result<(Vec<Image>, Vec<Sinogram>)> {
        let path = dir.join(name);
        let c = read_container(&path, "dataset split")?;
        let imgs = unstack(c.get("images").map_err(|_| missing(&path, "images entry"))?, size, size, &path, "images")?;
        let sinos = unstack(
            c.get("sinograms").map_err(|_| missing(&path, "sinograms entry"))?,
            geo.num_angles,
            geo.detector_bins,
            &path,
            "sinograms",
        )?;
        Ok((
            imgs.into_iter().map(Image::new).collect::<Result<_>>()?,
            sinos.into_iter().map(|v| Sinogram::new(geo.clone(), v)).collect::<Result<_>>()?,
        ))
    };
    let (train_images, train_sinograms) = split("train.tns")?;
    let (test_images, test_sinograms) = split("test.tns")?;
    Ok(Dataset { geometry: geo, train_images, train_sinograms, test_images, test_sinograms })
}

fn write_checkpoint(dir: &Path, file: &str, params: &ModelParams) -> Result<()> {
    params_to_container(params)?.write(&dir.join(file))
}

fn read_checkpoint(dir: &Path, file: &str, what: &str) -> Result<ModelParams> {
    let path = dir.join(file);
    params_from_container(&read_container(&path, what)?, &path)
}

/// Loss CSV; a resumed run appends to the existing log.
fn write_loss(dir: &Path, file: &str, log: &LossLog, append: bool) -> Result<()> {
    let path = dir.join(file);
    let mut text = log.to_csv();
    if append {
        if let Ok(old) = std::fs::read_to_string(&path) {
            let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
            text = old + &body;
        }
    }
    write_atomic(&path, text.as_bytes())
}

fn stage_manifest(cfg: &RunConfig, stage: Stage, t: &Trained) -> Manifest {
    let mut m = Manifest::new(stage.name(), &cfg.hash_hex());
    m.set("seed", cfg.seed());
    m.set("step_count", t.params.step_count);
    if let Some((first, last)) = t.log.smoothed_ends(100) {
        m.set("loss_first_window", format!("{first:.6e}"));
        m.set("loss_last_window", format!("{last:.6e}"));
    }
    m
}

fn load_stage(cfg: &RunConfig, ws: &Workspace, stage: Stage, opts: &CommandOptions) -> Result<ModelParams> {
    let dir = ws.stage(stage);
    let what = format!("{} checkpoint (run `train --stage {}` first)", stage.name(), stage.name());
    let params = read_checkpoint(&dir, "checkpoint.tns", &what)?;
    check_hash(&Manifest::read(&dir)?, &dir, cfg, opts)?;
    Ok(params)
}

fn optional_model(dir: &Path, file: &str, kind: ModelKind) -> Option<Model> {
    let path = dir.join(file);
    if !path.exists() {
        return None;
    }
    match TensorContainer::read(&path).and_then(|c| params_from_container(&c, &path)).and_then(|p| Model::from_params(kind, p)) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("ignoring {}: {e}", path.display());
            None
        }
    }
}

fn train_mask(cfg: &RunConfig, geo: &ScanGeometry) -> Result<AngleMask> {
    AngleMask::wedge(geo, cfg.real("geometry", "missing_deg"), None)
}

/// Teacher pairs, cached under `pairs/` for the current config.
fn pairs_for(cfg: &RunConfig, ws: &Workspace, score: &Model, examples: &[Example]) -> Result<Vec<PairRecord>> {
    let dir = ws.pairs();
    let path = dir.join("pairs.tns");
    let count = cfg.usize("train.distill", "pairs")?;
    let schedule = cfg.training(Stage::Distill)?.schedule()?;
    let cached = Manifest::read(&dir).ok().filter(|m| m.get("config_hash") == Some(cfg.hash_hex().as_str()));
    if cached.is_some() && path.exists() {
        let c = TensorContainer::read(&path)?;
        let geo = &examples[0].truth.geometry;
        let x_t = unstack(c.get("x_t")?, geo.num_angles, geo.detector_bins, &path, "x_t")?;
        let x0 = unstack(c.get("x0_hat")?, geo.num_angles, geo.detector_bins, &path, "x0_hat")?;
        let src = c.get("source")?.values.clone();
        if x_t.len() == count && x0.len() == count && src.len() == count {
            log::info!("reusing {count} teacher pairs from {}", path.display());
            return x_t
                .into_iter()
                .zip(x0)
                .zip(src)
                .map(|((a, b), s)| {
                    let ex = examples.get(s as usize).ok_or_else(|| Error::Format {
                        path: path.clone(),
                        detail: format!("pair source {s} out of range"),
                    })?;
                    Ok(PairRecord {
                        x_t: Sinogram::new(geo.clone(), a)?,
                        x0_hat: Sinogram::new(geo.clone(), b)?,
                        mu: ex.mu.clone(),
                        mask: ex.mask.clone(),
                        truth: ex.truth.clone(),
                        source: s as usize,
                    })
                })
                .collect();
        }
    }
    let t0 = Instant::now();
    let pairs = generate_pairs(score, &schedule, examples, count, rng::derive_seed(cfg.seed(), PAIRS_TAG))?;
    log::info!("teacher: {count} pairs in {:.1}s", t0.elapsed().as_secs_f64());
    // Training uses the f32-rounded pairs, whether fresh or cached.
    let x_t: Vec<Sinogram> = pairs.iter().map(|p| p.x_t.clone()).collect();
    let x0: Vec<Sinogram> = pairs.iter().map(|p| p.x0_hat.clone()).collect();
    let mut c = TensorContainer::new();
    c.insert("x_t", stack_sinograms(&x_t)?)?;
    c.insert("x0_hat", stack_sinograms(&x0)?)?;
    c.insert("source", Tensor::from_f64(vec![count], pairs.iter().map(|p| p.source as f64))?)?;
    c.write(&path)?;
    let mut m = Manifest::new("pairs", &cfg.hash_hex());
    m.set("count", count);
    m.set("seed", rng::derive_seed(cfg.seed(), PAIRS_TAG));
    m.write(&dir)?;
    pairs_for(cfg, ws, score, examples)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps_run: usize,
    pub step_count: u64,
    pub loss_ends: Option<(f64, f64)>,
}

fn control(dir: &Path, opts: &CommandOptions) -> Result<TrainControl> {
    let resume = if opts.resume { Some(read_checkpoint(dir, "checkpoint.tns", "checkpoint to resume from")?) } else { None };
    Ok(TrainControl { resume, stop_at: opts.stop_at })
}

pub fn cmd_train(stage: Stage, cfg: &RunConfig, ws: &Workspace, opts: &CommandOptions) -> Result<TrainSummary> {
    let t0 = Instant::now();
    let data = load_dataset(cfg, ws)?;
    let mask = train_mask(cfg, &data.geometry)?;
    let tcfg = cfg.training(stage)?;
    let dir = ws.stage(stage);
    let examples = data.examples(&mask)?;
    let main = match stage {
        Stage::Score => train_score(&examples, &tcfg, control(&dir, opts)?)?,
        Stage::Distill => {
            let score = Model::from_params(ModelKind::Score, load_stage(cfg, ws, Stage::Score, opts)?)?;
            let pairs = pairs_for(cfg, ws, &score, &examples)?;
            let t = distill_student(&pairs, &tcfg, control(&dir, opts)?)?;
            if cfg.flag("train.distill", "ablation") && opts.stop_at.is_none() && !(opts.resume && dir.join("direct.tns").exists()) {
                let direct = train_direct_mse(&examples, &tcfg.schedule()?, &tcfg, TrainControl::default())?;
                write_checkpoint(&dir, "direct.tns", &direct.params)?;
                write_loss(&dir, "direct_loss.csv", &direct.log, false)?;
            }
            t
        }
        Stage::Postproc => {
            let student = Model::from_params(ModelKind::Student, load_stage(cfg, ws, Stage::Distill, opts)?)?;
            let s = tcfg.schedule()?;
            let seed = rng::derive_seed(cfg.seed(), POSTPROC_INPUT_TAG);
            let inputs = postproc_inputs(&student, &s, &examples, tcfg.ensemble_size, seed)?;
            let t = train_postproc(&inputs, &tcfg, control(&dir, opts)?)?;
            if cfg.flag("train.postproc", "ablation") && opts.stop_at.is_none() && !(opts.resume && dir.join("masked.tns").exists()) {
                let no_proxy_cfg = crate::pipeline::TrainingConfig { postproc_proxy_weight: 0.0, ..tcfg.clone() };
                let no_proxy = train_postproc(&inputs, &no_proxy_cfg, TrainControl::default())?;
                write_checkpoint(&dir, "no_proxy.tns", &no_proxy.params)?;
                write_loss(&dir, "no_proxy_loss.csv", &no_proxy.log, false)?;
                let masked = train_postproc(&masked_fbp_inputs(&examples)?, &tcfg, TrainControl::default())?;
                write_checkpoint(&dir, "masked.tns", &masked.params)?;
                write_loss(&dir, "masked_loss.csv", &masked.log, false)?;
            }
            t
        }
    };
    write_checkpoint(&dir, "checkpoint.tns", &main.params)?;
    write_loss(&dir, "loss.csv", &main.log, opts.resume)?;
    stage_manifest(cfg, stage, &main).write(&dir)?;
    log::info!("train {}: {:.1}s", stage.name(), t0.elapsed().as_secs_f64());
    Ok(TrainSummary {
        stage,
        steps_run: main.log.records.len(),
        step_count: main.params.step_count,
        loss_ends: main.log.smoothed_ends(100),
    })
}

/// Student and refiner from their checkpoints.
pub fn load_pipeline(cfg: &RunConfig, ws: &Workspace, opts: &CommandOptions) -> Result<TrainedPipeline> {
    let student = Model::from_params(ModelKind::Student, load_stage(cfg, ws, Stage::Distill, opts)?)?;
    let postproc = Model::from_params(ModelKind::Postproc, load_stage(cfg, ws, Stage::Postproc, opts)?)?;
    Ok(TrainedPipeline { schedule: cfg.training(Stage::Distill)?.schedule()?, student, postproc })
}

#[derive(Clone, Debug)]
pub struct InferSummary {
    pub dir: PathBuf,
    pub psnr_final: Option<f64>,
    pub psnr_masked_fbp: Option<f64>,
}

pub fn cmd_infer(cfg: &RunConfig, ws: &Workspace, opts: &CommandOptions) -> Result<InferSummary> {
    let pipeline = load_pipeline(cfg, ws, opts)?;
    let geo = cfg.geometry()?;
    let size = cfg.size()?;
    let (name, full, truth) = match &opts.input {
        Some(path) => {
            let c = read_container(path, "input sinogram")?;
            let t = c.get("sinogram").map_err(|_| missing(path, "sinogram entry"))?;
            if t.dims != [geo.num_angles, geo.detector_bins] {
                return Err(Error::shape(format!("input sinogram has shape {:?}, geometry wants {:?}", t.dims, [geo.num_angles, geo.detector_bins])));
            }
            let v = Array2::from_shape_vec((geo.num_angles, geo.detector_bins), t.to_f64()).expect("dims checked");
            let stem = path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
            (stem, Sinogram::new(geo.clone(), v)?, None)
        }
        None => {
            let data = load_dataset(cfg, ws)?;
            let id = opts.phantom.unwrap_or(0);
            let (img, s) = data
                .test_images
                .get(id)
                .zip(data.test_sinograms.get(id))
                .ok_or_else(|| Error::invalid(format!("phantom {id} not in the test set of {}", data.test_images.len())))?;
            (format!("phantom{id}"), s.clone(), Some(img.clone()))
        }
    };
    let mask = train_mask(cfg, &geo)?;
    let y = apply_mask(&full, &mask)?;
    let seed = opts.seed.unwrap_or(cfg.seed());
    let n = cfg.usize("eval", "ensemble_size")?;
    let t0 = Instant::now();
    let r = full_restore(&pipeline, &y, &mask, size, n, seed)?;
    log::info!("infer: {n} members in {:.2}s", t0.elapsed().as_secs_f64());
    for (i, m) in r.members.iter().enumerate() {
        if apply_mask(m, &mask)?.values != y.values {
            return Err(Error::invalid(format!("member {i} does not reproduce the observed rows")));
        }
    }
    let fbp_y = masked_fbp(&y, size)?;
    let dir = ws.infer().join(&name);
    let images = [("final", &r.image), ("fbp_mean", &r.fbp_mean), ("fbp_std", &r.fbp_std), ("masked_fbp", &fbp_y)];
    let mut ic = TensorContainer::new();
    for (k, img) in images {
        write_pgm(&dir.join(format!("{k}.pgm")), img)?;
        ic.insert(k, image_tensor(img)?)?;
    }
    let mut sc = TensorContainer::new();
    sc.insert("observation", sinogram_tensor(&y)?)?;
    sc.insert("mask", mask_tensor(&mask)?)?;
    sc.insert("members", stack_sinograms(&r.members)?)?;
    let mut m = Manifest::new("infer", &cfg.hash_hex());
    m.set("input", &name);
    m.set("seed", seed);
    m.set("ensemble_size", n);
    let mut summary = InferSummary { dir: dir.clone(), psnr_final: None, psnr_masked_fbp: None };
    if let Some(t) = &truth {
        write_pgm(&dir.join("truth.pgm"), t)?;
        ic.insert("truth", image_tensor(t)?)?;
        let (pf, pm) = (psnr(&r.image.clipped(), t)?, psnr(&fbp_y.clipped(), t)?);
        m.set("psnr_final_db", format!("{pf:.4}"));
        m.set("psnr_masked_fbp_db", format!("{pm:.4}"));
        summary.psnr_final = Some(pf);
        summary.psnr_masked_fbp = Some(pm);
    }
    ic.write(&dir.join("images.tns"))?;
    sc.write(&dir.join("sinograms.tns"))?;
    m.write(&dir)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub comparison: PathBuf,
    pub ablations: Option<PathBuf>,
    pub warnings: Vec<String>,
}

pub fn cmd_eval(cfg: &RunConfig, ws: &Workspace, opts: &CommandOptions) -> Result<EvalSummary> {
    let t0 = Instant::now();
    let data = load_dataset(cfg, ws)?;
    let mut ecfg = cfg.eval()?;
    ecfg.seed = opts.seed.unwrap_or(ecfg.seed);
    let methods = cfg.methods()?;
    let mut warnings = Vec::new();
    let pipeline = match load_pipeline(cfg, ws, opts) {
        Ok(p) => Some(p),
        Err(e @ Error::MissingArtifact { .. }) => {
            warnings.push(format!("pipeline unavailable: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let table = run_comparison(&data.test_images, &data.geometry, &methods, |_| pipeline.as_ref(), &ecfg)?;
    warnings.extend(table.warnings.iter().cloned());
    let dir = ws.eval();
    let comparison = dir.join("comparison.csv");
    write_atomic(&comparison, table.to_csv().as_bytes())?;
    let mut ablations = None;
    match &pipeline {
        Some(p) => {
            let distill = ws.stage(Stage::Distill);
            let post = ws.stage(Stage::Postproc);
            let direct = optional_model(&distill, "direct.tns", ModelKind::Student);
            let no_proxy = optional_model(&post, "no_proxy.tns", ModelKind::Postproc);
            let masked = optional_model(&post, "masked.tns", ModelKind::Postproc);
            let models = AblationModels {
                pipeline: p,
                direct_student: direct.as_ref(),
                postproc_no_proxy: no_proxy.as_ref(),
                postproc_masked: masked.as_ref(),
            };
            let t = run_ablations(&data.test_images, &data.geometry, &models, &ecfg)?;
            warnings.extend(t.warnings.iter().cloned());
            let path = dir.join("ablations.csv");
            write_atomic(&path, t.to_csv().as_bytes())?;
            ablations = Some(path);
        }
        None => warnings.push("ablation table skipped: pipeline unavailable".into()),
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut m = Manifest::new("eval", &cfg.hash_hex());
    m.set("seed", ecfg.seed);
    m.set("runs", ecfg.runs);
    m.set("scenarios", cfg.text("eval", "scenarios"));
    m.set("warnings", warnings.len());
    m.write(&dir)?;
    log::info!("eval: {:.1}s", t0.elapsed().as_secs_f64());
    Ok(EvalSummary { comparison, ablations, warnings })
}
