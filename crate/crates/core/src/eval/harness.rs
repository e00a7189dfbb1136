//! Comparison and ablation tables.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{tv_reconstruct, MetricReport, DEFAULT_TV_ITERATIONS, DEFAULT_TV_LAMBDA};
use crate::error::{Error, Result};
use crate::nn::DEFAULT_PROXY_GAMMA;
use crate::pipeline::{
    ensemble_images, ensemble_sample, full_restore, normalized_sinogram, postproc_refine, reconstruct, Model,
    TrainedPipeline,
};
use crate::rng;
use crate::tomo::{apply_mask, AngleMask, Image, ScanGeometry, Sinogram};

pub const CSV_HEADER: &str = "method,scenario_deg,run_seed,psnr_db,ssim,proxy";

/// First line of every table.
pub fn proxy_disclaimer() -> String {
    format!(
        "# proxy column: MSE plus {DEFAULT_PROXY_GAMMA} x squared finite-difference mismatch, a stand-in for LPIPS; \
         its values are not comparable to published LPIPS numbers"
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Fbp,
    Tv,
    Pipeline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Tv => "tv",
            Method::Pipeline => "pipeline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fbp" => Ok(Method::Fbp),
            "tv" => Ok(Method::Tv),
            "pipeline" => Ok(Method::Pipeline),
            other => Err(Error::config(format!("unknown method {other:?} (expected fbp, tv or pipeline)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub scenarios: Vec<f64>,
    pub runs: usize,
    pub ensemble_size: usize,
    pub tv_lambda: f64,
    pub tv_iterations: usize,
    pub ablation_scenario: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenarios: vec![60.0, 90.0, 120.0],
            runs: 10,
            ensemble_size: 10,
            tv_lambda: DEFAULT_TV_LAMBDA,
            tv_iterations: DEFAULT_TV_ITERATIONS,
            ablation_scenario: 60.0,
            seed: 0,
        }
    }
}

/// `None` in `run_seed` marks the aggregate row.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub method: String,
    pub scenario_deg: f64,
    pub run_seed: Option<u64>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub rows: Vec<Row>,
    pub warnings: Vec<String>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = proxy_disclaimer();
        out.push('\n');
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let seed = r.run_seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6e}",
                r.method, r.scenario_deg, seed, r.report.psnr, r.report.ssim, r.report.proxy_perceptual
            )
            .expect("writing to a String");
        }
        out
    }

    /// Aggregate row for a method and scenario.
    pub fn mean(&self, method: &str, scenario_deg: f64) -> Option<&MetricReport> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.scenario_deg == scenario_deg && r.run_seed.is_none())
            .map(|r| &r.report)
    }

    fn push_runs(&mut self, method: &str, scenario_deg: f64, runs: Vec<(Option<u64>, MetricReport)>) {
        let reports: Vec<MetricReport> = runs.iter().map(|(_, r)| *r).collect();
        let deterministic = runs.len() == 1 && runs[0].0.is_none();
        if !deterministic {
            for (seed, report) in runs {
                self.rows.push(Row { method: method.to_string(), scenario_deg, run_seed: seed, report });
            }
        }
        if let Some(mean) = MetricReport::mean(&reports) {
            self.rows.push(Row { method: method.to_string(), scenario_deg, run_seed: None, report: mean });
        }
    }
}

/// A held-out image with its scenario mask and observation (pipeline units).
struct Case {
    truth: Image,
    mask: AngleMask,
    y: Sinogram,
}

fn cases(test: &[Image], geo: &ScanGeometry, scenario_deg: f64) -> Result<Vec<Case>> {
    let mask = AngleMask::wedge(geo, scenario_deg, None)?;
    test.par_iter()
        .map(|img| {
            let y = apply_mask(&normalized_sinogram(img, geo)?, &mask)?;
            Ok(Case { truth: img.clone(), mask: mask.clone(), y })
        })
        .collect()
}

/// Metrics of `estimate(case index, case)` over the set; estimates are clipped to [0, 1].
fn score_set<F>(cases: &[Case], estimate: F) -> Result<MetricReport>
where
    F: Fn(usize, &Case) -> Result<Image> + Sync,
{
    let reports: Vec<MetricReport> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| MetricReport::measure(&estimate(i, c)?.clipped(), &c.truth))
        .collect::<Result<_>>()?;
    MetricReport::mean(&reports).ok_or_else(|| Error::invalid("test set is empty"))
}

fn run_seeds(cfg: &EvalConfig, tag: u64) -> Vec<u64> {
    (0..cfg.runs as u64).map(|r| rng::derive_seed(rng::derive_seed(cfg.seed, tag), r)).collect()
}

fn stochastic<F>(cases: &[Case], cfg: &EvalConfig, tag: u64, estimate: F) -> Result<Vec<(Option<u64>, MetricReport)>>
where
    F: Fn(u64, &Case) -> Result<Image> + Sync,
{
    run_seeds(cfg, tag)
        .into_iter()
        .map(|seed| Ok((Some(seed), score_set(cases, |i, c| estimate(rng::derive_seed(seed, i as u64), c))?)))
        .collect()
}

pub fn masked_fbp(y: &Sinogram, size: usize) -> Result<Image> {
    reconstruct(y, size)
}

/// TV on a pipeline-unit observation; the solver works in raw projection units.
pub fn tv_baseline(y: &Sinogram, mask: &AngleMask, size: usize, cfg: &EvalConfig) -> Result<Image> {
    let raw = y.map(|v| v * size as f64);
    Ok(tv_reconstruct(&raw, mask, size, cfg.tv_lambda, cfg.tv_iterations)?.image)
}

/// Methods by scenarios. `pipeline_for` returns the trained pipeline to use
/// for a scenario; a `None` skips that row with a warning.
pub fn run_comparison<'a, P>(
    test: &[Image],
    geo: &ScanGeometry,
    methods: &[Method],
    pipeline_for: P,
    cfg: &EvalConfig,
) -> Result<Table>
where
    P: Fn(f64) -> Option<&'a TrainedPipeline>,
{
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let size = test[0].size();
    let mut table = Table::default();
    for &method in methods {
        for &deg in &cfg.scenarios {
            let cases = cases(test, geo, deg)?;
            let runs = match method {
                Method::Fbp => vec![(None, score_set(&cases, |_, c| masked_fbp(&c.y, size))?)],
                Method::Tv => vec![(None, score_set(&cases, |_, c| tv_baseline(&c.y, &c.mask, size, cfg))?)],
                Method::Pipeline => {
                    let Some(p) = pipeline_for(deg) else {
                        let msg = format!("pipeline row at {deg} deg skipped: no trained pipeline");
                        log::warn!("{msg}");
                        table.warnings.push(msg);
                        continue;
                    };
                    stochastic(&cases, cfg, 0xC0 ^ deg.to_bits(), |seed, c| {
                        Ok(full_restore(p, &c.y, &c.mask, size, cfg.ensemble_size, seed)?.image)
                    })?
                }
            };
            table.push_runs(method.name(), deg, runs);
        }
    }
    Ok(table)
}

pub const ABLATION_DISTILLED: &str = "w/ distill";
pub const ABLATION_DIRECT: &str = "w/o distill";
pub const ABLATION_FULL: &str = "full pipeline";
pub const ABLATION_NO_PROXY: &str = "w/o proxy loss";
pub const ABLATION_NO_SINOINP: &str = "w/o sinoinp";

/// Models trained for the ablation rows. Missing models skip their row.
#[derive(Clone, Debug)]
pub struct AblationModels<'a> {
    pub pipeline: &'a TrainedPipeline,
    /// Same student layout trained by plain MSE against the ground truth.
    pub direct_student: Option<&'a Model>,
    /// Refiner trained without the proxy term.
    pub postproc_no_proxy: Option<&'a Model>,
    /// Refiner trained on masked FBP with a zero spread channel.
    pub postproc_masked: Option<&'a Model>,
}

/// The first two rows stop at the ensemble-mean FBP; the others are full
/// restorations.
pub fn run_ablations(test: &[Image], geo: &ScanGeometry, models: &AblationModels, cfg: &EvalConfig) -> Result<Table> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let size = test[0].size();
    let deg = cfg.ablation_scenario;
    let cases = cases(test, geo, deg)?;
    let p = models.pipeline;
    let n = cfg.ensemble_size;
    let mut table = Table::default();

    let fbp_stage = |student: &Model, seed: u64, c: &Case| -> Result<Image> {
        let members = ensemble_sample(student, &p.schedule, &c.y, &c.mask, n, seed)?;
        Ok(ensemble_images(&members, size)?.0)
    };
    // The w/ and w/o distill rows share run seeds so they see the same draws.
    let runs = stochastic(&cases, cfg, 0xAB1, |seed, c| fbp_stage(&p.student, seed, c))?;
    table.push_runs(ABLATION_DISTILLED, deg, runs);
    match models.direct_student {
        Some(s) => {
            let runs = stochastic(&cases, cfg, 0xAB1, |seed, c| fbp_stage(s, seed, c))?;
            table.push_runs(ABLATION_DIRECT, deg, runs);
        }
        None => skip(&mut table, ABLATION_DIRECT),
    }
    let runs = stochastic(&cases, cfg, 0xAB2, |seed, c| Ok(full_restore(p, &c.y, &c.mask, size, n, seed)?.image))?;
    table.push_runs(ABLATION_FULL, deg, runs);
    match models.postproc_no_proxy {
        Some(tau) => {
            let variant = TrainedPipeline { postproc: tau.clone(), ..p.clone() };
            let runs = stochastic(&cases, cfg, 0xAB2, |seed, c| {
                Ok(full_restore(&variant, &c.y, &c.mask, size, n, seed)?.image)
            })?;
            table.push_runs(ABLATION_NO_PROXY, deg, runs);
        }
        None => skip(&mut table, ABLATION_NO_PROXY),
    }
    match models.postproc_masked {
        Some(tau) => {
            let zero = Image::zeros(size);
            let report = score_set(&cases, |_, c| postproc_refine(tau, &masked_fbp(&c.y, size)?, &zero))?;
            table.push_runs(ABLATION_NO_SINOINP, deg, vec![(None, report)]);
        }
        None => skip(&mut table, ABLATION_NO_SINOINP),
    }
    Ok(table)
}

fn skip(table: &mut Table, row: &str) {
    let msg = format!("ablation row {row:?} skipped: model not trained");
    log::warn!("{msg}");
    table.warnings.push(msg);
}
