//! Plain-text `key = value` run configuration.
//!
//! ```text
//! # comment
//! [geometry]
//! num_angles = 90
//! ```
//!
//! Every key has a default; unknown sections or keys are errors. The
//! canonical form lists every key in schema order with normalised values,
//! and its 64-bit FNV-1a hash identifies the configuration in manifests.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Method};
use crate::pipeline::{Stage, TrainingConfig};
use crate::tomo::ScanGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Real,
    Bool,
    RealList,
    Text,
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
    doc: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> Key {
    Key { name, kind, default, doc }
}

const fn train_keys(batch: &'static str, iterations: &'static str) -> [Key; 6] {
    [
        key("hidden_channels", Kind::Int, "16", "hidden channels per convolution layer"),
        key("batch_size", Kind::Int, batch, "samples per optimiser step"),
        key("iterations", Kind::Int, iterations, "optimiser steps"),
        key("lr_max", Kind::Real, "0.0005", "peak learning rate (cosine annealed)"),
        key("lr_min", Kind::Real, "0.000001", "final learning rate"),
        key("weight_decay", Kind::Real, "0", "decoupled weight decay"),
    ]
}

const DATASET: &[Key] = &[
    key("train_count", Kind::Int, "200", "training phantoms"),
    key("test_count", Kind::Int, "20", "held-out phantoms"),
    key("size", Kind::Int, "64", "image side length in pixels"),
    key("seed", Kind::Int, "0", "master seed; --seed overrides it"),
    key("raw_dir", Kind::Text, "", "directory of raw f32 slices to import instead of phantoms (empty: phantoms)"),
    key("raw_size", Kind::Int, "512", "side length of each raw slice"),
];
const GEOMETRY: &[Key] = &[
    key("num_angles", Kind::Int, "90", "projection angles"),
    key("angle_step_deg", Kind::Real, "2", "angular interval"),
    key("detector_bins", Kind::Int, "92", "detector bins per projection"),
    key("detector_spacing", Kind::Real, "1", "bin pitch in pixels"),
    key("missing_deg", Kind::Real, "60", "missing wedge used for training and inference"),
];
const SCHEDULE: &[Key] = &[
    key("steps", Kind::Int, "100", "diffusion steps T"),
    key("zeta_start", Kind::Real, "0.002", "first linear drift rate"),
    key("zeta_end", Kind::Real, "0.04", "last linear drift rate"),
    key("lambda", Kind::Real, "0.5", "stationary noise level"),
];
const DISTILL_EXTRA: &[Key] = &[
    key("pairs", Kind::Int, "2000", "teacher pairs to generate"),
    key("boundary_weight", Kind::Real, "0.01", "weight of the boundary term"),
    key("proxy_gamma", Kind::Real, "0.5", "gradient weight inside the perceptual proxy"),
    key("ablation", Kind::Bool, "true", "also train the direct-MSE student"),
];
const POSTPROC_EXTRA: &[Key] = &[
    key("mse_weight", Kind::Real, "1", "MSE weight in the refinement loss"),
    key("proxy_weight", Kind::Real, "0.5", "proxy weight in the refinement loss"),
    key("proxy_gamma", Kind::Real, "0.5", "gradient weight inside the perceptual proxy"),
    key("ensemble_size", Kind::Int, "4", "ensemble members per training input"),
    key("ablation", Kind::Bool, "true", "also train the no-proxy and masked-FBP refiners"),
];
const EVAL: &[Key] = &[
    key("scenarios", Kind::RealList, "60,90,120", "missing wedges to compare, in degrees"),
    key("methods", Kind::Text, "fbp,tv,pipeline", "comparison methods"),
    key("runs", Kind::Int, "10", "repeats of stochastic methods"),
    key("ensemble_size", Kind::Int, "10", "ensemble members at inference"),
    key("tv_lambda", Kind::Real, "0.1", "TV weight"),
    key("tv_iterations", Kind::Int, "500", "primal-dual iterations"),
    key("ablation_scenario", Kind::Real, "60", "wedge used for the ablation table"),
];

static SCORE: [Key; 6] = train_keys("4", "20000");
static DISTILL_KEYS: [Key; 6] = train_keys("8", "5000");
static POSTPROC_KEYS: [Key; 6] = train_keys("8", "5000");

fn schema() -> Vec<(&'static str, Vec<&'static Key>)> {
    let cat = |a: &'static [Key], b: &'static [Key]| a.iter().chain(b).collect::<Vec<_>>();
    vec![
        ("dataset", DATASET.iter().collect()),
        ("geometry", GEOMETRY.iter().collect()),
        ("schedule", SCHEDULE.iter().collect()),
        ("train.score", SCORE.iter().collect()),
        ("train.distill", cat(&DISTILL_KEYS, DISTILL_EXTRA)),
        ("train.postproc", cat(&POSTPROC_KEYS, POSTPROC_EXTRA)),
        ("eval", EVAL.iter().collect()),
    ]
}

fn normalise(kind: Kind, raw: &str) -> std::result::Result<String, String> {
    let raw = raw.trim();
    match kind {
        Kind::Int => raw.parse::<u64>().map(|v| v.to_string()).map_err(|e| format!("{raw:?} is not an integer: {e}")),
        Kind::Real => {
            let v: f64 = raw.parse().map_err(|e| format!("{raw:?} is not a number: {e}"))?;
            if v.is_finite() {
                Ok(v.to_string())
            } else {
                Err(format!("{raw:?} is not finite"))
            }
        }
        Kind::Bool => match raw {
            "true" => Ok("true".into()),
            "false" => Ok("false".into()),
            _ => Err(format!("{raw:?} is not true or false")),
        },
        Kind::RealList => {
            let items = raw
                .split(',')
                .map(|s| normalise(Kind::Real, s))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(items.join(","))
        }
        Kind::Text => Ok(raw.to_string()),
    }
}

/// Parsed configuration: every schema key with its normalised value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: IndexMap<(String, String), String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = IndexMap::new();
        for (section, keys) in schema() {
            for k in keys {
                let v = normalise(k.kind, k.default).expect("schema defaults parse");
                values.insert((section.to_string(), k.name.to_string()), v);
            }
        }
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let schema = schema();
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut section: Option<&'static str> = None;
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(
                    schema
                        .iter()
                        .find(|(s, _)| *s == name)
                        .map(|(s, _)| *s)
                        .ok_or_else(|| Error::config(format!("line {n}: unknown section [{name}]")))?,
                );
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::config(format!("line {n}: expected key = value")))?;
            let k = k.trim();
            let sec = section.ok_or_else(|| Error::config(format!("line {n}: key {k:?} before any section")))?;
            let keys = &schema.iter().find(|(s, _)| *s == sec).expect("known section").1;
            let spec = keys
                .iter()
                .find(|key| key.name == k)
                .ok_or_else(|| Error::config(format!("line {n}: unknown key {k:?} in [{sec}]")))?;
            if !seen.insert((sec, k.to_string())) {
                return Err(Error::config(format!("line {n}: duplicate key {k:?} in [{sec}]")));
            }
            let value = normalise(spec.kind, v).map_err(|e| Error::config(format!("line {n}: [{sec}] {k}: {e}")))?;
            cfg.values.insert((sec.to_string(), k.to_string()), value);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key in schema order, with a comment line per key.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (section, keys) in schema() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{section}]\n"));
            for k in keys {
                out.push_str(&format!("# {}\n{} = {}\n", k.doc, k.name, self.raw(section, k.name)));
            }
        }
        out
    }

    pub fn hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.canonical().as_bytes());
        h.finish()
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .unwrap_or_else(|| panic!("schema has no key [{section}] {key}"))
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let kind = schema()
            .into_iter()
            .find(|(s, _)| *s == section)
            .and_then(|(_, keys)| keys.into_iter().find(|k| k.name == key).map(|k| k.kind))
            .ok_or_else(|| Error::config(format!("unknown key [{section}] {key}")))?;
        let v = normalise(kind, value).map_err(|e| Error::config(format!("[{section}] {key}: {e}")))?;
        self.values.insert((section.to_string(), key.to_string()), v);
        Ok(())
    }

    pub fn int(&self, section: &str, key: &str) -> u64 {
        self.raw(section, key).parse().expect("normalised integer")
    }

    pub fn usize(&self, section: &str, key: &str) -> Result<usize> {
        usize::try_from(self.int(section, key)).map_err(|_| Error::config(format!("[{section}] {key} is too large")))
    }

    pub fn real(&self, section: &str, key: &str) -> f64 {
        self.raw(section, key).parse().expect("normalised number")
    }

    pub fn flag(&self, section: &str, key: &str) -> bool {
        self.raw(section, key) == "true"
    }

    pub fn text(&self, section: &str, key: &str) -> &str {
        self.raw(section, key)
    }

    fn reals(&self, section: &str, key: &str) -> Vec<f64> {
        self.raw(section, key).split(',').map(|s| s.parse().expect("normalised number")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.int("dataset", "seed")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.values.insert(("dataset".into(), "seed".into()), seed.to_string());
    }

    pub fn size(&self) -> Result<usize> {
        self.usize("dataset", "size")
    }

    pub fn geometry(&self) -> Result<ScanGeometry> {
        ScanGeometry::new(
            self.usize("geometry", "num_angles")?,
            self.real("geometry", "angle_step_deg"),
            self.usize("geometry", "detector_bins")?,
            self.real("geometry", "detector_spacing"),
        )
        .map_err(|e| Error::config(format!("[geometry]: {e}")))
    }

    pub fn training(&self, stage: Stage) -> Result<TrainingConfig> {
        let sec = format!("train.{}", stage.name());
        let s = sec.as_str();
        let mut cfg = TrainingConfig {
            steps: self.usize("schedule", "steps")?,
            zeta_start: self.real("schedule", "zeta_start"),
            zeta_end: self.real("schedule", "zeta_end"),
            lambda: self.real("schedule", "lambda"),
            hidden_channels: self.usize(s, "hidden_channels")?,
            batch_size: self.usize(s, "batch_size")?,
            iterations: self.int(s, "iterations"),
            lr_max: self.real(s, "lr_max"),
            lr_min: self.real(s, "lr_min"),
            weight_decay: self.real(s, "weight_decay"),
            seed: self.seed(),
            ..TrainingConfig::defaults(stage)
        };
        match stage {
            Stage::Score => {}
            Stage::Distill => {
                cfg.boundary_weight = self.real(s, "boundary_weight");
                cfg.proxy_gamma = self.real(s, "proxy_gamma");
            }
            Stage::Postproc => {
                cfg.postproc_mse_weight = self.real(s, "mse_weight");
                cfg.postproc_proxy_weight = self.real(s, "proxy_weight");
                cfg.proxy_gamma = self.real(s, "proxy_gamma");
                cfg.ensemble_size = self.usize(s, "ensemble_size")?;
            }
        }
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            scenarios: self.reals("eval", "scenarios"),
            runs: self.usize("eval", "runs")?,
            ensemble_size: self.usize("eval", "ensemble_size")?,
            tv_lambda: self.real("eval", "tv_lambda"),
            tv_iterations: self.usize("eval", "tv_iterations")?,
            ablation_scenario: self.real("eval", "ablation_scenario"),
            seed: self.seed(),
        })
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.text("eval", "methods").split(',').map(|m| Method::parse(m.trim())).collect()
    }

    /// Every scenario the dataset needs a mask for.
    pub fn scenarios(&self) -> Vec<f64> {
        let mut out = vec![self.real("geometry", "missing_deg")];
        for d in self.reals("eval", "scenarios").into_iter().chain([self.real("eval", "ablation_scenario")]) {
            if !out.contains(&d) {
                out.push(d);
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let geo = self.geometry()?;
        geo.check_image_size(self.size()?).map_err(|e| Error::config(format!("[dataset] size: {e}")))?;
        for d in self.scenarios() {
            crate::tomo::AngleMask::wedge(&geo, d, None)
                .map_err(|e| Error::config(format!("scenario {d} deg: {e}")))?;
        }
        for stage in [Stage::Score, Stage::Distill, Stage::Postproc] {
            self.training(stage)?.validate()?;
        }
        let ev = self.eval()?;
        if ev.runs == 0 || ev.ensemble_size == 0 || ev.tv_iterations == 0 {
            return Err(Error::config("[eval] runs, ensemble_size and tv_iterations must be positive"));
        }
        if ev.tv_lambda.is_nan() || ev.tv_lambda < 0.0 {
            return Err(Error::config("[eval] tv_lambda must be non-negative"));
        }
        self.methods()?;
        if self.int("dataset", "train_count") == 0 || self.int("dataset", "test_count") == 0 {
            return Err(Error::config("[dataset] train_count and test_count must be positive"));
        }
        if self.int("train.distill", "pairs") == 0 {
            return Err(Error::config("[train.distill] pairs must be positive"));
        }
        Ok(())
    }
}
