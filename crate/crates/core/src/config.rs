//! Flat `key = value` experiment configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. [`ExperimentConfig::to_text`] produces a
//! canonical form whose hash is stored in checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::losses::{GeneratorLoss, LabelLoss, LossConfig};
use crate::nets::Architecture;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Unclamped chain length; 1 is the ALI special case.
    pub n_steps: usize,
    pub dim_x: usize,
    pub dim_z: usize,
    pub hidden: Vec<usize>,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Discriminator learning rate; `None` shares `adam.lr`.
    pub disc_lr: Option<f64>,
    /// Decay both learning rates linearly to zero over `iterations`.
    pub lr_decay: bool,
    pub batch_size: usize,
    pub iterations: usize,
    /// Record metric snapshots every this many iterations (0 disables).
    pub eval_every: usize,
    pub seed: u64,
    pub decoder_stochastic: bool,
    pub label_modeling: bool,
    pub n_labels: usize,
    /// Reuse the discriminator's clamped batch and chain samples for the
    /// generator update.
    pub shared_batches: bool,
    /// Labels drawn per example for the importance-weighted label loss.
    pub importance_samples: usize,
    /// Write a checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_steps: 3,
            dim_x: 2,
            dim_z: 2,
            hidden: vec![256, 256, 256],
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            disc_lr: None,
            lr_decay: false,
            batch_size: 128,
            iterations: 20_000,
            eval_every: 0,
            seed: 0,
            decoder_stochastic: true,
            label_modeling: false,
            n_labels: 3,
            shared_batches: true,
            importance_samples: 4,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.n_steps < 1 {
            return bad("n_steps", "must be at least 1");
        }
        if self.dim_x == 0 {
            return bad("dim_x", "must be positive");
        }
        if self.dim_z == 0 {
            return bad("dim_z", "must be positive");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden", "layer widths must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1");
        }
        self.loss.validate()?;
        for (key, lr) in [("lr", Some(self.adam.lr)), ("disc_lr", self.disc_lr)] {
            if let Some(lr) = lr {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return bad(key, "must be finite and non-negative");
                }
            }
        }
        for (key, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(key, "must lie in [0, 1)");
            }
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.label_modeling && self.n_labels < 2 {
            return bad("n_labels", "label modeling needs at least 2 classes");
        }
        if self.label_modeling
            && self.loss.label_loss == LabelLoss::ImportanceWeighted
            && self.importance_samples < 2
        {
            return bad("importance_samples", "must be at least 2");
        }
        Ok(())
    }

    pub fn labels(&self) -> Option<usize> {
        self.label_modeling.then_some(self.n_labels)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            dim_x: self.dim_x,
            dim_z: self.dim_z,
            hidden: self.hidden.clone(),
            n_labels: self.labels(),
        }
    }

    /// Learning-rate multiplier for the update made at iteration `it`.
    pub fn lr_factor(&self, it: u64) -> f64 {
        if self.lr_decay {
            (1.0 - it as f64 / self.iterations.max(1) as f64).max(0.0)
        } else {
            1.0
        }
    }

    pub fn disc_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.disc_lr.unwrap_or(self.adam.lr),
            ..self.adam
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// `modes` Gaussians on a circle.
    Ring,
    /// Gaussians at explicit `centers`.
    Centers,
    SwissRoll,
    TwoMoons,
    Idx,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            Self::Ring => "ring",
            Self::Centers => "centers",
            Self::SwissRoll => "swiss_roll",
            Self::TwoMoons => "two_moons",
            Self::Idx => "idx",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "ring" => Self::Ring,
            "centers" => Self::Centers,
            "swiss_roll" => Self::SwissRoll,
            "two_moons" => Self::TwoMoons,
            "idx" => Self::Idx,
            _ => return Err(format!("unknown dataset {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub centers: Vec<Vec<f64>>,
    pub labeled: bool,
    pub n_data: usize,
    pub data_seed: u64,
    pub noise: f64,
    pub idx_path: Option<PathBuf>,
    pub idx_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Ring,
            modes: 8,
            radius: 2.0,
            sigma: 0.05,
            centers: Vec::new(),
            labeled: false,
            n_data: 10_000,
            data_seed: 0,
            noise: 0.05,
            idx_path: None,
            idx_limit: None,
        }
    }
}

impl DataConfig {
    pub fn build(&self) -> Result<Dataset> {
        match self.dataset {
            DatasetKind::Ring => data::gaussian_mixture(
                self.modes,
                self.n_data,
                self.radius,
                self.sigma,
                self.data_seed,
                self.labeled,
            ),
            DatasetKind::Centers => {
                if self.centers.is_empty() {
                    return Err(Error::Config("centers: required for dataset=centers".into()));
                }
                data::mixture_from_centers(self.centers.clone(), self.sigma, self.n_data, self.data_seed, self.labeled)
            }
            DatasetKind::SwissRoll => data::swiss_roll_2d(self.n_data, self.noise, self.data_seed),
            DatasetKind::TwoMoons => data::two_moons(self.n_data, self.noise, self.data_seed),
            DatasetKind::Idx => {
                let path = self
                    .idx_path
                    .as_deref()
                    .ok_or_else(|| Error::Config("idx_path: required for dataset=idx".into()))?;
                data::load_idx_images(path, self.idx_limit)
            }
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn generator_loss_name(g: GeneratorLoss) -> &'static str {
    match g {
        GeneratorLoss::NonSaturating => "non_saturating",
        GeneratorLoss::BoundarySeeking => "boundary_seeking",
    }
}

fn label_loss_name(l: LabelLoss) -> &'static str {
    match l {
        LabelLoss::ExpectedSoftmax => "expected_softmax",
        LabelLoss::ImportanceWeighted => "importance_weighted",
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_steps",
        "dim_x",
        "dim_z",
        "hidden",
        "generator_loss",
        "label_loss",
        "disc_steps",
        "lr",
        "disc_lr",
        "lr_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "batch_size",
        "iterations",
        "eval_every",
        "seed",
        "decoder_stochastic",
        "label_modeling",
        "n_labels",
        "shared_batches",
        "importance_samples",
        "checkpoint_every",
        "dataset",
        "modes",
        "radius",
        "sigma",
        "centers",
        "labeled",
        "n_data",
        "data_seed",
        "noise",
        "idx_path",
        "idx_limit",
    ];

    /// Sets one key. Errors name the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "n_steps" => t.n_steps = parse(key, v)?,
            "dim_x" => t.dim_x = parse(key, v)?,
            "dim_z" => t.dim_z = parse(key, v)?,
            "hidden" => t.hidden = parse_list(key, v)?,
            "generator_loss" => {
                t.loss.generator_loss = match v {
                    "non_saturating" => GeneratorLoss::NonSaturating,
                    "boundary_seeking" => GeneratorLoss::BoundarySeeking,
                    _ => return Err(Error::Config(format!("{key}: unknown loss {v:?}"))),
                }
            }
            "label_loss" => {
                t.loss.label_loss = match v {
                    "expected_softmax" => LabelLoss::ExpectedSoftmax,
                    "importance_weighted" => LabelLoss::ImportanceWeighted,
                    _ => return Err(Error::Config(format!("{key}: unknown loss {v:?}"))),
                }
            }
            "disc_steps" => t.loss.disc_steps_per_gen_step = parse(key, v)?,
            "lr" => t.adam.lr = parse(key, v)?,
            "disc_lr" => t.disc_lr = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "iterations" => t.iterations = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "decoder_stochastic" => t.decoder_stochastic = parse_bool(key, v)?,
            "label_modeling" => t.label_modeling = parse_bool(key, v)?,
            "n_labels" => t.n_labels = parse(key, v)?,
            "shared_batches" => t.shared_batches = parse_bool(key, v)?,
            "lr_decay" => t.lr_decay = parse_bool(key, v)?,
            "importance_samples" => t.importance_samples = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "dataset" => d.dataset = v.parse().map_err(|e| Error::Config(format!("{key}: {e}")))?,
            "modes" => d.modes = parse(key, v)?,
            "radius" => d.radius = parse(key, v)?,
            "sigma" => d.sigma = parse(key, v)?,
            "centers" => {
                // `x0,y0;x1,y1;...`
                d.centers = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(';').map(|c| parse_list(key, c.trim())).collect::<Result<_>>()?
                }
            }
            "labeled" => d.labeled = parse_bool(key, v)?,
            "n_data" => d.n_data = parse(key, v)?,
            "data_seed" => d.data_seed = parse(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "idx_path" => d.idx_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "idx_limit" => d.idx_limit = if v.is_empty() { None } else { Some(parse(key, v)?) },
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Parses config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let d = &self.data;
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "n_steps" => t.n_steps.to_string(),
            "dim_x" => t.dim_x.to_string(),
            "dim_z" => t.dim_z.to_string(),
            "hidden" => join(&t.hidden),
            "generator_loss" => generator_loss_name(t.loss.generator_loss).into(),
            "label_loss" => label_loss_name(t.loss.label_loss).into(),
            "disc_steps" => t.loss.disc_steps_per_gen_step.to_string(),
            "lr" => t.adam.lr.to_string(),
            "disc_lr" => opt_to_string(&t.disc_lr),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "iterations" => t.iterations.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "seed" => t.seed.to_string(),
            "decoder_stochastic" => t.decoder_stochastic.to_string(),
            "label_modeling" => t.label_modeling.to_string(),
            "n_labels" => t.n_labels.to_string(),
            "shared_batches" => t.shared_batches.to_string(),
            "lr_decay" => t.lr_decay.to_string(),
            "importance_samples" => t.importance_samples.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "dataset" => d.dataset.name().into(),
            "modes" => d.modes.to_string(),
            "radius" => d.radius.to_string(),
            "sigma" => d.sigma.to_string(),
            "centers" => d
                .centers
                .iter()
                .map(|c| c.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
                .collect::<Vec<_>>()
                .join(";"),
            "labeled" => d.labeled.to_string(),
            "n_data" => d.n_data.to_string(),
            "data_seed" => d.data_seed.to_string(),
            "noise" => d.noise.to_string(),
            "idx_path" => d.idx_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "idx_limit" => opt_to_string(&d.idx_limit),
            _ => return None,
        })
    }

    /// Canonical text: every key in a fixed order. Parsing it back yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}
