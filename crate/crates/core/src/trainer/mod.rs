//! Adversarial training loop.
//!
//! Each iteration draws its randomness from `Streams::new(seed, iteration)`,
//! so a run is a pure function of `(config, seed)` and can be resumed from
//! any checkpoint without drift.

mod ali;
mod checkpoint;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chains::{clamped_step, unclamped_chain, Binding, ChainOptions, JointBatch, Sampler, UnclampedRun};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::data::{Dataset, DatasetMeta};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LabelLoss};
use crate::nets::{discriminate, one_hot, sample_categorical, BoundNet, DecodeOptions, LabelSample, Networks};
use crate::optim::{step_net, AdamState};
use crate::rng::{Purpose, Streams};

pub use ali::ali_step;
pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Label-draw stream indices used by the importance-weighted label loss;
/// chain steps use indices `1..=N`.
const IW_DRAW_BASE: u64 = 1 << 32;

/// Networks plus optimizer state: everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub nets: Networks,
    pub adam_encoder: AdamState,
    pub adam_decoder: AdamState,
    pub adam_discriminator: AdamState,
    /// Completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = Networks::init(&cfg.architecture(), cfg.seed)?;
        Ok(Self {
            adam_encoder: AdamState::for_net(cfg.adam, &nets.encoder),
            adam_decoder: AdamState::for_net(cfg.adam, &nets.decoder),
            adam_discriminator: AdamState::for_net(cfg.disc_adam(), &nets.discriminator),
            nets,
            iteration: 0,
        })
    }

    /// Sets the optimizers' learning rates for iteration `it`.
    pub(crate) fn schedule(&mut self, cfg: &TrainConfig, it: u64) {
        let f = cfg.lr_factor(it);
        self.adam_encoder.config.lr = cfg.adam.lr * f;
        self.adam_decoder.config.lr = cfg.adam.lr * f;
        self.adam_discriminator.config.lr = cfg.disc_adam().lr * f;
    }

    pub fn sampler(&self, cfg: &TrainConfig) -> Result<Sampler<'_>> {
        Sampler::new(&self.nets.encoder, &self.nets.decoder, decode_options(cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub disc_loss: f64,
    /// Unclamped-side generator loss.
    pub gen_loss: f64,
    /// Encoder loss on clamped pairs.
    pub clamped_gen_loss: f64,
    pub d_clamped: f64,
    pub d_unclamped: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    /// Not serialized, so record streams stay bit-reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

pub fn decode_options(cfg: &TrainConfig) -> DecodeOptions {
    DecodeOptions {
        stochastic: cfg.decoder_stochastic,
        n_labels: cfg.labels(),
    }
}

pub fn chain_options(cfg: &TrainConfig) -> ChainOptions {
    ChainOptions {
        n_steps: cfg.n_steps,
        decode: decode_options(cfg),
    }
}

/// Checks that the dataset fits the configured architecture.
pub fn check_compatible(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.dim() != cfg.dim_x {
        return Err(Error::Config(format!(
            "dim_x: config says {} but the dataset has {} columns",
            cfg.dim_x,
            data.dim()
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if cfg.label_modeling {
        let k = data
            .n_classes
            .filter(|_| data.y.is_some())
            .ok_or_else(|| Error::Config("label_modeling: dataset has no labels".into()))?;
        if k > cfg.n_labels {
            return Err(Error::Config(format!("n_labels: dataset has {k} classes, config {}", cfg.n_labels)));
        }
    }
    Ok(())
}

/// Minibatch drawn with replacement from the batch stream.
pub(crate) fn sample_batch(data: &Dataset, batch: usize, streams: &Streams) -> (Tensor, Option<Vec<usize>>) {
    let mut rng = streams.rng(Purpose::Batch, 0);
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
    let y = data.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect());
    (data.x.gather_rows(&idx), y)
}

fn divergence(iteration: u64, detail: impl Into<String>) -> Error {
    Error::Divergence {
        iteration,
        detail: detail.into(),
        last_checkpoint: None,
    }
}

fn finite_scalar(v: &Var<'_>, what: &str, iteration: u64) -> Result<f64> {
    let x = v.value().item()?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(divergence(iteration, format!("{what} is {x}")))
    }
}

fn check_probabilities(d: &Var<'_>, what: &str, iteration: u64) -> Result<f64> {
    let t = d.value();
    if !t.is_finite() {
        return Err(divergence(iteration, format!("{what} has non-finite outputs")));
    }
    Ok(t.sum() / t.len() as f64)
}

/// Values of one side of the discriminator's input.
pub(crate) struct PairValues {
    pub x: Tensor,
    pub z: Tensor,
    pub y: Option<Tensor>,
}

impl PairValues {
    pub(crate) fn of(pair: &JointBatch<'_>, y: Option<&Var<'_>>) -> Self {
        Self {
            x: pair.x.value(),
            z: pair.z.value(),
            y: y.map(|y| y.value()),
        }
    }
}

pub(crate) struct DiscStep {
    pub loss: f64,
    pub d_clamped: f64,
    pub d_unclamped: f64,
}

/// One discriminator update on detached pairs.
pub(crate) fn disc_update(
    nets: &mut Networks,
    adam: &mut AdamState,
    clamped: PairValues,
    unclamped: PairValues,
    iteration: u64,
) -> Result<DiscStep> {
    let tape = Tape::new();
    let d = nets.discriminator.bind(&tape);
    let side = |p: PairValues| -> Result<Var<'_>> {
        let y = p.y.map(|y| tape.constant(y));
        discriminate(&d, &tape.constant(p.x), &tape.constant(p.z), y.as_ref())
    };
    let dc = side(clamped)?;
    let du = side(unclamped)?;
    let d_clamped = check_probabilities(&dc, "D(clamped)", iteration)?;
    let d_unclamped = check_probabilities(&du, "D(unclamped)", iteration)?;
    let loss = losses::disc_loss(&dc, &du)?;
    let lv = finite_scalar(&loss, "discriminator loss", iteration)?;
    let g = tape.backward(loss)?;
    step_net(&mut nets.discriminator, &d.grads(&g)?, adam)?;
    if !nets.discriminator.is_finite() {
        return Err(divergence(iteration, "discriminator parameters became non-finite"));
    }
    Ok(DiscStep {
        loss: lv,
        d_clamped,
        d_unclamped,
    })
}

/// Adds `more` into `acc` elementwise.
pub(crate) fn accumulate(acc: &mut [Tensor], more: Vec<Tensor>) {
    for (a, m) in acc.iter_mut().zip(more) {
        a.add_assign(&m);
    }
}

pub(crate) struct GenStep {
    pub gen_loss: f64,
    pub clamped_gen_loss: f64,
}

/// Generator objective for both sides with the discriminator frozen:
/// `gen_loss(D(unclamped)) + clamped_gen_loss(D(clamped))` plus the optional
/// label term.
pub(crate) fn generator_objective<'t>(
    d: &BoundNet<'t>,
    unclamped: (&Var<'t>, &Var<'t>, Option<&Var<'t>>),
    clamped: &JointBatch<'t>,
    cfg: &TrainConfig,
    iteration: u64,
) -> Result<(Var<'t>, GenStep)> {
    let du = discriminate(d, unclamped.0, unclamped.1, unclamped.2)?;
    let dc = discriminate(d, &clamped.x, &clamped.z, clamped.y.as_ref())?;
    check_probabilities(&du, "D(unclamped)", iteration)?;
    check_probabilities(&dc, "D(clamped)", iteration)?;
    let lu = losses::gen_loss(&du, cfg.loss.generator_loss)?;
    let lc = losses::clamped_gen_loss(&dc, cfg.loss.generator_loss)?;
    let step = GenStep {
        gen_loss: finite_scalar(&lu, "generator loss", iteration)?,
        clamped_gen_loss: finite_scalar(&lc, "clamped generator loss", iteration)?,
    };
    Ok((lu.add(&lc)?, step))
}

/// Label features the discriminator sees for the unclamped pair: the
/// straight-through features, or the bare one-hot draw when the label head
/// is trained by importance weighting instead.
fn unclamped_label_input<'t>(run: &UnclampedRun<'t>, cfg: &TrainConfig) -> Option<Var<'t>> {
    let labels = run.final_labels.as_ref()?;
    Some(match cfg.loss.label_loss {
        LabelLoss::ExpectedSoftmax => labels.features,
        LabelLoss::ImportanceWeighted => labels.features.detach(),
    })
}

/// Importance-weighted label loss on the final decoder's label head.
fn iw_label_term<'t>(
    d: &BoundNet<'t>,
    run: &UnclampedRun<'t>,
    labels: &LabelSample<'t>,
    cfg: &TrainConfig,
    streams: &Streams,
) -> Result<Var<'t>> {
    let tape = run.pair.x.tape();
    let probs = labels.probs.value();
    let (batch, k) = (probs.rows(), probs.cols());
    let m = cfg.importance_samples;
    let x = run.pair.x.detach();
    let z = run.pair.z.detach();
    let mut sampled = vec![Vec::with_capacity(m); batch];
    let mut dmat = Tensor::zeros(&[batch, m]);
    for j in 0..m {
        let u = streams.uniform(Purpose::LabelDraw, IW_DRAW_BASE + j as u64, batch);
        let draw: Vec<usize> = (0..batch).map(|b| sample_categorical(probs.row(b), u[b])).collect();
        let y = tape.constant(one_hot(&draw, k));
        let dv = discriminate(d, &x, &z, Some(&y))?.value();
        for b in 0..batch {
            dmat.row_mut(b)[j] = dv.row(b)[0];
            sampled[b].push(draw[b]);
        }
    }
    losses::importance_weighted_label_loss(&labels.logits, &sampled, &dmat)
}

/// Samples on one gen tape: the unclamped chain and the clamped step.
struct Pairs<'t> {
    run: UnclampedRun<'t>,
    clamped: JointBatch<'t>,
    clamped_encoder: BoundNet<'t>,
}

fn draw_pairs<'t>(
    tape: &'t Tape,
    nets: &Networks,
    cfg: &TrainConfig,
    data: &Dataset,
    streams: &Streams,
    mode: Binding,
) -> Result<Pairs<'t>> {
    let (xb, yb) = sample_batch(data, cfg.batch_size, streams);
    let run = unclamped_chain(
        tape,
        &nets.encoder,
        &nets.decoder,
        chain_options(cfg),
        cfg.batch_size,
        streams,
        mode,
    )?;
    let labels = match (cfg.labels(), yb.as_deref()) {
        (Some(k), Some(y)) => Some((y, k)),
        _ => None,
    };
    let (clamped, clamped_encoder) = clamped_step(tape, &nets.encoder, &xb, labels, streams, mode)?;
    Ok(Pairs {
        run,
        clamped,
        clamped_encoder,
    })
}

fn disc_inputs(p: &Pairs<'_>, cfg: &TrainConfig) -> (PairValues, PairValues) {
    let yu = unclamped_label_input(&p.run, cfg);
    (
        PairValues::of(&p.clamped, p.clamped.y.as_ref()),
        PairValues::of(&p.run.pair, yu.as_ref()),
    )
}

/// One GibbsNet iteration: `disc_steps` discriminator updates, then one
/// encoder/decoder update through the final chain step.
pub fn train_step(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRecord> {
    let started = Instant::now();
    let it = state.iteration;
    state.schedule(cfg, it);
    let streams = Streams::new(cfg.seed, it);
    let disc_steps = cfg.loss.disc_steps_per_gen_step;
    let gen_streams = if cfg.shared_batches {
        streams.phase(0)
    } else {
        streams.phase(disc_steps as u64)
    };

    // The gen tape keeps trainable bindings alive across the discriminator
    // update; its sample values do not depend on the discriminator.
    let gen_tape = Tape::new();
    let gen = draw_pairs(&gen_tape, &state.nets, cfg, data, &gen_streams, Binding::Trainable)?;

    let mut last = None;
    for k in 0..disc_steps {
        let (c, u) = if k == 0 && cfg.shared_batches {
            disc_inputs(&gen, cfg)
        } else {
            let tape = Tape::new();
            let p = draw_pairs(&tape, &state.nets, cfg, data, &streams.phase(k as u64), Binding::Frozen)?;
            disc_inputs(&p, cfg)
        };
        last = Some(disc_update(&mut state.nets, &mut state.adam_discriminator, c, u, it)?);
    }
    let disc = last.expect("at least one discriminator step");

    let d = state.nets.discriminator.bind_frozen(&gen_tape);
    let yu = unclamped_label_input(&gen.run, cfg);
    let (mut objective, step) = generator_objective(
        &d,
        (&gen.run.pair.x, &gen.run.pair.z, yu.as_ref()),
        &gen.clamped,
        cfg,
        it,
    )?;
    if cfg.loss.label_loss == LabelLoss::ImportanceWeighted {
        if let Some(labels) = &gen.run.final_labels {
            let iw = iw_label_term(&d, &gen.run, labels, cfg, &gen_streams)?;
            finite_scalar(&iw, "label loss", it)?;
            objective = objective.add(&iw)?;
        }
    }
    let g = gen_tape.backward(objective)?;

    // Encoder signal from both the clamped step and the chain.
    let mut enc_grads = gen.clamped_encoder.grads(&g)?;
    for b in &gen.run.encoder_steps {
        accumulate(&mut enc_grads, b.grads(&g)?);
    }
    let mut dec_grads = gen.run.decoder_steps[0].grads(&g)?;
    for b in &gen.run.decoder_steps[1..] {
        accumulate(&mut dec_grads, b.grads(&g)?);
    }
    step_net(&mut state.nets.encoder, &enc_grads, &mut state.adam_encoder)?;
    step_net(&mut state.nets.decoder, &dec_grads, &mut state.adam_decoder)?;
    if !state.nets.is_finite() {
        return Err(divergence(it, "encoder/decoder parameters became non-finite"));
    }
    state.iteration += 1;

    Ok(TrainRecord {
        iteration: state.iteration,
        disc_loss: disc.loss,
        gen_loss: step.gen_loss,
        clamped_gen_loss: step.clamped_gen_loss,
        d_clamped: disc.d_clamped,
        d_unclamped: disc.d_unclamped,
        metrics: BTreeMap::new(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Cheap periodic metrics: MMD between chain samples at step N and data,
/// and mode coverage for mixtures.
pub fn snapshot_metrics(state: &TrainState, cfg: &TrainConfig, data: &Dataset) -> Result<BTreeMap<String, f64>> {
    let n = 256.min(data.len()).max(2);
    let sampler = state.sampler(cfg)?;
    let streams = Streams::new(cfg.seed, state.iteration).phase(u64::MAX);
    let x = sampler.run(n, cfg.n_steps, &streams, |_| Ok(()))?.x;
    let reference = data.x.gather_rows(&(0..n.min(data.len())).collect::<Vec<_>>());
    let mut out = BTreeMap::new();
    if reference.rows() >= 2 {
        let mmd = eval::mmd_rbf(&x, &reference, &eval::median_bandwidths(&x, &reference))?;
        out.insert("mmd".to_string(), mmd.value);
    }
    if let Some(meta @ DatasetMeta::Mixture { .. }) = &data.meta {
        let c = eval::mode_coverage(&x, meta, 3.0)?;
        out.insert("unassigned".to_string(), c.unassigned);
        out.insert("min_mode_fraction".to_string(), c.min_fraction());
    }
    Ok(out)
}

/// Where and how often [`Trainer::run`] writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
}

/// A training run bound to its config and dataset.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub state: TrainState,
    pub data: Dataset,
    pub last_checkpoint: Option<PathBuf>,
    /// Use the standalone ALI update instead of the chain (requires
    /// `n_steps = 1`).
    ali_mode: bool,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        check_compatible(&config.train, &data)?;
        let state = TrainState::init(&config.train)?;
        Ok(Self {
            config,
            state,
            data,
            last_checkpoint: None,
            ali_mode: false,
        })
    }

    /// The standalone ALI trainer: prior sample, one decoder step, clamped
    /// encoder step.
    pub fn new_ali(mut config: ExperimentConfig, data: Dataset) -> Result<Self> {
        config.train.n_steps = 1;
        let mut t = Self::new(config, data)?;
        t.ali_mode = true;
        Ok(t)
    }

    pub fn from_checkpoint(ck: Checkpoint, data: Dataset) -> Result<Self> {
        let config = ExperimentConfig::from_text(&ck.config_text)?;
        config.validate()?;
        check_compatible(&config.train, &data)?;
        let state = ck.into_state()?;
        Ok(Self {
            config,
            state,
            data,
            last_checkpoint: None,
            ali_mode: false,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.config.to_text(), &self.state)
    }

    pub fn step(&mut self) -> Result<TrainRecord> {
        let cfg = &self.config.train;
        let r = if self.ali_mode {
            ali_step(&mut self.state, &self.data, cfg)
        } else {
            train_step(&mut self.state, &self.data, cfg)
        };
        r.map_err(|e| match e {
            Error::Divergence { iteration, detail, .. } => Error::Divergence {
                iteration,
                detail,
                last_checkpoint: self.last_checkpoint.clone(),
            },
            e => e,
        })
    }

    /// Trains until `config.train.iterations` iterations are complete,
    /// handing each record to `sink`.
    pub fn run(&mut self, policy: &CheckpointPolicy, mut sink: impl FnMut(&TrainRecord) -> Result<()>) -> Result<()> {
        let total = self.config.train.iterations as u64;
        while self.state.iteration < total {
            let mut rec = self.step()?;
            let cfg = &self.config.train;
            if cfg.eval_every > 0 && rec.iteration % cfg.eval_every as u64 == 0 {
                rec.metrics = snapshot_metrics(&self.state, cfg, &self.data)?;
            }
            if let Some(dir) = &policy.dir {
                if cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every as u64 == 0 {
                    let path = dir.join(format!("checkpoint_{:08}.gbnt", rec.iteration));
                    self.checkpoint().save(&path)?;
                    self.last_checkpoint = Some(path);
                }
            }
            sink(&rec)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }
}

/// Trains from scratch and returns the final state with every record.
pub fn train(config: ExperimentConfig, data: Dataset) -> Result<(TrainState, Vec<TrainRecord>)> {
    let mut t = Trainer::new(config, data)?;
    let mut records = Vec::new();
    t.run(&CheckpointPolicy::default(), |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((t.state, records))
}
