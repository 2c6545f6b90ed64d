//! Standalone ALI update: `z ~ N(0, I)`, `x ~ p(x | z)` against
//! `(x_data, z ~ q(z | x_data))`, written without the chain machinery.
//!
//! It consumes the same random streams as a one-step chain, which is what
//! makes the two trainers comparable bit for bit.

use std::collections::BTreeMap;
use std::time::Instant;

use super::{disc_update, divergence, generator_objective, sample_batch, PairValues, TrainRecord, TrainState};
use crate::chains::JointBatch;
use crate::chains::Source;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::LabelLoss;
use crate::nets::{decode, encode, one_hot, BoundNet, NetParams, Networks};
use crate::optim::step_net;
use crate::rng::{Purpose, Streams};

struct AliGraph<'t> {
    fake: JointBatch<'t>,
    real: JointBatch<'t>,
    encoder: BoundNet<'t>,
    decoder: BoundNet<'t>,
}

fn build<'t>(
    tape: &'t Tape,
    nets: &Networks,
    cfg: &TrainConfig,
    data: &Dataset,
    streams: &Streams,
    trainable: bool,
) -> Result<AliGraph<'t>> {
    let bind = |n: &NetParams| if trainable { n.bind(tape) } else { n.bind_frozen(tape) };
    let b = cfg.batch_size;
    let (xb, yb) = sample_batch(data, b, streams);

    // Generator: z from the prior, one decoder sample.
    let z = tape.constant(streams.normal(Purpose::Prior, 0, &[b, cfg.dim_z]));
    let decoder = bind(&nets.decoder);
    let eps = streams.normal(Purpose::DecoderNoise, 1, &[b, cfg.dim_x]);
    let u = cfg.labels().map(|_| streams.uniform(Purpose::LabelDraw, 1, b));
    let out = decode(&decoder, &z, &eps, u.as_deref(), super::decode_options(cfg))?;
    let fake = JointBatch {
        x: out.x,
        z,
        y: out.labels.as_ref().map(|l| match cfg.loss.label_loss {
            LabelLoss::ExpectedSoftmax => l.features,
            LabelLoss::ImportanceWeighted => l.features.detach(),
        }),
        labels: out.labels.map(|l| l.hard),
        source: Source::Unclamped,
    };

    // Inference: encoder on the data batch.
    let x = tape.constant(xb);
    let y: Option<Var<'t>> = match (cfg.labels(), yb) {
        (Some(k), Some(y)) => Some(tape.constant(one_hot(&y, k))),
        _ => None,
    };
    let encoder = bind(&nets.encoder);
    let eps_z = streams.normal(Purpose::ClampedEncoder, 0, &[b, cfg.dim_z]);
    let (zq, _) = encode(&encoder, &x, y.as_ref(), &eps_z)?;
    let real = JointBatch {
        x,
        z: zq,
        y,
        labels: None,
        source: Source::Clamped,
    };
    Ok(AliGraph {
        fake,
        real,
        encoder,
        decoder,
    })
}

/// One ALI iteration with the same update order as the chain trainer.
pub fn ali_step(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRecord> {
    if cfg.label_modeling && cfg.loss.label_loss == LabelLoss::ImportanceWeighted {
        return Err(Error::Unsupported(
            "the standalone ALI trainer covers the expected-softmax label loss only".into(),
        ));
    }
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

    let tape = Tape::new();
    let g = build(&tape, &state.nets, cfg, data, &gen_streams, true)?;

    let mut last = None;
    for k in 0..disc_steps {
        let (real, fake): (PairValues, PairValues) = if k == 0 && cfg.shared_batches {
            (PairValues::of(&g.real, g.real.y.as_ref()), PairValues::of(&g.fake, g.fake.y.as_ref()))
        } else {
            let t2 = Tape::new();
            let h = build(&t2, &state.nets, cfg, data, &streams.phase(k as u64), false)?;
            (PairValues::of(&h.real, h.real.y.as_ref()), PairValues::of(&h.fake, h.fake.y.as_ref()))
        };
        last = Some(disc_update(&mut state.nets, &mut state.adam_discriminator, real, fake, it)?);
    }
    let disc = last.expect("at least one discriminator step");

    let d = state.nets.discriminator.bind_frozen(&tape);
    let (objective, step) = generator_objective(&d, (&g.fake.x, &g.fake.z, g.fake.y.as_ref()), &g.real, cfg, it)?;
    let grads = tape.backward(objective)?;
    let enc: Vec<Tensor> = g.encoder.grads(&grads)?;
    let dec: Vec<Tensor> = g.decoder.grads(&grads)?;
    step_net(&mut state.nets.encoder, &enc, &mut state.adam_encoder)?;
    step_net(&mut state.nets.decoder, &dec, &mut state.adam_decoder)?;
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
