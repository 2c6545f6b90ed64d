//! The unclamped (model) chain, the clamped (data) step, inpainting, and an
//! exact tabular oracle for the stationarity argument.
//!
//! Chain indexing: `z_1 ~ N(0, I)`, `x_i ~ p(x | z_i)`,
//! `z_{i+1} ~ q(z | x_i)`. An `N`-step chain applies the decoder `N` times
//! and the encoder `N - 1` times and ends at the pair `(x_N, z_N)`.
//!
//! Noise for every draw comes from a [`Streams`] keyed by the step index:
//! decoder noise for `x_i` uses index `i`, encoder noise for `q(z | x_i)`
//! uses index `i`. A chain can therefore be resumed from any saved state.

pub mod tabular;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{decode, encode, one_hot, BoundNet, DecodeOptions, LabelSample, NetParams};
use crate::rng::{Purpose, Streams};

/// Snapshot of one chain position. Values only; never on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub x: Tensor,
    pub z: Tensor,
    /// Hard label draws when label modeling is on.
    pub y: Option<Vec<usize>>,
    pub step: usize,
    /// True only for the state produced by the final, differentiable step.
    pub live_gradient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Clamped,
    Unclamped,
}

/// A batch of `(x, z[, y])` pairs on a tape, tagged by provenance.
#[derive(Debug, Clone)]
pub struct JointBatch<'t> {
    pub x: Var<'t>,
    pub z: Var<'t>,
    /// Label features fed to the discriminator (one-hot valued).
    pub y: Option<Var<'t>>,
    pub labels: Option<Vec<usize>>,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainOptions {
    pub n_steps: usize,
    pub decode: DecodeOptions,
}

/// Whether network parameters are recorded as trainable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

fn bind<'t>(net: &NetParams, tape: &'t Tape, mode: Binding) -> BoundNet<'t> {
    match mode {
        Binding::Trainable => net.bind(tape),
        Binding::Frozen => net.bind_frozen(tape),
    }
}

fn dims(enc: &NetParams, dec: &NetParams, opts: &DecodeOptions) -> Result<(usize, usize)> {
    let dim_z = dec.input_width();
    let k = opts.n_labels.unwrap_or(0);
    let out = dec.output_width();
    if out < k || (out - k) % 2 != 0 {
        return Err(Error::dim("decoder output", &[out], &[k]));
    }
    let dim_x = (out - k) / 2;
    if enc.input_width() != dim_x + k || enc.output_width() != 2 * dim_z {
        return Err(Error::dim(
            "encoder/decoder widths",
            &enc.sizes(),
            &dec.sizes(),
        ));
    }
    Ok((dim_x, dim_z))
}

/// Output of [`unclamped_chain`].
pub struct UnclampedRun<'t> {
    /// `(x_N, z_N)`; live through the final encoder and decoder applications.
    pub pair: JointBatch<'t>,
    /// Label head of the final decoder application.
    pub final_labels: Option<LabelSample<'t>>,
    /// States `1..=N`, detached.
    pub trajectory: Vec<ChainState>,
    /// One binding per encoder application, in step order.
    pub encoder_steps: Vec<BoundNet<'t>>,
    /// One binding per decoder application, in step order.
    pub decoder_steps: Vec<BoundNet<'t>>,
}

/// Runs the free-running chain for `opts.n_steps` steps from `z_1 ~ N(0, I)`.
///
/// Every state before the final `q` then `p` application is detached, so
/// gradient reaches only the parameters used in that final step. With
/// `n_steps == 1` the graph is exactly `z ~ N(0, I)`, `x ~ p(x | z)`.
pub fn unclamped_chain<'t>(
    tape: &'t Tape,
    enc: &NetParams,
    dec: &NetParams,
    opts: ChainOptions,
    batch: usize,
    streams: &Streams,
    mode: Binding,
) -> Result<UnclampedRun<'t>> {
    if opts.n_steps < 1 {
        return Err(Error::Config("chain length must be at least 1".into()));
    }
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let (dim_x, dim_z) = dims(enc, dec, &opts.decode)?;
    let n = opts.n_steps;

    let mut z = tape.constant(streams.normal(Purpose::Prior, 0, &[batch, dim_z]));
    let mut trajectory = Vec::with_capacity(n);
    let mut encoder_steps = Vec::with_capacity(n - 1);
    let mut decoder_steps = Vec::with_capacity(n);
    let mut last = None;

    for i in 1..=n {
        let dec_b = bind(dec, tape, mode);
        let eps = streams.normal(Purpose::DecoderNoise, i as u64, &[batch, dim_x]);
        let u = opts
            .decode
            .n_labels
            .map(|_| streams.uniform(Purpose::LabelDraw, i as u64, batch));
        let out = decode(&dec_b, &z, &eps, u.as_deref(), opts.decode)?;
        decoder_steps.push(dec_b);
        trajectory.push(ChainState {
            x: out.x.value(),
            z: z.value(),
            y: out.labels.as_ref().map(|l| l.hard.clone()),
            step: i,
            live_gradient: i == n,
        });
        if i == n {
            last = Some(out);
            break;
        }
        // Cut: nothing upstream of the next encoder input gets gradient.
        let x_in = out.x.detach();
        let y_in = out.labels.as_ref().map(|l| l.features.detach());
        let enc_b = bind(enc, tape, mode);
        let eps_z = streams.normal(Purpose::EncoderNoise, i as u64, &[batch, dim_z]);
        let (z_next, _) = encode(&enc_b, &x_in, y_in.as_ref(), &eps_z)?;
        encoder_steps.push(enc_b);
        z = z_next;
    }

    let out = last.expect("loop runs at least once");
    let pair = JointBatch {
        x: out.x,
        z,
        y: out.labels.as_ref().map(|l| l.features),
        labels: out.labels.as_ref().map(|l| l.hard.clone()),
        source: Source::Unclamped,
    };
    Ok(UnclampedRun {
        pair,
        final_labels: out.labels,
        trajectory,
        encoder_steps,
        decoder_steps,
    })
}

/// One ancestral step from data: `(x_data, ẑ ~ q(z | x_data))`.
pub fn clamped_step<'t>(
    tape: &'t Tape,
    enc: &NetParams,
    x_data: &Tensor,
    y_data: Option<(&[usize], usize)>,
    streams: &Streams,
    mode: Binding,
) -> Result<(JointBatch<'t>, BoundNet<'t>)> {
    let batch = x_data.rows();
    if x_data.is_empty() || batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let dim_z = enc.output_width() / 2;
    let x = tape.constant(x_data.clone());
    let y = match y_data {
        Some((labels, k)) => {
            if labels.len() != batch {
                return Err(Error::dim("clamped labels", &[batch], &[labels.len()]));
            }
            Some(tape.constant(one_hot(labels, k)))
        }
        None => None,
    };
    let enc_b = bind(enc, tape, mode);
    let eps = streams.normal(Purpose::ClampedEncoder, 0, &[batch, dim_z]);
    let (z, _) = encode(&enc_b, &x, y.as_ref(), &eps)?;
    Ok((
        JointBatch {
            x,
            z,
            y,
            labels: y_data.map(|(l, _)| l.to_vec()),
            source: Source::Clamped,
        },
        enc_b,
    ))
}

/// Value-only encoder application `z ~ q(z | x[, y])` with explicit noise.
fn encode_values(enc: &NetParams, x: &Tensor, y: Option<&Tensor>, eps: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let b = enc.bind_frozen(&tape);
    let xv = tape.constant(x.clone());
    let yv = y.map(|y| tape.constant(y.clone()));
    Ok(encode(&b, &xv, yv.as_ref(), eps)?.0.value())
}

/// Value-only decoder application. Returns `(x, hard labels)`.
fn decode_values(
    dec: &NetParams,
    z: &Tensor,
    eps: &Tensor,
    label_u: Option<&[f64]>,
    opts: DecodeOptions,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let tape = Tape::new();
    let b = dec.bind_frozen(&tape);
    let zv = tape.constant(z.clone());
    let out = decode(&b, &zv, eps, label_u, opts)?;
    Ok((out.x.value(), out.labels.map(|l| l.hard)))
}

/// Inference-time chain driver. Each step builds and drops its own tape, so
/// memory stays flat over thousands of steps.
pub struct Sampler<'a> {
    pub encoder: &'a NetParams,
    pub decoder: &'a NetParams,
    pub opts: DecodeOptions,
    dim_x: usize,
    dim_z: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(encoder: &'a NetParams, decoder: &'a NetParams, opts: DecodeOptions) -> Result<Self> {
        let (dim_x, dim_z) = dims(encoder, decoder, &opts)?;
        Ok(Self {
            encoder,
            decoder,
            opts,
            dim_x,
            dim_z,
        })
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_z(&self) -> usize {
        self.dim_z
    }

    fn decode_step(&self, z: Tensor, step: usize, streams: &Streams) -> Result<ChainState> {
        let batch = z.rows();
        let eps = streams.normal(Purpose::DecoderNoise, step as u64, &[batch, self.dim_x]);
        let u = self
            .opts
            .n_labels
            .map(|_| streams.uniform(Purpose::LabelDraw, step as u64, batch));
        let (x, y) = decode_values(self.decoder, &z, &eps, u.as_deref(), self.opts)?;
        Ok(ChainState {
            x,
            z,
            y,
            step,
            live_gradient: false,
        })
    }

    fn label_features(&self, state: &ChainState) -> Option<Tensor> {
        let k = self.opts.n_labels?;
        Some(match &state.y {
            Some(y) => one_hot(y, k),
            None => Tensor::full(&[state.x.rows(), k], 1.0 / k as f64),
        })
    }

    /// `z_{i+1} ~ q(z | x_i)`, `x_{i+1} ~ p(x | z_{i+1})`.
    pub fn transition(&self, state: &ChainState, streams: &Streams) -> Result<ChainState> {
        let batch = state.x.rows();
        let eps = streams.normal(Purpose::EncoderNoise, state.step as u64, &[batch, self.dim_z]);
        let y = self.label_features(state);
        let z = encode_values(self.encoder, &state.x, y.as_ref(), &eps)?;
        self.decode_step(z, state.step + 1, streams)
    }

    /// First state of a chain: `z_1 ~ N(0, I)`, `x_1 ~ p(x | z_1)`.
    pub fn start(&self, batch: usize, streams: &Streams) -> Result<ChainState> {
        if batch == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let z = streams.normal(Purpose::Prior, 0, &[batch, self.dim_z]);
        self.decode_step(z, 1, streams)
    }

    /// Runs `steps` chain steps from the prior, calling `visit` on each state.
    pub fn run(
        &self,
        batch: usize,
        steps: usize,
        streams: &Streams,
        mut visit: impl FnMut(&ChainState) -> Result<()>,
    ) -> Result<ChainState> {
        if steps < 1 {
            return Err(Error::Config("chain length must be at least 1".into()));
        }
        let mut state = self.start(batch, streams)?;
        visit(&state)?;
        for _ in 1..steps {
            state = self.transition(&state, streams)?;
            visit(&state)?;
        }
        Ok(state)
    }

    /// Continues a chain from a saved state for `extra` more steps.
    pub fn resume(
        &self,
        from: &ChainState,
        extra: usize,
        streams: &Streams,
        mut visit: impl FnMut(&ChainState) -> Result<()>,
    ) -> Result<ChainState> {
        let mut state = from.clone();
        for _ in 0..extra {
            state = self.transition(&state, streams)?;
            visit(&state)?;
        }
        Ok(state)
    }

    /// Runs the transition operator while overwriting the observed
    /// coordinates of `x` with `x_obs` after every decoder sample.
    ///
    /// The chain starts from `x_obs` itself (free coordinates as given).
    /// Returns states `1..=steps`.
    pub fn inpaint(
        &self,
        x_obs: &Tensor,
        mask: &[bool],
        steps: usize,
        streams: &Streams,
    ) -> Result<Vec<ChainState>> {
        if x_obs.rank() != 2 || x_obs.cols() != self.dim_x || mask.len() != self.dim_x {
            return Err(Error::dim("inpaint mask", &[self.dim_x, mask.len()], x_obs.shape()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("inpainting needs at least one observed coordinate".into()));
        }
        let mut state = ChainState {
            x: x_obs.clone(),
            z: Tensor::zeros(&[x_obs.rows(), self.dim_z]),
            y: None,
            step: 0,
            live_gradient: false,
        };
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            state = self.transition(&state, streams)?;
            clamp_observed(&mut state.x, x_obs, mask);
            out.push(state.clone());
        }
        Ok(out)
    }
}

/// Overwrites the masked coordinates of every row with the observation.
pub fn clamp_observed(x: &mut Tensor, x_obs: &Tensor, mask: &[bool]) {
    for r in 0..x.rows() {
        let obs = x_obs.row(r);
        let row = x.row_mut(r);
        for (j, &m) in mask.iter().enumerate() {
            if m {
                row[j] = obs[j];
            }
        }
    }
}

/// Convenience wrapper for [`Sampler::inpaint`].
pub fn inpaint_chain(
    enc: &NetParams,
    dec: &NetParams,
    opts: DecodeOptions,
    x_obs: &Tensor,
    mask: &[bool],
    steps: usize,
    seed: u64,
) -> Result<Vec<ChainState>> {
    Sampler::new(enc, dec, opts)?.inpaint(x_obs, mask, steps, &Streams::new(seed, 0))
}
