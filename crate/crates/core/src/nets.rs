//! Encoder `q(z|x)`, decoder `p(x|z)` and joint discriminator `D(x, z)`.
//!
//! All three are plain MLPs with leaky-relu hidden layers. The encoder and
//! the continuous part of the decoder end in a diagonal Gaussian head
//! (mean and log-variance); the decoder optionally carries a categorical
//! label head next to it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{softmax_in_place, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{mix, normal_tensor};

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 4.0;
/// Discriminator outputs are clamped into `[D_FLOOR, 1 - D_FLOOR]`.
pub const D_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Encoder,
    Decoder,
    Discriminator,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::Decoder => 1,
            Role::Discriminator => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Role::Encoder),
            1 => Some(Role::Decoder),
            2 => Some(Role::Discriminator),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

/// One affine layer: `y = x · weightᵀ + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    role: Role,
    layers: Vec<Layer>,
    activations: Vec<Activation>,
}

/// He-initialized MLP with widths `sizes[0] -> ... -> sizes[last]`.
pub fn init_params(sizes: &[usize], seed: u64, role: Role) -> Result<NetParams> {
    if sizes.len() < 2 {
        return Err(Error::Config(format!(
            "{role:?} needs at least an input and an output width, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!("{role:?} has a zero-width layer: {sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, role.tag() as u64]));
    let n = sizes.len() - 1;
    let mut layers = Vec::with_capacity(n);
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = normal_tensor(&mut rng, &[fan_out, fan_in]).map(|v| v * std);
        layers.push(Layer {
            weight,
            bias: Tensor::zeros(&[fan_out]),
        });
    }
    let mut activations = vec![Activation::LeakyRelu; n];
    activations[n - 1] = Activation::Identity;
    NetParams::new(role, layers, activations)
}

impl NetParams {
    pub fn new(role: Role, layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::Config("layer and activation lists must be non-empty and equal".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let ws = l.weight.shape();
            if ws.len() != 2 || l.bias.shape() != [ws[0]] {
                return Err(Error::dim("layer", ws, l.bias.shape()));
            }
            if i > 0 && layers[i - 1].weight.shape()[0] != ws[1] {
                return Err(Error::dim("layer chain", layers[i - 1].weight.shape(), ws));
            }
        }
        Ok(Self {
            role,
            layers,
            activations,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[0]
    }

    /// Layer widths including input and output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_width()];
        s.extend(self.layers.iter().map(|l| l.weight.shape()[0]));
        s
    }

    /// Parameter tensors in `[w0, b0, w1, b1, ...]` order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundNet<'t> {
        self.bind_with(tape, true)
    }

    /// Records the parameters as constants (inference, or the other side of
    /// an adversarial update).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundNet<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundNet<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundNet {
            role: self.role,
            layers: self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
            activations: self.activations.clone(),
        }
    }
}

/// A network whose parameters have been recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundNet<'t> {
    role: Role,
    layers: Vec<(Var<'t>, Var<'t>)>,
    activations: Vec<Activation>,
}

impl<'t> BoundNet<'t> {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].0.shape()[0]
    }

    pub fn forward(&self, input: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *input;
        for ((w, b), act) in self.layers.iter().zip(&self.activations) {
            h = h.matmul(&w.t()?)?.add_bias(b)?;
            if *act == Activation::LeakyRelu {
                h = h.leaky_relu();
            }
        }
        Ok(h)
    }

    /// Leaf handles in the same order as [`NetParams::tensors`].
    pub fn params(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Per-tensor gradients in [`NetParams::tensors`] order.
    pub fn grads(&self, g: &Gradients) -> Result<Vec<Tensor>> {
        self.params().into_iter().map(|v| g.wrt(v).cloned()).collect()
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::Contract(format!("expected {role:?} network, got {:?}", self.role)))
        }
    }
}

/// Reparameterized diagonal Gaussian: `sample = mean + exp(0.5·log_var)·ε`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead<'t> {
    pub mean: Var<'t>,
    /// Already clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Var<'t>,
}

impl<'t> GaussianHead<'t> {
    fn from_output(out: &Var<'t>, offset: usize, dim: usize) -> Result<Self> {
        let mean = out.slice_cols(offset, offset + dim)?;
        let log_var = out
            .slice_cols(offset + dim, offset + 2 * dim)?
            .clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(Self { mean, log_var })
    }

    pub fn std(&self) -> Tensor {
        self.log_var.value().map(|lv| (0.5 * lv).exp())
    }

    /// `ε` is a constant: no gradient reaches it.
    pub fn sample(&self, eps: &Tensor) -> Result<Var<'t>> {
        let tape = self.mean.tape();
        let shape = self.mean.shape();
        if eps.shape() != shape.as_slice() {
            return Err(Error::dim("gaussian sample", &shape, eps.shape()));
        }
        let std = self.log_var.scale(0.5).exp();
        let noise = tape.constant(eps.clone());
        self.mean.add(&std.mul(&noise)?)
    }
}

/// Categorical label draw from the decoder's label head.
#[derive(Debug, Clone)]
pub struct LabelSample<'t> {
    pub logits: Var<'t>,
    pub probs: Var<'t>,
    /// Hard class index per row.
    pub hard: Vec<usize>,
    /// Straight-through features: value is the one-hot of `hard`, gradient is
    /// that of `probs`.
    pub features: Var<'t>,
}

/// Index of the class selected by a uniform draw `u` under `probs`.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &y) in labels.iter().enumerate() {
        t.row_mut(r)[y] = 1.0;
    }
    t
}

/// Softmax probabilities of each row of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Encodes `x` (with optional label features) into a sampled `z`.
pub fn encode<'t>(
    net: &BoundNet<'t>,
    x: &Var<'t>,
    y: Option<&Var<'t>>,
    eps: &Tensor,
) -> Result<(Var<'t>, GaussianHead<'t>)> {
    net.expect_role(Role::Encoder)?;
    let input = match y {
        Some(y) => x.tape().concat_cols(&[*x, *y])?,
        None => *x,
    };
    let out = net.forward(&input)?;
    let width = out.shape()[1];
    if width % 2 != 0 {
        return Err(Error::dim("encoder head", &[width], &[2]));
    }
    let head = GaussianHead::from_output(&out, 0, width / 2)?;
    let z = head.sample(eps)?;
    Ok((z, head))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    /// When false, `x` is the head mean and the noise is ignored.
    pub stochastic: bool,
    pub n_labels: Option<usize>,
}

pub struct DecodeOutput<'t> {
    pub x: Var<'t>,
    pub head: GaussianHead<'t>,
    pub labels: Option<LabelSample<'t>>,
}

/// Decodes `z` into a sampled `x` and, when enabled, a label draw.
///
/// `label_u` holds one uniform draw per row and is required when
/// `opts.n_labels` is set.
pub fn decode<'t>(
    net: &BoundNet<'t>,
    z: &Var<'t>,
    eps: &Tensor,
    label_u: Option<&[f64]>,
    opts: DecodeOptions,
) -> Result<DecodeOutput<'t>> {
    net.expect_role(Role::Decoder)?;
    let out = net.forward(z)?;
    let width = out.shape()[1];
    let k = opts.n_labels.unwrap_or(0);
    if width < k || (width - k) % 2 != 0 {
        return Err(Error::dim("decoder head", &[width], &[k]));
    }
    let dim_x = (width - k) / 2;
    let head = GaussianHead::from_output(&out, 0, dim_x)?;
    let x = if opts.stochastic {
        head.sample(eps)?
    } else {
        head.mean
    };
    let labels = match opts.n_labels {
        None => None,
        Some(k) => {
            let u = label_u.ok_or_else(|| Error::Contract("label draws missing".into()))?;
            let logits = out.slice_cols(2 * dim_x, 2 * dim_x + k)?;
            let probs = logits.softmax_rows()?;
            let pv = probs.value();
            if u.len() != pv.rows() {
                return Err(Error::dim("label draws", &[pv.rows()], &[u.len()]));
            }
            let hard: Vec<usize> = (0..pv.rows()).map(|r| sample_categorical(pv.row(r), u[r])).collect();
            let tape = z.tape();
            let onehot = tape.constant(one_hot(&hard, k));
            let features = onehot.add(&probs.sub(&probs.detach())?)?;
            Some(LabelSample {
                logits,
                probs,
                hard,
                features,
            })
        }
    };
    Ok(DecodeOutput { x, head, labels })
}

/// `D(x, z[, y])` in `[D_FLOOR, 1 - D_FLOOR]`, shape `[batch, 1]`.
pub fn discriminate<'t>(
    net: &BoundNet<'t>,
    x: &Var<'t>,
    z: &Var<'t>,
    y: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    net.expect_role(Role::Discriminator)?;
    let tape = x.tape();
    let input = match y {
        Some(y) => tape.concat_cols(&[*x, *z, *y])?,
        None => tape.concat_cols(&[*x, *z])?,
    };
    Ok(net.forward(&input)?.sigmoid().clamp(D_FLOOR, 1.0 - D_FLOOR))
}

/// Layer widths shared by the three networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub dim_x: usize,
    pub dim_z: usize,
    pub hidden: Vec<usize>,
    pub n_labels: Option<usize>,
}

impl Architecture {
    fn with_hidden(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.hidden);
        s.push(output);
        s
    }

    pub fn encoder_sizes(&self) -> Vec<usize> {
        self.with_hidden(self.dim_x + self.n_labels.unwrap_or(0), 2 * self.dim_z)
    }

    pub fn decoder_sizes(&self) -> Vec<usize> {
        self.with_hidden(self.dim_z, 2 * self.dim_x + self.n_labels.unwrap_or(0))
    }

    pub fn discriminator_sizes(&self) -> Vec<usize> {
        self.with_hidden(self.dim_x + self.dim_z + self.n_labels.unwrap_or(0), 1)
    }
}

/// The three networks of one model. They share no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub encoder: NetParams,
    pub decoder: NetParams,
    pub discriminator: NetParams,
}

impl Networks {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        Ok(Self {
            encoder: init_params(&arch.encoder_sizes(), seed, Role::Encoder)?,
            decoder: init_params(&arch.decoder_sizes(), seed, Role::Decoder)?,
            discriminator: init_params(&arch.discriminator_sizes(), seed, Role::Discriminator)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.discriminator.is_finite()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NetParams> {
        [&self.encoder, &self.decoder, &self.discriminator].into_iter()
    }
}
