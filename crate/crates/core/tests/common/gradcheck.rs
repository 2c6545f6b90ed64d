//! Central finite-difference checks against the tape's reverse-mode gradients.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`;
//! the floor keeps entries whose true gradient is ~0 from dividing roundoff
//! by roundoff.

use gibbsnet::diff::{Reduce, Tape, Tensor, Var};
use gibbsnet::nets::{decode, BoundNet, discriminate, encode, init_params, DecodeOptions, NetParams, Role};
use gibbsnet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;
pub const CASES: usize = 20;

pub type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;
pub type GenFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Entries bounded away from zero (activation kinks) by `0.05`.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// entry contributes a distinct coefficient.
fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let shape = out.shape();
    if shape.iter().product::<usize>() == 1 {
        return Ok(out.sum());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = uniform(&mut rng, &shape, -1.0, 1.0);
    Ok(out.mul(&out.tape().constant(w))?.sum())
}

fn scalar_of(inputs: &[Tensor], f: OpFn, seed: u64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    project(f(&tape, &vars).unwrap(), seed).unwrap().value().item().unwrap()
}

/// Max relative error over every entry of every input.
pub fn op_error(inputs: &[Tensor], f: OpFn, seed: u64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = project(f(&tape, &vars).unwrap(), seed).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.wrt(*v).unwrap().clone();
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (scalar_of(&plus, f, seed) - scalar_of(&minus, f, seed)) / (2.0 * H);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    worst
}

macro_rules! op {
    ($name:ident, |$t:ident, $v:ident| $body:expr) => {
        fn $name<'t>($t: &'t Tape, $v: &[Var<'t>]) -> Result<Var<'t>> {
            let _ = $t;
            $body
        }
    };
}

op!(f_matmul, |t, v| v[0].matmul(&v[1]));
op!(f_transpose, |t, v| v[0].t());
op!(f_add, |t, v| v[0].add(&v[1]));
op!(f_sub, |t, v| v[0].sub(&v[1]));
op!(f_mul, |t, v| v[0].mul(&v[1]));
op!(f_scale, |t, v| Ok(v[0].scale(-1.7)));
op!(f_add_scalar, |t, v| Ok(v[0].add_scalar(0.3)));
op!(f_rsub_scalar, |t, v| Ok(v[0].rsub_scalar(1.0)));
op!(f_neg, |t, v| Ok(v[0].neg()));
op!(f_exp, |t, v| Ok(v[0].exp()));
op!(f_log, |t, v| Ok(v[0].log()));
op!(f_tanh, |t, v| Ok(v[0].tanh()));
op!(f_relu, |t, v| Ok(v[0].relu()));
op!(f_leaky_relu, |t, v| Ok(v[0].leaky_relu()));
op!(f_sigmoid, |t, v| Ok(v[0].sigmoid()));
op!(f_sum, |t, v| Ok(v[0].sum()));
op!(f_mean, |t, v| Ok(v[0].mean()));
op!(f_sum_rows, |t, v| v[0].reduce(Reduce::Sum, Some(0)));
op!(f_mean_cols, |t, v| v[0].reduce(Reduce::Mean, Some(1)));
op!(f_add_bias, |t, v| v[0].add_bias(&v[1]));
op!(f_slice_cols, |t, v| v[0].slice_cols(1, v[0].shape()[1]));
op!(f_concat_cols, |t, v| t.concat_cols(&[v[0], v[1]]));
op!(f_clamp, |t, v| Ok(v[0].clamp(-0.5, 0.5)));
op!(f_softmax_rows, |t, v| v[0].softmax_rows());

fn g_pair_matmul(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, k) = dims(rng);
    let n = rng.random_range(1..5);
    vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)]
}

fn g_same_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, c], -1.0, 1.0)]
}

fn g_rows_pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    let c2 = rng.random_range(1..4);
    vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[r, c2], -1.0, 1.0)]
}

fn g_one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![uniform(rng, &[r, c], -1.0, 1.0)]
}

fn g_kinked(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![away_from_zero(rng, &[r, c])]
}

fn g_positive(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![uniform(rng, &[r, c], 0.2, 2.0)]
}

fn g_wide(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let r = rng.random_range(1..5);
    let c = rng.random_range(2..6);
    vec![uniform(rng, &[r, c], -2.0, 2.0)]
}

fn g_clamp(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    // Inside, below and above the band, never within 0.05 of its edges.
    let (r, c) = dims(rng);
    let mut t = away_from_zero(rng, &[r, c]);
    for v in t.data_mut() {
        *v = match rng.random_range(0..3) {
            0 => v.signum() * 0.45 * v.abs() / 1.5,
            1 => 0.55 + v.abs(),
            _ => -0.55 - v.abs(),
        };
    }
    vec![t]
}

fn g_bias(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![uniform(rng, &[r, c], -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)]
}

/// Every differentiable tape operation with an input generator that keeps
/// clear of its kinks.
pub fn op_table() -> Vec<(&'static str, GenFn, OpFn)> {
    vec![
        ("matmul", g_pair_matmul, f_matmul),
        ("transpose", g_one, f_transpose),
        ("add", g_same_pair, f_add),
        ("sub", g_same_pair, f_sub),
        ("mul", g_same_pair, f_mul),
        ("scale", g_one, f_scale),
        ("add_scalar", g_one, f_add_scalar),
        ("rsub_scalar", g_one, f_rsub_scalar),
        ("neg", g_one, f_neg),
        ("exp", g_one, f_exp),
        ("log", g_positive, f_log),
        ("tanh", g_one, f_tanh),
        ("relu", g_kinked, f_relu),
        ("leaky_relu", g_kinked, f_leaky_relu),
        ("sigmoid", g_wide, f_sigmoid),
        ("sum", g_one, f_sum),
        ("mean", g_one, f_mean),
        ("reduce_sum_axis0", g_one, f_sum_rows),
        ("reduce_mean_axis1", g_one, f_mean_cols),
        ("add_bias", g_bias, f_add_bias),
        ("slice_cols", g_wide, f_slice_cols),
        ("concat_cols", g_rows_pair, f_concat_cols),
        ("clamp", g_clamp, f_clamp),
        ("softmax_rows", g_wide, f_softmax_rows),
    ]
}

/// Worst relative error of one op over `CASES` random cases.
pub fn op_worst(gen: GenFn, f: OpFn, seed: u64) -> f64 {
    (0..CASES as u64)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + c);
            op_error(&gen(&mut rng), f, c)
        })
        .fold(0.0, f64::max)
}

/// Network-level check: loss as a function of the parameters and of the
/// network inputs.
pub type NetLoss = for<'t> fn(&BoundNet<'t>, &[Var<'t>], &NetCase) -> Result<Var<'t>>;

pub struct NetCase {
    pub net: NetParams,
    pub inputs: Vec<Tensor>,
    pub eps: Tensor,
    pub label_u: Vec<f64>,
    pub n_labels: Option<usize>,
    pub seed: u64,
}

fn net_scalar(case: &NetCase, net: &NetParams, inputs: &[Tensor], loss: NetLoss) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    loss(&net.bind_frozen(&tape), &vars, case).unwrap().value().item().unwrap()
}

/// Max relative error over all parameters and all input entries.
pub fn net_error(case: &NetCase, loss: NetLoss) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let bound = case.net.bind(&tape);
    let out = loss(&bound, &vars, case).unwrap();
    let g = tape.backward(out).unwrap();
    let param_grads = bound.grads(&g).unwrap();
    let mut worst: f64 = 0.0;
    let n_tensors = case.net.tensors().len();
    for (k, analytic) in param_grads.iter().enumerate().take(n_tensors) {
        for j in 0..analytic.len() {
            let mut plus = case.net.clone();
            plus.tensors_mut()[k].data_mut()[j] += H;
            let mut minus = case.net.clone();
            minus.tensors_mut()[k].data_mut()[j] -= H;
            let numeric =
                (net_scalar(case, &plus, &case.inputs, loss) - net_scalar(case, &minus, &case.inputs, loss)) / (2.0 * H);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.wrt(*v).unwrap().clone();
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (net_scalar(case, &case.net, &plus, loss) - net_scalar(case, &case.net, &minus, loss)) / (2.0 * H);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    worst
}

fn l_encoder<'t>(b: &BoundNet<'t>, v: &[Var<'t>], c: &NetCase) -> Result<Var<'t>> {
    let (z, head) = encode(b, &v[0], v.get(1), &c.eps)?;
    let a = project(z, c.seed)?;
    let lv = project(head.log_var, c.seed + 1)?;
    a.add(&lv)
}

fn l_decoder<'t>(b: &BoundNet<'t>, v: &[Var<'t>], c: &NetCase) -> Result<Var<'t>> {
    let opts = DecodeOptions {
        stochastic: true,
        n_labels: c.n_labels,
    };
    let u = c.n_labels.map(|_| c.label_u.as_slice());
    let out = decode(b, &v[0], &c.eps, u, opts)?;
    let mut total = project(out.x, c.seed)?;
    if let Some(l) = out.labels {
        // The straight-through features are piecewise constant in value;
        // their gradient is that of `probs`, which is checked here.
        total = total.add(&project(l.probs, c.seed + 2)?)?;
    }
    Ok(total)
}

fn l_discriminator<'t>(b: &BoundNet<'t>, v: &[Var<'t>], c: &NetCase) -> Result<Var<'t>> {
    let d = discriminate(b, &v[0], &v[1], v.get(2))?;
    let loss = d.log().mean().neg().add(&d.rsub_scalar(1.0).log().mean().scale(0.3))?;
    loss.add(&project(d, c.seed)?)
}

/// Random small network of the given role plus inputs for it.
pub fn net_case(role: Role, seed: u64) -> (NetCase, NetLoss) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(2..5);
    let dim_x = rng.random_range(1..4);
    let dim_z = rng.random_range(1..4);
    let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(3..7)).collect();
    let labels = if rng.random::<bool>() { Some(rng.random_range(2..4)) } else { None };
    let sizes = |inp: usize, out: usize| {
        let mut s = vec![inp];
        s.extend(&hidden);
        s.push(out);
        s
    };
    let k = labels.unwrap_or(0);
    let (net_sizes, inputs, eps_dim, loss): (Vec<usize>, Vec<Tensor>, usize, NetLoss) = match role {
        Role::Encoder => {
            let mut inputs = vec![uniform(&mut rng, &[batch, dim_x], -1.5, 1.5)];
            if k > 0 {
                inputs.push(uniform(&mut rng, &[batch, k], 0.0, 1.0));
            }
            (sizes(dim_x + k, 2 * dim_z), inputs, dim_z, l_encoder)
        }
        Role::Decoder => (
            sizes(dim_z, 2 * dim_x + k),
            vec![uniform(&mut rng, &[batch, dim_z], -1.5, 1.5)],
            dim_x,
            l_decoder,
        ),
        Role::Discriminator => {
            let mut inputs = vec![
                uniform(&mut rng, &[batch, dim_x], -1.5, 1.5),
                uniform(&mut rng, &[batch, dim_z], -1.5, 1.5),
            ];
            if k > 0 {
                inputs.push(uniform(&mut rng, &[batch, k], 0.0, 1.0));
            }
            (sizes(dim_x + dim_z + k, 1), inputs, 1, l_discriminator)
        }
    };
    let mut net = init_params(&net_sizes, seed, role).unwrap();
    // Non-zero biases so pre-activations are not all exactly tied.
    for t in net.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let eps = uniform(&mut rng, &[batch, eps_dim], -1.5, 1.5);
    let label_u = (0..batch).map(|_| rng.random_range(0.0..1.0)).collect();
    (
        NetCase {
            net,
            inputs,
            eps,
            label_u,
            n_labels: if role == Role::Decoder { labels } else { None },
            seed,
        },
        loss,
    )
}

/// Worst relative error of a role over `CASES` random networks.
pub fn net_worst(role: Role) -> f64 {
    (0..CASES as u64)
        .map(|s| {
            let (case, loss) = net_case(role, s * 7 + role.tag() as u64);
            net_error(&case, loss)
        })
        .fold(0.0, f64::max)
}
