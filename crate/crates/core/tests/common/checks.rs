//! Reusable property checks; each returns a human-readable failure or `Ok`
//! with a summary so both the focused tests and the acceptance run can use
//! them.

use gibbsnet::chains::tabular::{
    check_stationarity, simulate_histogram, tabular_stationary, tabular_transition, total_variation, TabularModel,
    TransitionOrder,
};
use gibbsnet::chains::{unclamped_chain, Binding, ChainOptions};
use gibbsnet::config::ExperimentConfig;
use gibbsnet::data::{gaussian_mixture, Dataset};
use gibbsnet::diff::{Tape, Tensor};
use gibbsnet::losses::{gen_loss, GeneratorLoss};
use gibbsnet::nets::{decode, discriminate, encode, Architecture, DecodeOptions, NetParams, Networks};
use gibbsnet::rng::{Purpose, Streams};
use gibbsnet::trainer::{Checkpoint, TrainRecord, Trainer};

use super::gradcheck::{rel_error, H};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

// ---------------------------------------------------------------------------
// Tabular stationarity oracle

/// Exact and simulated stationarity checks for one random consistent model.
pub fn tabular_case(nx: usize, nz: usize, seed: u64, sim_steps: usize) -> Check {
    let m = TabularModel::random_consistent(nx, nz, seed).map_err(|e| e.to_string())?;
    let r = check_stationarity(&m).map_err(|e| e.to_string())?;
    ensure(r.marginal_tv < 1e-10, || format!("marginal TV {:e}", r.marginal_tv))?;
    ensure(r.odd_pair_tv < 1e-10, || format!("odd-pair TV {:e}", r.odd_pair_tv))?;
    ensure(r.conditional_deviation < 1e-10, || format!("conditional deviation {:e}", r.conditional_deviation))?;

    // Independent closed form: the stationary joint of a consistent model is
    // data(x)·q(z|x).
    let t = tabular_transition(&m, TransitionOrder::EncodeThenDecode).map_err(|e| e.to_string())?;
    let pi = tabular_stationary(&t).map_err(|e| e.to_string())?;
    let mut closed = vec![0.0; nx * nz];
    for x in 0..nx {
        for z in 0..nz {
            closed[m.state(x, z)] = m.data_dist[x] * m.q_z_given_x[x][z];
        }
    }
    let exact_tv = total_variation(&pi, &closed);
    ensure(exact_tv < 1e-10, || format!("stationary vs data joint TV {exact_tv:e}"))?;

    let hist = simulate_histogram(&t, sim_steps, 0, seed ^ 0xabc);
    let sim_tv = total_variation(&hist, &pi);
    ensure(sim_tv < 0.02, || format!("simulated TV {sim_tv}"))?;
    Ok(format!("|X|={nx} |Z|={nz} max report {:.1e} sim TV {sim_tv:.4}", r.max_value()))
}

// ---------------------------------------------------------------------------
// Single-step gradient rule

/// Random networks with encoder and decoder weights halved so an untrained
/// chain stays bounded; otherwise long chains can drive the discriminator
/// into saturation, where every gradient vanishes and support says nothing.
fn small_nets(seed: u64) -> Networks {
    let mut n = Networks::init(
        &Architecture {
            dim_x: 2,
            dim_z: 2,
            hidden: vec![5],
            n_labels: None,
        },
        seed,
    )
    .unwrap();
    for net in [&mut n.encoder, &mut n.decoder] {
        for t in net.tensors_mut() {
            for v in t.data_mut() {
                *v *= 0.5;
            }
        }
    }
    n
}

const BATCH: usize = 3;

fn chain_opts(n: usize) -> ChainOptions {
    ChainOptions {
        n_steps: n,
        decode: DecodeOptions {
            stochastic: true,
            n_labels: None,
        },
    }
}

/// Loss of the final pair produced by re-running the last step with
/// separate `enc_last`/`dec_last` parameters on top of a frozen prefix.
fn final_step_loss(nets: &Networks, enc_last: &NetParams, dec_last: &NetParams, n: usize, s: &Streams) -> f64 {
    let tape = Tape::new();
    // The prefix: frozen chain of n-1 steps, identical noise.
    let prefix = unclamped_chain(&tape, &nets.encoder, &nets.decoder, chain_opts(n - 1), BATCH, s, Binding::Frozen)
        .unwrap();
    let x_prev = prefix.pair.x.detach();
    let eps_z = s.normal(Purpose::EncoderNoise, (n - 1) as u64, &[BATCH, 2]);
    let (z, _) = encode(&enc_last.bind_frozen(&tape), &x_prev, None, &eps_z).unwrap();
    let eps_x = s.normal(Purpose::DecoderNoise, n as u64, &[BATCH, 2]);
    let out = decode(&dec_last.bind_frozen(&tape), &z, &eps_x, None, chain_opts(n).decode).unwrap();
    let d = discriminate(&nets.discriminator.bind_frozen(&tape), &out.x, &z, None).unwrap();
    gen_loss(&d, GeneratorLoss::NonSaturating).unwrap().value().item().unwrap()
}

/// Gradient support of the unclamped pair for an `n`-step chain: only the
/// final encoder and decoder applications receive gradient, and their
/// gradients match finite differences of a final-step-only perturbation.
pub fn single_step_support(n: usize, seed: u64) -> Check {
    let nets = small_nets(seed);
    let s = Streams::new(seed, 0);
    let tape = Tape::new();
    let run = unclamped_chain(&tape, &nets.encoder, &nets.decoder, chain_opts(n), BATCH, &s, Binding::Trainable)
        .map_err(|e| e.to_string())?;
    let d = discriminate(&nets.discriminator.bind_frozen(&tape), &run.pair.x, &run.pair.z, None).unwrap();
    ensure(d.value().data().iter().all(|&v| v > 1e-9 && v < 1.0 - 1e-9), || {
        format!("discriminator saturated on the chain output: {:?}", d.value().data())
    })?;
    let loss = gen_loss(&d, GeneratorLoss::NonSaturating).unwrap();
    let g = tape.backward(loss).unwrap();

    ensure(run.decoder_steps.len() == n && run.encoder_steps.len() == n - 1, || {
        format!("{} decoder / {} encoder bindings", run.decoder_steps.len(), run.encoder_steps.len())
    })?;
    let nonzero = |ts: &[Tensor]| ts.iter().any(|t| t.data().iter().any(|&v| v != 0.0));
    let zero = |ts: &[Tensor]| ts.iter().all(|t| t.data().iter().all(|&v| v == 0.0));
    for (i, b) in run.decoder_steps.iter().enumerate() {
        let gr = b.grads(&g).unwrap();
        if i + 1 < n {
            ensure(zero(&gr), || format!("decoder step {} has gradient", i + 1))?;
        } else {
            ensure(nonzero(&gr), || "final decoder step has no gradient".into())?;
        }
    }
    for (i, b) in run.encoder_steps.iter().enumerate() {
        let gr = b.grads(&g).unwrap();
        if i + 2 < n {
            ensure(zero(&gr), || format!("encoder step {} has gradient", i + 1))?;
        } else {
            ensure(nonzero(&gr), || "final encoder step has no gradient".into())?;
        }
    }

    // Finite differences on the final step's parameters only.
    let base = final_step_loss(&nets, &nets.encoder, &nets.decoder, n, &s);
    let direct = {
        let t2 = Tape::new();
        let r = unclamped_chain(&t2, &nets.encoder, &nets.decoder, chain_opts(n), BATCH, &s, Binding::Frozen).unwrap();
        let d = discriminate(&nets.discriminator.bind_frozen(&t2), &r.pair.x, &r.pair.z, None).unwrap();
        gen_loss(&d, GeneratorLoss::NonSaturating).unwrap().value().item().unwrap()
    };
    ensure(base == direct, || format!("re-run final step {base} != chain {direct}"))?;

    let mut worst: f64 = 0.0;
    let enc_grad = run.encoder_steps.last().unwrap().grads(&g).unwrap();
    let dec_grad = run.decoder_steps.last().unwrap().grads(&g).unwrap();
    for (which, grads) in [(0, &enc_grad), (1, &dec_grad)] {
        for (k, t) in grads.iter().enumerate() {
            for j in 0..t.len() {
                let perturbed = |delta: f64| {
                    let (mut e, mut d) = (nets.encoder.clone(), nets.decoder.clone());
                    let net = if which == 0 { &mut e } else { &mut d };
                    net.tensors_mut()[k].data_mut()[j] += delta;
                    final_step_loss(&nets, &e, &d, n, &s)
                };
                let numeric = (perturbed(H) - perturbed(-H)) / (2.0 * H);
                worst = worst.max(rel_error(t.data()[j], numeric));
            }
        }
    }
    ensure(worst < 1e-3, || format!("final-step finite-difference error {worst:e}"))?;
    Ok(format!("N={n}: support = final step only, FD error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// Training runs

pub fn tiny_config(n_steps: usize, seed: u64) -> (ExperimentConfig, Dataset) {
    let mut c = ExperimentConfig::default();
    c.train.n_steps = n_steps;
    c.train.hidden = vec![16, 16];
    c.train.batch_size = 32;
    c.train.seed = seed;
    c.train.adam.lr = 5e-4;
    let d = gaussian_mixture(4, 500, 2.0, 0.1, seed, false).unwrap();
    (c, d)
}

fn record_bits(r: &TrainRecord) -> [u64; 5] {
    [r.disc_loss, r.gen_loss, r.clamped_gen_loss, r.d_clamped, r.d_unclamped].map(f64::to_bits)
}

/// One-step GibbsNet and the standalone ALI trainer agree bit for bit.
pub fn ali_equivalence(config: ExperimentConfig, data: Dataset, iterations: usize) -> Check {
    let mut config = config;
    config.train.n_steps = 1;
    let mut g = Trainer::new(config.clone(), data.clone()).map_err(|e| e.to_string())?;
    let mut a = Trainer::new_ali(config, data).map_err(|e| e.to_string())?;
    for it in 0..iterations {
        let rg = g.step().map_err(|e| e.to_string())?;
        let ra = a.step().map_err(|e| e.to_string())?;
        ensure(record_bits(&rg) == record_bits(&ra), || format!("losses differ at iteration {it}"))?;
        ensure(g.state == a.state, || format!("parameters or optimizer state differ at iteration {it}"))?;
    }
    Ok(format!("{iterations} iterations bit-identical"))
}

fn run_records(t: &mut Trainer, n: usize) -> Result<Vec<[u64; 5]>, String> {
    (0..n).map(|_| t.step().map(|r| record_bits(&r)).map_err(|e| e.to_string())).collect()
}

/// Two runs from the same config agree bit for bit, and a run resumed from
/// a serialized checkpoint matches the uninterrupted one.
pub fn determinism_and_resume(config: ExperimentConfig, data: Dataset, first: usize, second: usize) -> Check {
    let mut a = Trainer::new(config.clone(), data.clone()).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(config.clone(), data.clone()).map_err(|e| e.to_string())?;
    let ra = run_records(&mut a, first + second)?;
    let rb = run_records(&mut b, first + second)?;
    ensure(ra == rb && a.state == b.state, || "two identical runs diverged".into())?;
    ensure(
        a.checkpoint().to_bytes() == b.checkpoint().to_bytes(),
        || "checkpoint bytes differ between identical runs".into(),
    )?;

    let mut c = Trainer::new(config, data.clone()).map_err(|e| e.to_string())?;
    let rc1 = run_records(&mut c, first)?;
    let bytes = c.checkpoint().to_bytes();
    drop(c);
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::from_checkpoint(ck, data).map_err(|e| e.to_string())?;
    let rc2 = run_records(&mut resumed, second)?;
    let joined: Vec<_> = rc1.into_iter().chain(rc2).collect();
    ensure(joined == ra, || "resumed records differ".into())?;
    ensure(resumed.state == a.state, || "resumed state differs".into())?;
    Ok(format!("{} iterations reproducible; resume at {first} exact", first + second))
}
