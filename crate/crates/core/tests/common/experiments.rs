//! Desk-scale training experiments on 2-D mixtures. Each function trains
//! one model per seed (seeds run in parallel when available) and reports the
//! per-seed measurements alongside a pass/fail verdict.

use gibbsnet::config::ExperimentConfig;
use gibbsnet::data::{exact_conditional, mixture_from_centers, ring_centers, Dataset, DatasetMeta};
use gibbsnet::diff::Tensor;
use gibbsnet::eval::{
    conditional_tv, encode_latents, label_agreement, linear_probe, long_chain_stability, ProbeOptions, StabilityOptions,
};
use gibbsnet::losses::GeneratorLoss;
use gibbsnet::parallel::run_seeds;
use gibbsnet::rng::Streams;
use gibbsnet::trainer::Trainer;

use super::checks::Check;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub const PROBE_ITERATIONS: usize = 5_000;
pub const INPAINT_ITERATIONS: usize = 5_000;
pub const LABEL_ITERATIONS: usize = 5_000;

/// Small networks, two discriminator updates per generator update at a
/// higher discriminator rate, and linear learning-rate decay; shared by
/// every experiment.
pub fn base_config(n_steps: usize, iterations: usize, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train.n_steps = n_steps;
    c.train.hidden = vec![64, 64];
    c.train.iterations = iterations;
    c.train.seed = seed;
    c.train.adam.lr = 2e-4;
    c.train.disc_lr = Some(4e-4);
    c.train.loss.disc_steps_per_gen_step = 2;
    c.train.lr_decay = true;
    c.train.decoder_stochastic = false;
    c.train.loss.generator_loss = GeneratorLoss::NonSaturating;
    c.data.data_seed = seed;
    c
}

fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<Trainer, String> {
    let mut t = Trainer::new(cfg.clone(), data.clone()).map_err(|e| e.to_string())?;
    for _ in 0..cfg.train.iterations {
        t.step().map_err(|e| e.to_string())?;
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Mode coverage and long-chain stability on the 8-mode ring

#[derive(Debug, Clone)]
pub struct RingOutcome {
    pub min_fraction_20: f64,
    pub unassigned_20: f64,
    pub drift_3_2000: f64,
}

impl RingOutcome {
    pub fn passes(&self) -> bool {
        self.min_fraction_20 >= 0.05 && self.unassigned_20 < 0.2 && self.drift_3_2000 < 0.2
    }
}

pub fn ring_run(cfg: &ExperimentConfig, chain_steps: usize) -> Result<RingOutcome, String> {
    let data = cfg.data.build().map_err(|e| e.to_string())?;
    let t = train(cfg, &data)?;
    let sampler = t.state.sampler(&cfg.train).map_err(|e| e.to_string())?;
    let opts = StabilityOptions {
        steps: chain_steps,
        probe_every: 20,
        chains: 2000,
        mmd_samples: 300,
        threshold_sigmas: 3.0,
        seed: cfg.train.seed ^ 0x5eed,
    };
    let series = long_chain_stability(&sampler, &data, 3, opts).map_err(|e| e.to_string())?;
    let at = |step: usize| {
        series
            .iter()
            .find(|p| p.step == step)
            .and_then(|p| p.coverage.clone())
            .ok_or_else(|| format!("no coverage at step {step}"))
    };
    let (c3, c20, cn) = (at(3)?, at(20)?, at(chain_steps)?);
    Ok(RingOutcome {
        min_fraction_20: c20.min_fraction(),
        unassigned_20: c20.unassigned,
        drift_3_2000: c3.l1(&cn),
    })
}

pub fn ring_config(seed: u64, iterations: usize) -> ExperimentConfig {
    base_config(3, iterations, seed)
}

pub fn mode_coverage_and_stability(iterations: usize) -> Check {
    let results = run_seeds(&SEEDS, |s| ring_run(&ring_config(s, iterations), 2000));
    let lines: Vec<String> = results
        .iter()
        .map(|r| match r {
            Ok(o) => format!(
                "min {:.3} unassigned {:.3} drift {:.3}",
                o.min_fraction_20, o.unassigned_20, o.drift_3_2000
            ),
            Err(e) => format!("error: {e}"),
        })
        .collect();
    let n = results.iter().filter(|r| r.as_ref().is_ok_and(RingOutcome::passes)).count();
    let summary = format!("{n}/5 seeds pass [{}]", lines.join("; "));
    if n >= 4 { Ok(summary) } else { Err(summary) }
}

// ---------------------------------------------------------------------------
// Latent probe: N=3 versus the one-step (ALI) model

pub fn labeled_three(seed: u64, n: usize) -> Result<Dataset, String> {
    mixture_from_centers(ring_centers(3, 1.0), 0.35, n, seed, true).map_err(|e| e.to_string())
}

pub fn probe_accuracy(n_steps: usize, seed: u64, iterations: usize) -> Result<f64, String> {
    let cfg = base_config(n_steps, iterations, seed);
    let data = labeled_three(seed, 4000)?;
    let test = labeled_three(seed + 1000, 2000)?;
    let t = train(&cfg, &data)?;
    let enc = &t.state.nets.encoder;
    let zt = encode_latents(enc, &data.x, None, seed).map_err(|e| e.to_string())?;
    let zs = encode_latents(enc, &test.x, None, seed + 1).map_err(|e| e.to_string())?;
    let opts = ProbeOptions {
        seed,
        ..ProbeOptions::default()
    };
    let r = linear_probe(&zt, data.y.as_ref().unwrap(), &zs, test.y.as_ref().unwrap(), opts)
        .map_err(|e| e.to_string())?;
    Ok(r.value)
}

pub fn latent_expressiveness(iterations: usize) -> Check {
    let pairs = run_seeds(&SEEDS, |s| {
        Ok::<_, String>((probe_accuracy(3, s, iterations)?, probe_accuracy(1, s, iterations)?))
    });
    // A failed pair counts as a loss with zero gain.
    let wins = pairs.iter().filter(|p| p.as_ref().is_ok_and(|(g, a)| g >= a)).count();
    let mean_gain =
        100.0 * pairs.iter().map(|p| p.as_ref().map_or(0.0, |(g, a)| g - a)).sum::<f64>() / pairs.len() as f64;
    let detail: Vec<String> = pairs
        .iter()
        .map(|p| match p {
            Ok((g, a)) => format!("{:.1}/{:.1}", 100.0 * g, 100.0 * a),
            Err(e) => format!("error: {e}"),
        })
        .collect();
    let summary = format!("N=3 >= N=1 in {wins}/5, mean gain {mean_gain:.2} points [{}]", detail.join(" "));
    if wins >= 4 && mean_gain > 2.0 { Ok(summary) } else { Err(summary) }
}

// ---------------------------------------------------------------------------
// Inpainting on a two-mode mixture

pub fn two_mode_config(seed: u64, iterations: usize) -> ExperimentConfig {
    let mut c = base_config(3, iterations, seed);
    c.data.dataset = gibbsnet::config::DatasetKind::Centers;
    c.data.centers = vec![vec![-1.0, -1.0], vec![1.0, 1.0]];
    c.data.sigma = 0.1;
    c
}

/// Worst TV between the inpainted free coordinate at step 20 and its exact
/// conditional, over observations drawn from the data. Also checks that the
/// observed coordinate never moves.
pub fn inpainting_run(cfg: &ExperimentConfig) -> Result<f64, String> {
    let data = cfg.data.build().map_err(|e| e.to_string())?;
    let meta = data.meta.clone().ok_or("no metadata")?;
    let t = train(cfg, &data)?;
    let sampler = t.state.sampler(&cfg.train).map_err(|e| e.to_string())?;
    let mask = [false, true];
    let mut worst: f64 = 0.0;
    for (k, row) in [0usize, 1, 2, 3].iter().enumerate() {
        let obs_row = data.x.row(*row).to_vec();
        let batch = 1000;
        let obs = Tensor::from_rows(&vec![obs_row.clone(); batch]).map_err(|e| e.to_string())?;
        let streams = Streams::new(cfg.train.seed ^ 0x1a, k as u64);
        let states = sampler.inpaint(&obs, &mask, 20, &streams).map_err(|e| e.to_string())?;
        for s in &states {
            for r in 0..batch {
                if s.x.row(r)[1].to_bits() != obs_row[1].to_bits() {
                    return Err(format!("observed coordinate changed at step {}", s.step));
                }
            }
        }
        let cond = exact_conditional(&meta, &obs_row, &mask).map_err(|e| e.to_string())?;
        let tv = conditional_tv(&states[19].x, &cond, 3.0).map_err(|e| e.to_string())?.value;
        worst = worst.max(tv);
    }
    Ok(worst)
}

pub fn inpainting(iterations: usize) -> Check {
    let tv = inpainting_run(&two_mode_config(0, iterations))?;
    let summary = format!("observed bits exact over 20 steps; worst TV {tv:.3}");
    if tv < 0.15 { Ok(summary) } else { Err(summary) }
}

// ---------------------------------------------------------------------------
// Joint (x, y) modeling

pub fn label_config(seed: u64, iterations: usize) -> ExperimentConfig {
    let mut c = base_config(3, iterations, seed);
    c.train.label_modeling = true;
    c.train.n_labels = 3;
    c
}

pub fn label_agreement_run(cfg: &ExperimentConfig) -> Result<f64, String> {
    let data = labeled_three(cfg.train.seed, 4000)?;
    let t = train(cfg, &data)?;
    let sampler = t.state.sampler(&cfg.train).map_err(|e| e.to_string())?;
    let last = sampler
        .run(2000, cfg.train.n_steps, &Streams::new(cfg.train.seed ^ 0x1b, 0), |_| Ok(()))
        .map_err(|e| e.to_string())?;
    let labels = last.y.ok_or("sampler produced no labels")?;
    let Some(DatasetMeta::Mixture { centers, .. }) = &data.meta else {
        return Err("not a mixture".into());
    };
    label_agreement(&last.x, &labels, centers).map_err(|e| e.to_string())
}

pub fn joint_label_modeling(iterations: usize) -> Check {
    let results = run_seeds(&SEEDS, |s| label_agreement_run(&label_config(s, iterations)));
    let n = results.iter().filter(|r| r.as_ref().is_ok_and(|&a| a > 0.8)).count();
    let detail: Vec<String> = results
        .iter()
        .map(|r| match r {
            Ok(a) => format!("{a:.3}"),
            Err(e) => format!("error: {e}"),
        })
        .collect();
    let summary = format!("{n}/5 seeds above 0.8 [{}]", detail.join(" "));
    if n >= 4 { Ok(summary) } else { Err(summary) }
}
