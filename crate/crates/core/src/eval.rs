//! Diagnostics: kernel two-sample tests, mode coverage, histogram KL,
//! frozen-latent probes and long-chain stability.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chains::Sampler;
use crate::data::{ConditionalMixture, Dataset, DatasetMeta};
use crate::diff::{kernels, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{encode, init_params, one_hot, NetParams, Role};
use crate::optim::{step_net, AdamConfig, AdamState};
use crate::parallel;
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub details: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub seed: Option<u64>,
}

impl MetricReport {
    pub fn new(name: &str, value: f64, n_samples: usize) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name}: non-finite value {value}")));
        }
        Ok(Self {
            name: name.to_string(),
            value,
            details: BTreeMap::new(),
            n_samples,
            seed: None,
        })
    }

    pub fn detail(mut self, key: impl Into<String>, value: f64) -> Self {
        self.details.insert(key.into(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn write_json_lines<W: Write>(mut w: W, reports: &[MetricReport]) -> std::io::Result<()> {
    for r in reports {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fixed multipliers applied to the median pairwise distance.
pub const BANDWIDTH_SCALES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Median pairwise distance of the pooled samples (at most 1000 rows,
/// evenly strided).
pub fn median_distance(a: &Tensor, b: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let stride = pooled.len().div_ceil(1000).max(1);
    let pts: Vec<&[f64]> = pooled.into_iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(dist2(pts[i], pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub fn median_bandwidths(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let m = median_distance(a, b);
    BANDWIDTH_SCALES.iter().map(|s| s * m).collect()
}

/// Orders the pair so that swapping the arguments reproduces the same
/// floating-point summation.
fn canonical<'a>(a: &'a Tensor, b: &'a Tensor) -> (&'a Tensor, &'a Tensor) {
    let ord = a.rows().cmp(&b.rows()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    if ord == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

/// Per-bandwidth sums of `exp(-|u - v|² / 2h²)` over all pairs, optionally
/// skipping the diagonal.
fn kernel_sums(u: &Tensor, v: &Tensor, bandwidths: &[f64], skip_diagonal: bool) -> Vec<f64> {
    let inv: Vec<f64> = bandwidths.iter().map(|h| 1.0 / (2.0 * h * h)).collect();
    let rows: Vec<usize> = (0..u.rows()).collect();
    let per_row = parallel::map(&rows, |&i| {
        let mut acc = vec![0.0; inv.len()];
        let ui = u.row(i);
        for j in 0..v.rows() {
            if skip_diagonal && i == j {
                continue;
            }
            let d = dist2(ui, v.row(j));
            for (a, c) in acc.iter_mut().zip(&inv) {
                *a += (-d * c).exp();
            }
        }
        acc
    });
    let mut total = vec![0.0; inv.len()];
    for r in per_row {
        for (t, x) in total.iter_mut().zip(r) {
            *t += x;
        }
    }
    total
}

/// Unbiased MMD² with an RBF kernel, summed over `bandwidths`.
///
/// `details` holds the per-bandwidth unbiased terms and the biased total
/// under `biased`. The unbiased value can be slightly negative.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidths: &[f64]) -> Result<MetricReport> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::dim("mmd_rbf", a.shape(), b.shape()));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Contract("mmd needs at least 2 samples per side".into()));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Contract("mmd bandwidths must be positive".into()));
    }
    let (x, y) = canonical(a, b);
    let (m, n) = (x.rows() as f64, y.rows() as f64);
    let kxx = kernel_sums(x, x, bandwidths, true);
    let kyy = kernel_sums(y, y, bandwidths, true);
    let kxy = kernel_sums(x, y, bandwidths, false);

    let mut value = 0.0;
    let mut biased = 0.0;
    let mut details = BTreeMap::new();
    for (i, h) in bandwidths.iter().enumerate() {
        let u = kxx[i] / (m * (m - 1.0)) + kyy[i] / (n * (n - 1.0)) - 2.0 * kxy[i] / (m * n);
        // Biased form adds the diagonal k(x, x) = 1 back in.
        let bsd = (kxx[i] + m) / (m * m) + (kyy[i] + n) / (n * n) - 2.0 * kxy[i] / (m * n);
        value += u;
        biased += bsd;
        details.insert(format!("h={h}"), u);
    }
    let mut r = MetricReport::new("mmd_rbf", value, a.rows() + b.rows())?;
    details.insert("biased".into(), biased);
    r.details = details;
    Ok(r)
}

/// Mode attribution of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub fractions: Vec<f64>,
    pub unassigned: f64,
    pub n: usize,
}

impl Coverage {
    /// L1 distance between mode fractions.
    pub fn l1(&self, other: &Coverage) -> f64 {
        self.fractions.iter().zip(&other.fractions).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn min_fraction(&self) -> f64 {
        self.fractions.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn report(&self) -> Result<MetricReport> {
        let mut r = MetricReport::new("mode_coverage", 1.0 - self.unassigned, self.n)?;
        for (k, f) in self.fractions.iter().enumerate() {
            r = r.detail(format!("mode_{k}"), *f);
        }
        Ok(r.detail("unassigned", self.unassigned))
    }
}

/// Nearest center within `radius` for each row, if any.
pub fn assign_modes(samples: &Tensor, centers: &[Vec<f64>], radius: f64) -> Vec<Option<usize>> {
    let r2 = radius * radius;
    (0..samples.rows())
        .map(|i| {
            let row = samples.row(i);
            let (k, d) = centers
                .iter()
                .enumerate()
                .map(|(k, c)| (k, dist2(row, c)))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            (d <= r2).then_some(k)
        })
        .collect()
}

/// Fraction of samples within `threshold_sigmas·σ` of each mixture center.
pub fn mode_coverage(samples: &Tensor, meta: &DatasetMeta, threshold_sigmas: f64) -> Result<Coverage> {
    let DatasetMeta::Mixture { centers, sigma } = meta else {
        return Err(Error::Unsupported("mode coverage needs a Gaussian mixture".into()));
    };
    if samples.rank() != 2 || samples.cols() != centers[0].len() {
        return Err(Error::dim("mode_coverage", samples.shape(), &[centers[0].len()]));
    }
    if samples.rows() == 0 {
        return Err(Error::Contract("mode coverage of an empty sample".into()));
    }
    let n = samples.rows();
    let mut counts = vec![0usize; centers.len()];
    let mut none = 0usize;
    for a in assign_modes(samples, centers, threshold_sigmas * sigma) {
        match a {
            Some(k) => counts[k] += 1,
            None => none += 1,
        }
    }
    Ok(Coverage {
        fractions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        unassigned: none as f64 / n as f64,
        n,
    })
}

/// Fraction of rows whose label equals the index of the nearest center.
pub fn label_agreement(samples: &Tensor, labels: &[usize], centers: &[Vec<f64>]) -> Result<f64> {
    if labels.len() != samples.rows() || samples.rows() == 0 {
        return Err(Error::dim("label_agreement", samples.shape(), &[labels.len()]));
    }
    let nearest = assign_modes(samples, centers, f64::INFINITY);
    let hits = nearest.iter().zip(labels).filter(|(k, y)| **k == Some(**y)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Total variation between the empirical mode attribution of the free
/// coordinates and the exact posterior mode weights. Unattributed samples
/// form an extra category with target mass zero.
pub fn conditional_tv(samples: &Tensor, cond: &ConditionalMixture, threshold_sigmas: f64) -> Result<MetricReport> {
    let n = samples.rows();
    if n == 0 {
        return Err(Error::Contract("empty sample".into()));
    }
    let k = cond.weights.len();
    let mut counts = vec![0usize; k + 1];
    for i in 0..n {
        match cond.assign(samples.row(i), threshold_sigmas) {
            Some(m) => counts[m] += 1,
            None => counts[k] += 1,
        }
    }
    let mut tv = 0.0;
    let mut r = MetricReport::new("conditional_tv", 0.0, n)?;
    for m in 0..=k {
        let emp = counts[m] as f64 / n as f64;
        let target = cond.weights.get(m).copied().unwrap_or(0.0);
        tv += (emp - target).abs();
        let key = if m < k { format!("mode_{m}") } else { "unassigned".to_string() };
        r = r.detail(key, emp);
    }
    r.value = 0.5 * tv;
    Ok(r)
}

fn histogram(v: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mut counts = vec![0.0; bins];
    for &x in v {
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite value in histogram input".into()));
        }
        let b = ((x - lo) / (hi - lo) * bins as f64).floor();
        let b = b.clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1.0;
    }
    // Additive smoothing of 1/(n·bins) per bin, then renormalize.
    let alpha = 1.0 / (n * bins as f64);
    let total = 1.0 + bins as f64 * alpha;
    Ok(counts.iter().map(|c| (c / n + alpha) / total).collect())
}

/// `KL(hist(a) ‖ hist(b))` in nats on a shared grid over `range`. Values
/// outside the range fall into the edge bins.
pub fn histogram_kl(a: &[f64], b: &[f64], bins: usize, range: (f64, f64)) -> Result<MetricReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("histogram_kl of an empty sample".into()));
    }
    if bins == 0 || !(range.0 < range.1) {
        return Err(Error::Contract("histogram_kl needs bins > 0 and lo < hi".into()));
    }
    let p = histogram(a, bins, range.0, range.1)?;
    let q = histogram(b, bins, range.0, range.1)?;
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(MetricReport::new("histogram_kl", kl.max(0.0), a.len() + b.len())?.detail("raw", kl))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeModel {
    /// Multinomial logistic regression.
    Logistic,
    /// One hidden leaky-relu layer of the given width.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub model: ProbeModel,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            model: ProbeModel::Logistic,
            epochs: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

fn standardize(train: &Tensor, test: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (train.rows() as f64, train.cols());
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..train.rows() {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n;
        }
    }
    for i in 0..train.rows() {
        for j in 0..d {
            sd[j] += (train.row(i)[j] - mean[j]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / sd[j];
            }
        }
        out
    };
    (apply(train), apply(test))
}

/// Trains a classifier on frozen latents and returns its test accuracy.
pub fn linear_probe(
    train_z: &Tensor,
    train_y: &[usize],
    test_z: &Tensor,
    test_y: &[usize],
    opts: ProbeOptions,
) -> Result<MetricReport> {
    if train_z.rows() != train_y.len() || test_z.rows() != test_y.len() || train_z.cols() != test_z.cols() {
        return Err(Error::dim("linear_probe", train_z.shape(), test_z.shape()));
    }
    if test_y.is_empty() {
        return Err(Error::Contract("probe needs test examples".into()));
    }
    let first = train_y.first().copied();
    if first.is_none() || train_y.iter().all(|&y| Some(y) == first) {
        return Err(Error::Contract("probe training labels contain a single class".into()));
    }
    let k = train_y.iter().chain(test_y).copied().max().unwrap_or(0) + 1;
    let (train, test) = standardize(train_z, test_z);
    let d = train.cols();
    let sizes = match opts.model {
        ProbeModel::Logistic => vec![d, k],
        ProbeModel::Mlp { hidden } => vec![d, hidden, k],
    };
    let mut net = init_params(&sizes, opts.seed, Role::Discriminator)?;
    let mut adam = AdamState::for_net(
        AdamConfig {
            lr: opts.lr,
            beta1: 0.9,
            ..AdamConfig::default()
        },
        &net,
    );
    let targets = one_hot(train_y, k);
    let inv_n = 1.0 / train.rows() as f64;
    for _ in 0..opts.epochs {
        let tape = Tape::new();
        let b = net.bind(&tape);
        let logits = b.forward(&tape.constant(train.clone()))?;
        let logp = logits.softmax_rows()?.log();
        let loss = tape.constant(targets.clone()).mul(&logp)?.sum().scale(-inv_n);
        let g = tape.backward(loss)?;
        let grads = b.grads(&g)?;
        step_net(&mut net, &grads, &mut adam)?;
    }
    let tape = Tape::new();
    let logits = net.bind_frozen(&tape).forward(&tape.constant(test))?.value();
    let correct = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            pred == test_y[i]
        })
        .count();
    let name = match opts.model {
        ProbeModel::Logistic => "linear_probe",
        ProbeModel::Mlp { .. } => "mlp_probe",
    };
    Ok(MetricReport::new(name, correct as f64 / test_y.len() as f64, train_y.len() + test_y.len())?.with_seed(opts.seed))
}

/// Sampled latents `z ~ q(z | x[, y])` for a dataset, with encoder noise
/// from the evaluation stream of `seed`. The encoder is only read.
/// Sampled latents for `x`. `y` holds label features when the encoder reads
/// them.
pub fn encode_latents(enc: &NetParams, x: &Tensor, y: Option<&Tensor>, seed: u64) -> Result<Tensor> {
    let tape = Tape::new();
    let b = enc.bind_frozen(&tape);
    let dim_z = enc.output_width() / 2;
    let eps = Streams::new(seed, 0).normal(Purpose::Eval, 0, &[x.rows(), dim_z]);
    let yv = y.map(|t| tape.constant(t.clone()));
    let (z, _) = encode(&b, &tape.constant(x.clone()), yv.as_ref(), &eps)?;
    Ok(z.value())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityOptions {
    pub steps: usize,
    pub probe_every: usize,
    /// Parallel chains (rows) in the batch.
    pub chains: usize,
    /// Rows from each side used for MMD.
    pub mmd_samples: usize,
    pub threshold_sigmas: f64,
    pub seed: u64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            probe_every: 100,
            chains: 2000,
            mmd_samples: 500,
            threshold_sigmas: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityPoint {
    pub step: usize,
    pub coverage: Option<Coverage>,
    pub mmd: MetricReport,
}

/// `first`, then every multiple of `every` after it, then `last`; strictly
/// increasing and capped at `last`.
pub fn probe_steps(first: usize, every: usize, last: usize) -> Vec<usize> {
    let mut out = vec![first.min(last)];
    if every > 0 {
        let mut s = (first / every + 1) * every;
        while s < last {
            out.push(s);
            s += every;
        }
    }
    if *out.last().expect("non-empty") != last {
        out.push(last);
    }
    out
}

fn head_rows(t: &Tensor, n: usize) -> Tensor {
    let idx: Vec<usize> = (0..t.rows().min(n)).collect();
    t.gather_rows(&idx)
}

/// Runs one long detached chain and records mode coverage (for mixtures)
/// and MMD against the data at each probe step.
pub fn long_chain_stability(
    sampler: &Sampler,
    data: &Dataset,
    first_probe: usize,
    opts: StabilityOptions,
) -> Result<Vec<StabilityPoint>> {
    if sampler.dim_x() != data.dim() {
        return Err(Error::dim("stability data", &[sampler.dim_x()], &[data.dim()]));
    }
    let probes = probe_steps(first_probe.max(1), opts.probe_every, opts.steps.max(1));
    let reference = head_rows(&data.x, opts.mmd_samples);
    let streams = Streams::new(opts.seed, 0);
    let mut out = Vec::with_capacity(probes.len());
    let mut next = 0;
    sampler.run(opts.chains, opts.steps.max(1), &streams, |state| {
        if next < probes.len() && state.step == probes[next] {
            next += 1;
            let coverage = match &data.meta {
                Some(meta @ DatasetMeta::Mixture { .. }) => Some(mode_coverage(&state.x, meta, opts.threshold_sigmas)?),
                _ => None,
            };
            let sample = head_rows(&state.x, opts.mmd_samples);
            let mmd = mmd_rbf(&sample, &reference, &median_bandwidths(&sample, &reference))?.with_seed(opts.seed);
            out.push(StabilityPoint {
                step: state.step,
                coverage,
                mmd,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

/// `step,mmd[,unassigned,mode_0,...]` rows.
pub fn write_stability_csv<W: Write>(mut w: W, series: &[StabilityPoint]) -> std::io::Result<()> {
    let k = series
        .first()
        .and_then(|p| p.coverage.as_ref())
        .map_or(0, |c| c.fractions.len());
    let mut header = vec!["step".to_string(), "mmd".to_string()];
    if k > 0 {
        header.push("unassigned".into());
        header.extend((0..k).map(|m| format!("mode_{m}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for p in series {
        let mut row = vec![p.step.to_string(), p.mmd.value.to_string()];
        if let Some(c) = &p.coverage {
            row.push(c.unassigned.to_string());
            row.extend(c.fractions.iter().map(ToString::to_string));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Mean of each column; handy for summarizing sample clouds.
pub fn column_means(t: &Tensor) -> Vec<f64> {
    let n = t.rows() as f64;
    let cols = t.cols();
    kernels::map_rows(cols, |j| (0..t.rows()).map(|i| t.row(i)[j]).sum::<f64>() / n)
}
