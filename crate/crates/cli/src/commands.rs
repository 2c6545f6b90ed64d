use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use gibbsnet::chains::tabular::{check_stationarity, TabularModel};
use gibbsnet::chains::ChainState;
use gibbsnet::config::{DatasetKind, ExperimentConfig};
use gibbsnet::data::{Dataset, DatasetMeta};
use gibbsnet::diff::Tensor;
use gibbsnet::eval::{self, MetricReport, ProbeOptions, StabilityOptions};
use gibbsnet::rng::Streams;
use gibbsnet::trainer::{Checkpoint, CheckpointPolicy, Trainer};
use gibbsnet::Error;

use crate::manifest::{file_sha256, RunManifest};
use crate::Common;

type Result<T> = std::result::Result<T, Error>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Dimension { .. }
        | Error::Contract(_)
        | Error::Format(_)
        | Error::Invariant(_)
        | Error::Unsupported(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Corrupt(_) => 4,
        Error::Io(io) if io.kind() == io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn finish(mut m: RunManifest, r: Result<()>, out: &Path) -> u8 {
    let code = match &r {
        Ok(()) => 0,
        Err(e) => exit_code(e),
    };
    m.exit_code = code;
    m.status = if code == 0 { "ok" } else { "error" }.to_string();
    if let Err(e) = &r {
        eprintln!("error: {e}");
        m.error = Some(e.to_string());
        if let Error::Divergence { last_checkpoint, .. } = e {
            m.last_checkpoint = last_checkpoint.clone();
        }
    }
    if let Err(e) = m.write(out) {
        eprintln!("error: cannot write manifest to {}: {e}", out.display());
        return code.max(1);
    }
    code
}

fn load_checkpoint(path: &Path, m: &mut RunManifest) -> Result<(Checkpoint, ExperimentConfig)> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) if io.kind() == io::ErrorKind::NotFound => {
            Error::Config(format!("checkpoint {} does not exist", path.display()))
        }
        e => e,
    })?;
    let cfg = ExperimentConfig::from_text(&ck.config_text)?;
    m.checkpoint_sha256 = Some(file_sha256(path)?);
    m.config = Some(ck.config_text.clone());
    m.ali_mode = cfg.train.n_steps == 1;
    Ok((ck, cfg))
}

fn create(path: &Path, m: &mut RunManifest) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    m.output(path);
    Ok(BufWriter::new(File::create(path)?))
}

pub fn train(config: Option<&Path>, overrides: &[String], common: &Common) -> u8 {
    let mut m = RunManifest::new("train");
    let r = run_train(config, overrides, common, &mut m);
    finish(m, r, &common.out)
}

fn run_train(config: Option<&Path>, overrides: &[String], common: &Common, m: &mut RunManifest) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    m.config = Some(cfg.to_text());
    m.seed = Some(cfg.train.seed);
    m.ali_mode = cfg.train.n_steps == 1;

    let data = cfg.data.build()?;
    let out = &common.out;
    fs::create_dir_all(out)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text())?;
    m.output(&cfg_path);

    let mut records = create(&out.join("records.jsonl"), m)?;
    let mut timings = create(&out.join("timings.csv"), m)?;
    writeln!(timings, "iteration,wall_seconds")?;
    let mut trainer = Trainer::new(cfg, data)?;
    let result = trainer.run(
        &CheckpointPolicy {
            dir: Some(out.clone()),
        },
        |r| {
            writeln!(records, "{}", serde_json::to_string(r).expect("record serializes"))?;
            writeln!(timings, "{},{}", r.iteration, r.wall_seconds)?;
            Ok(())
        },
    );
    records.flush()?;
    timings.flush()?;
    for entry in fs::read_dir(out)? {
        let p = entry?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("checkpoint_")) {
            m.output(&p);
        }
    }
    result?;
    let ck = out.join("checkpoint.gbnt");
    trainer.save_checkpoint(&ck)?;
    m.output(&ck);
    m.checkpoint_sha256 = Some(file_sha256(&ck)?);
    Ok(())
}

fn write_state_rows<W: Write>(w: &mut W, s: &ChainState) -> io::Result<()> {
    for i in 0..s.x.rows() {
        let mut f = vec![s.step.to_string(), i.to_string()];
        f.extend(s.x.row(i).iter().map(ToString::to_string));
        f.extend(s.z.row(i).iter().map(ToString::to_string));
        if let Some(y) = &s.y {
            f.push(y[i].to_string());
        }
        writeln!(w, "{}", f.join(","))?;
    }
    Ok(())
}

fn trajectory_header(dim_x: usize, dim_z: usize, labels: bool) -> String {
    let mut h = vec!["step".to_string(), "index".to_string()];
    h.extend((0..dim_x).map(|j| format!("x{j}")));
    h.extend((0..dim_z).map(|j| format!("z{j}")));
    if labels {
        h.push("y".into());
    }
    h.join(",")
}

/// Binary PGM grid of up to 100 images, each `side × side`.
fn write_pgm_grid<W: Write>(w: &mut W, x: &Tensor, side: usize) -> io::Result<()> {
    let n = x.rows().min(100);
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * side, rows * side);
    writeln!(w, "P5\n{width} {height}\n255")?;
    let mut px = vec![0u8; width * height];
    for k in 0..n {
        let (gr, gc) = (k / cols, k % cols);
        for (p, v) in x.row(k).iter().enumerate() {
            let (r, c) = (p / side, p % side);
            px[(gr * side + r) * width + gc * side + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    w.write_all(&px)
}

pub fn sample(checkpoint: &Path, steps: usize, count: usize, probe_every: usize, common: &Common) -> u8 {
    let mut m = RunManifest::new("sample");
    let r = run_sample(checkpoint, steps, count, probe_every, common, &mut m);
    finish(m, r, &common.out)
}

fn run_sample(
    checkpoint: &Path,
    steps: usize,
    count: usize,
    probe_every: usize,
    common: &Common,
    m: &mut RunManifest,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("steps: must be at least 1".into()));
    }
    if count == 0 {
        return Err(Error::Config("count: must be at least 1".into()));
    }
    let (ck, cfg) = load_checkpoint(checkpoint, m)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    m.seed = Some(seed);
    let state = ck.into_state()?;
    let sampler = state.sampler(&cfg.train)?;
    let probes = eval::probe_steps(1, probe_every, steps);
    let out = &common.out;

    let mut traj = create(&out.join("trajectory.csv"), m)?;
    writeln!(traj, "{}", trajectory_header(sampler.dim_x(), sampler.dim_z(), cfg.train.label_modeling))?;
    let scatter = sampler.dim_x() == 2;
    let side = (sampler.dim_x() as f64).sqrt().round() as usize;
    let images = cfg.data.dataset == DatasetKind::Idx && side * side == sampler.dim_x();
    let mut extra: Vec<PathBuf> = Vec::new();

    sampler.run(count, steps, &Streams::new(seed, 0), |s| {
        if !probes.contains(&s.step) {
            return Ok(());
        }
        write_state_rows(&mut traj, s)?;
        if scatter {
            let p = out.join("scatter").join(format!("step_{:05}.csv", s.step));
            fs::create_dir_all(p.parent().expect("has parent"))?;
            let mut w = BufWriter::new(File::create(&p)?);
            writeln!(w, "x0,x1")?;
            for i in 0..s.x.rows() {
                writeln!(w, "{},{}", s.x.row(i)[0], s.x.row(i)[1])?;
            }
            w.flush()?;
            extra.push(p);
        }
        if images {
            let p = out.join("images").join(format!("step_{:05}.pgm", s.step));
            fs::create_dir_all(p.parent().expect("has parent"))?;
            let mut w = BufWriter::new(File::create(&p)?);
            write_pgm_grid(&mut w, &s.x, side)?;
            w.flush()?;
            extra.push(p);
        }
        Ok(())
    })?;
    traj.flush()?;
    for p in extra {
        m.output(&p);
    }
    Ok(())
}

fn parse_mask(s: &str) -> Result<Vec<bool>> {
    s.split(',')
        .map(|t| match t.trim() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(Error::Config(format!("mask: expected 0/1 flags, got {other:?}"))),
        })
        .collect()
}

fn read_observations(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read observations {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue, // header
            Err(_) => return Err(Error::Format(format!("observations line {}: not numeric", i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Error::Format("observations file has no rows".into()));
    }
    Tensor::from_rows(&rows)
}

pub fn inpaint(checkpoint: &Path, observations: &Path, mask: &str, steps: usize, common: &Common) -> u8 {
    let mut m = RunManifest::new("inpaint");
    let r = run_inpaint(checkpoint, observations, mask, steps, common, &mut m);
    finish(m, r, &common.out)
}

fn run_inpaint(
    checkpoint: &Path,
    observations: &Path,
    mask: &str,
    steps: usize,
    common: &Common,
    m: &mut RunManifest,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::Config("steps: must be at least 1".into()));
    }
    let mask = parse_mask(mask)?;
    let (ck, cfg) = load_checkpoint(checkpoint, m)?;
    let dim_x = cfg.train.dim_x;
    if mask.len() != dim_x {
        return Err(Error::Config(format!("mask: {} flags but the model has dim_x = {dim_x}", mask.len())));
    }
    let x_obs = read_observations(observations)?;
    if x_obs.cols() != dim_x {
        return Err(Error::Config(format!(
            "observations: {} columns but the model has dim_x = {dim_x}",
            x_obs.cols()
        )));
    }
    let seed = common.seed.unwrap_or(cfg.train.seed);
    m.seed = Some(seed);
    let state = ck.into_state()?;
    let sampler = state.sampler(&cfg.train)?;
    let states = sampler.inpaint(&x_obs, &mask, steps, &Streams::new(seed, 0))?;
    let mut w = create(&common.out.join("trajectory.csv"), m)?;
    writeln!(w, "{}", trajectory_header(dim_x, sampler.dim_z(), false))?;
    for s in &states {
        let s = ChainState { y: None, ..s.clone() };
        write_state_rows(&mut w, &s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn oracle(model: Option<&Path>, x_states: usize, z_states: usize, perturb: f64, common: &Common) -> u8 {
    let mut m = RunManifest::new("oracle");
    let r = run_oracle(model, x_states, z_states, perturb, common, &mut m);
    finish(m, r, &common.out)
}

fn run_oracle(
    model: Option<&Path>,
    x_states: usize,
    z_states: usize,
    perturb: f64,
    common: &Common,
    m: &mut RunManifest,
) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let mut tm = match model {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read model {}: {e}", p.display())))?;
            let raw: TabularModel =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("model {}: {e}", p.display())))?;
            TabularModel::new(raw.p_x_given_z, raw.q_z_given_x, raw.data_dist)?
        }
        None => {
            m.seed = Some(seed);
            TabularModel::random_consistent(x_states, z_states, seed)?
        }
    };
    if perturb != 0.0 {
        tm = tm.with_mixed_decoder(perturb)?;
    }
    let report = check_stationarity(&tm)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    fs::create_dir_all(&common.out)?;
    let p = common.out.join("oracle.json");
    fs::write(&p, json + "\n")?;
    m.output(&p);
    Ok(())
}

pub struct EvalOptions {
    pub samples: usize,
    pub chain_steps: usize,
    pub probe_every: usize,
}

pub fn eval(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    opts: EvalOptions,
    common: &Common,
) -> u8 {
    let mut m = RunManifest::new("eval");
    let r = run_eval(checkpoint, config, overrides, opts, common, &mut m);
    finish(m, r, &common.out)
}

/// Class labels for the probe: the dataset's own, or the nearest mixture
/// center.
fn probe_labels(data: &Dataset) -> Option<Vec<usize>> {
    if let Some(y) = &data.y {
        return Some(y.clone());
    }
    match &data.meta {
        Some(DatasetMeta::Mixture { centers, .. }) => Some(
            eval::assign_modes(&data.x, centers, f64::INFINITY)
                .into_iter()
                .map(|k| k.unwrap_or(0))
                .collect(),
        ),
        _ => None,
    }
}

fn run_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    opts: EvalOptions,
    common: &Common,
    m: &mut RunManifest,
) -> Result<()> {
    if opts.samples < 2 {
        return Err(Error::Config("samples: must be at least 2".into()));
    }
    let (ck, ck_cfg) = load_checkpoint(checkpoint, m)?;
    let mut data_cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ck_cfg.clone(),
    };
    for o in overrides {
        data_cfg.apply_override(o)?;
    }
    let train = ck_cfg.train;
    let data = data_cfg.data.build()?;
    if data.dim() != train.dim_x {
        return Err(Error::Config(format!(
            "dataset has {} columns but the checkpoint was trained with dim_x = {}",
            data.dim(),
            train.dim_x
        )));
    }
    let seed = common.seed.unwrap_or(train.seed);
    m.seed = Some(seed);
    let state = ck.into_state()?;
    let sampler = state.sampler(&train)?;

    let n = opts.samples.min(data.len());
    let reference = data.x.gather_rows(&(0..n).collect::<Vec<_>>());
    let generated = sampler.run(opts.samples, train.n_steps, &Streams::new(seed, 0), |_| Ok(()))?.x;
    let mut reports: Vec<MetricReport> = Vec::new();

    let bw = eval::median_bandwidths(&generated, &reference);
    reports.push(eval::mmd_rbf(&generated, &reference, &bw)?.with_seed(seed));

    if let Some(meta @ DatasetMeta::Mixture { .. }) = &data.meta {
        reports.push(eval::mode_coverage(&generated, meta, 3.0)?.report()?.with_seed(seed));
    }

    let mut kl_total = 0.0;
    let mut kl = MetricReport::new("histogram_kl", 0.0, generated.rows() + reference.rows())?;
    for j in 0..train.dim_x {
        let a: Vec<f64> = (0..generated.rows()).map(|i| generated.row(i)[j]).collect();
        let b: Vec<f64> = (0..reference.rows()).map(|i| reference.row(i)[j]).collect();
        let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.1 * (hi - lo).max(1e-6);
        let v = eval::histogram_kl(&a, &b, 50, (lo - pad, hi + pad))?.value;
        kl_total += v;
        kl = kl.detail(format!("x{j}"), v);
    }
    kl.value = kl_total;
    reports.push(kl.with_seed(seed));

    if let Some(labels) = probe_labels(&data) {
        let half = data.len().min(2 * opts.samples) / 2;
        let classes = labels.iter().copied().max().unwrap_or(0) + 1;
        // With label modeling the encoder also reads label features; the
        // probe gives it the uninformative uniform vector.
        let feats = train
            .labels()
            .map(|k| Tensor::full(&[2 * half, k], 1.0 / k as f64));
        let x = data.x.gather_rows(&(0..2 * half).collect::<Vec<_>>());
        let z = eval::encode_latents(&state.nets.encoder, &x, feats.as_ref(), seed)?;
        let tr: Vec<usize> = (0..half).collect();
        let te: Vec<usize> = (half..2 * half).collect();
        let (ytr, yte): (Vec<usize>, Vec<usize>) = (tr.iter().map(|&i| labels[i]).collect(), te.iter().map(|&i| labels[i]).collect());
        if classes > 1 && ytr.iter().any(|&y| y != ytr[0]) {
            let r = eval::linear_probe(
                &z.gather_rows(&tr),
                &ytr,
                &z.gather_rows(&te),
                &yte,
                ProbeOptions {
                    seed,
                    ..ProbeOptions::default()
                },
            )?;
            reports.push(r);
        }
    }

    let series = eval::long_chain_stability(
        &sampler,
        &data,
        train.n_steps,
        StabilityOptions {
            steps: opts.chain_steps.max(train.n_steps),
            probe_every: opts.probe_every,
            chains: opts.samples,
            mmd_samples: opts.samples.min(500),
            threshold_sigmas: 3.0,
            seed,
        },
    )?;
    let first = series.first().expect("at least one probe");
    let last = series.last().expect("at least one probe");
    let mut st = MetricReport::new("long_chain_stability", last.mmd.value, opts.samples)?
        .detail("first_step", first.step as f64)
        .detail("last_step", last.step as f64)
        .detail("first_mmd", first.mmd.value)
        .detail("last_mmd", last.mmd.value)
        .with_seed(seed);
    if let (Some(a), Some(b)) = (&first.coverage, &last.coverage) {
        st = st
            .detail("coverage_drift_l1", a.l1(b))
            .detail("last_unassigned", b.unassigned);
    }
    reports.push(st);

    let mut w = create(&common.out.join("metrics.jsonl"), m)?;
    eval::write_json_lines(&mut w, &reports)?;
    w.flush()?;
    let mut s = create(&common.out.join("stability.csv"), m)?;
    eval::write_stability_csv(&mut s, &series)?;
    s.flush()?;
    for r in &reports {
        println!("{} = {}", r.name, r.value);
    }
    Ok(())
}
