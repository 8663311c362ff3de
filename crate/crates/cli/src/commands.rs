use std::path::{Path, PathBuf};

use certilip::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use certilip::data::{load_dataset, Dataset};
use certilip::flows::{self, FlowSpec, Potential, Scheme};
use certilip::layers::{ArchSpec, Mode, Network};
use certilip::report::{metrics_csv, samples_csv, timing_csv, write_atomic, AttackSettings, EpsAccuracy, Summary};
use certilip::robustness::{self, AttackConfig, SampleCertificate};
use certilip::spectral::INFERENCE_ITERS;
use certilip::training::{self, Adam, EpochMetrics};
use certilip::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{parse_eps_list, ExperimentConfig};
use crate::error::CliError;

pub struct Context {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
}

const DEFAULT_EPS: [f64; 3] = [36.0 / 255.0, 72.0 / 255.0, 108.0 / 255.0];

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::new("io.failure", format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| CliError::new("io.failure", e.to_string()))?;
    text.push(b'\n');
    write(path, &text)
}

fn build_network(cfg: &ExperimentConfig, train: &Dataset<f32>) -> Result<Network<f32>, CliError> {
    let arch = ArchSpec {
        input_shape: train.sample_shape.clone(),
        num_classes: train.num_classes,
        layers: cfg.model.layers(),
        lln: cfg.model.lln,
    };
    let mut net = arch.build(cfg.seed)?;
    if let Some(h) = cfg.model.relaxed_h {
        training::relaxed_mode(&mut net, h)?;
    }
    Ok(net)
}

/// Converged copy used for evaluation, certification and attacks.
fn inference_copy(net: &Network<f32>, seed: u64) -> Result<Network<f32>, CliError> {
    let mut n = net.clone();
    n.converge(INFERENCE_ITERS, seed)?;
    Ok(n)
}

fn mean_radius(net: &Network<f32>, data: &Dataset<f32>) -> Result<f64, CliError> {
    let lipschitz = net.lipschitz_bound()?.unwrap_or(1.0);
    let mut total = 0.0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        total += SampleCertificate::from_logits(&net.forward(x, Mode::Infer)?, y, lipschitz)?.radius;
    }
    Ok(total / data.len().max(1) as f64)
}

pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub margin: Option<f64>,
    pub relaxed_h: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub resume: Option<PathBuf>,
}

pub fn train(ctx: &Context, o: TrainOverrides) -> Result<(), CliError> {
    let path = ctx
        .config
        .as_ref()
        .ok_or_else(|| CliError::new("usage.invalid", "train needs --config"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    let seed = ctx.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.margin {
        cfg.train.margin = v;
    }
    if o.relaxed_h.is_some() {
        cfg.model.relaxed_h = o.relaxed_h;
    }
    if let Some(v) = o.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.train.validate()?;
    let eps = cfg.eps()?;

    let (train_set, test_set) = load_dataset::<f32>(&cfg.data)?;
    log::info!(
        "{} training and {} test samples of shape {:?}",
        train_set.len(),
        test_set.len(),
        train_set.sample_shape
    );
    let (mut net, mut opt) = match &o.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let opt = ck.optimizer.unwrap_or_else(|| Adam::new(&ck.net));
            (ck.net, opt)
        }
        None => {
            let net = build_network(&cfg, &train_set)?;
            let opt = Adam::new(&net);
            (net, opt)
        }
    };
    log::info!("{} layers, {} parameters", net.layers().len(), net.param_count());

    let echo = serde_json::to_value(&cfg).map_err(|e| CliError::config(e.to_string()))?;
    let out = &ctx.out;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    write(&out.join("metrics.csv"), &metrics_csv(&[]))?;

    let mut rows: Vec<EpochMetrics> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let certifiable = !net.is_relaxed();
    let per_epoch = cfg.train.steps_per_epoch(train_set.len()).max(1);
    for epoch in (opt.step / per_epoch) as usize..cfg.train.epochs {
        let m = training::train_epoch(&mut net, &train_set, &cfg.train, &mut opt, epoch)?;
        log::info!(
            "epoch {} loss {:.5} acc {:.4} lr {:.2e} max sigma {:.4} ({:.1}s)",
            m.epoch,
            m.loss,
            m.accuracy,
            m.lr,
            m.max_sigma,
            m.wall_time
        );
        rows.push(m);
        write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
        write(&out.join("timing.csv"), &timing_csv(&rows))?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            save_checkpoint(
                &ckpt_dir.join(format!("epoch-{:04}", epoch + 1)),
                &net,
                Some(&opt),
                seed,
                echo.clone(),
            )?;
        }
        if certifiable && !test_set.is_empty() {
            let score = mean_radius(&inference_copy(&net, seed)?, &test_set)?;
            if score > best {
                best = score;
                save_checkpoint(&ckpt_dir.join("best"), &net, Some(&opt), seed, echo.clone())?;
            }
        }
    }
    save_checkpoint(&ckpt_dir.join("last"), &net, Some(&opt), seed, echo)?;

    let inf = inference_copy(&net, seed)?;
    let (_, clean) = training::evaluate(&inf, &test_set, cfg.train.margin)?;
    let mut summary = Summary {
        clean_accuracy: clean,
        samples: Some(test_set.len()),
        ..Summary::default()
    };
    if certifiable {
        let report = robustness::certify(&inf, &test_set, &eps)?;
        summary = Summary::from_certification(&report);
        if cfg.eval.attack {
            attack_into(
                &mut summary,
                &inf,
                &test_set,
                &report,
                &eps,
                cfg.eval.attack_iterations,
                cfg.eval.random_start,
                seed,
            )?;
        }
        if cfg.eval.lipschitz_pairs > 0 {
            summary.lipschitz_lower_bound = Some(lipschitz_estimate(&inf, &test_set, cfg.eval.lipschitz_pairs, seed)?);
        }
    }
    write_json(&out.join("report.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

/// Loads a checkpoint plus the experiment it came from and its test split.
fn load_trained(
    ctx: &Context,
    checkpoint: Option<PathBuf>,
) -> Result<(Checkpoint, ExperimentConfig, Dataset<f32>), CliError> {
    let dir = checkpoint.unwrap_or_else(|| ctx.out.join("checkpoints").join("last"));
    let ck = load_checkpoint(&dir)?;
    let mut cfg = match &ctx.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => serde_json::from_value(ck.manifest.config.clone())
            .map_err(|e| CliError::config(format!("checkpoint carries no usable config ({e}); pass --config")))?,
    };
    if let Some(seed) = ctx.seed {
        cfg.set_seed(seed);
    }
    let (_, test) = load_dataset::<f32>(&cfg.data)?;
    Ok((ck, cfg, test))
}

pub fn eval(ctx: &Context, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let (ck, cfg, test) = load_trained(ctx, checkpoint)?;
    let inf = inference_copy(&ck.net, cfg.seed)?;
    let (loss, acc) = training::evaluate(&inf, &test, cfg.train.margin)?;
    log::info!("test loss {loss:.5}");
    let summary = Summary {
        clean_accuracy: acc,
        samples: Some(test.len()),
        lipschitz_bound: inf.lipschitz_bound()?,
        ..Summary::default()
    };
    write_json(&ctx.out.join("report.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn eps_or(flag: Option<String>, cfg: &ExperimentConfig) -> Result<Vec<f64>, CliError> {
    match flag {
        Some(s) => parse_eps_list(&s),
        None => {
            let e = cfg.eps()?;
            Ok(if e.is_empty() { DEFAULT_EPS.to_vec() } else { e })
        }
    }
}

pub fn certify(ctx: &Context, checkpoint: Option<PathBuf>, eps: Option<String>) -> Result<(), CliError> {
    let (ck, cfg, test) = load_trained(ctx, checkpoint)?;
    let eps = eps_or(eps, &cfg)?;
    if ck.net.is_relaxed() {
        return Err(certilip::Error::RelaxedNetwork.into());
    }
    let inf = inference_copy(&ck.net, cfg.seed)?;
    let report = robustness::certify(&inf, &test, &eps)?;
    let summary = Summary::from_certification(&report);
    write(&ctx.out.join("samples.csv"), &samples_csv(&report))?;
    write_json(&ctx.out.join("report.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack_into(
    summary: &mut Summary,
    net: &Network<f32>,
    test: &Dataset<f32>,
    report: &robustness::CertificationReport,
    eps: &[f64],
    iterations: usize,
    random_start: bool,
    seed: u64,
) -> Result<usize, CliError> {
    let mut violations = 0;
    summary.attack.clear();
    for &e in eps {
        let cfg = AttackConfig {
            eps: e,
            iterations,
            step_size: None,
            random_start,
            seed,
        };
        let outcomes = robustness::attack_dataset(net, test, &cfg)?;
        let robust = outcomes.iter().filter(|o| !o.success).count();
        violations += outcomes
            .iter()
            .zip(&report.samples)
            .filter(|(o, s)| o.success && s.certified_at(e, report.lipschitz_bound))
            .count();
        summary.attack.push(EpsAccuracy {
            eps: e,
            accuracy: robust as f64 / test.len().max(1) as f64,
        });
    }
    summary.attack_settings = Some(AttackSettings {
        iterations,
        step_factor: 2.0 / iterations as f64,
        random_start,
    });
    summary.soundness_violations = Some(violations);
    Ok(violations)
}

pub fn attack(
    ctx: &Context,
    checkpoint: Option<PathBuf>,
    eps: Option<String>,
    iterations: Option<usize>,
    random_start: bool,
) -> Result<(), CliError> {
    let (ck, cfg, test) = load_trained(ctx, checkpoint)?;
    let eps = eps_or(eps, &cfg)?;
    let iterations = iterations.unwrap_or(cfg.eval.attack_iterations);
    if iterations == 0 {
        return Err(CliError::argument("iterations must be at least 1"));
    }
    let inf = inference_copy(&ck.net, cfg.seed)?;
    // relaxed networks can still be attacked; certificates are then absent
    let (mut summary, report) = if inf.is_relaxed() {
        let (_, acc) = training::evaluate(&inf, &test, cfg.train.margin)?;
        let samples = test
            .inputs
            .iter()
            .zip(&test.labels)
            .map(|(x, &y)| {
                let logits = inf.forward(x, Mode::Infer)?;
                Ok(SampleCertificate {
                    predicted: logits.argmax(),
                    label: y,
                    margin: 0.0,
                    radius: 0.0,
                })
            })
            .collect::<Result<Vec<_>, certilip::Error>>()?;
        let report = robustness::CertificationReport {
            samples,
            eps: Vec::new(),
            clean_accuracy: acc,
            certified_accuracy: Vec::new(),
            lipschitz_bound: f64::INFINITY,
        };
        (
            Summary {
                clean_accuracy: acc,
                samples: Some(test.len()),
                ..Summary::default()
            },
            report,
        )
    } else {
        let report = robustness::certify(&inf, &test, &eps)?;
        (Summary::from_certification(&report), report)
    };
    let violations = attack_into(
        &mut summary,
        &inf,
        &test,
        &report,
        &eps,
        iterations,
        random_start,
        cfg.seed,
    )?;
    if violations > 0 {
        log::warn!("{violations} certified samples were broken by the attack");
    }
    write_json(&ctx.out.join("report.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn lipschitz_estimate(net: &Network<f32>, test: &Dataset<f32>, pairs: usize, seed: u64) -> Result<f64, CliError> {
    if test.is_empty() {
        return Err(CliError::argument("the test split is empty"));
    }
    let wide: Network<f64> = net.cast();
    let inputs: Vec<Tensor<f64>> = test.inputs.iter().map(|t| t.cast()).collect();
    Ok(robustness::empirical_lipschitz(
        &wide,
        |rng: &mut ChaCha8Rng| inputs[rng.random_range(0..inputs.len())].clone(),
        pairs,
        seed,
    )?)
}

pub fn lipschitz(ctx: &Context, checkpoint: Option<PathBuf>, pairs: usize) -> Result<(), CliError> {
    if pairs == 0 {
        return Err(CliError::argument("pairs must be at least 1"));
    }
    let (ck, cfg, test) = load_trained(ctx, checkpoint)?;
    let inf = inference_copy(&ck.net, cfg.seed)?;
    let (_, acc) = training::evaluate(&inf, &test, cfg.train.margin)?;
    let summary = Summary {
        clean_accuracy: acc,
        lipschitz_lower_bound: Some(lipschitz_estimate(&inf, &test, pairs, cfg.seed)?),
        lipschitz_bound: inf.lipschitz_bound()?,
        samples: Some(test.len()),
        ..Summary::default()
    };
    write_json(&ctx.out.join("report.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

pub struct FlowOptions {
    pub kind: &'static str,
    pub mu: f64,
    pub horizon: f64,
    pub step: f64,
    pub dim: usize,
    pub skew: f64,
    pub scheme_step: Option<f64>,
}

fn flow_spec(o: &FlowOptions, rng: &mut ChaCha8Rng) -> Result<FlowSpec, CliError> {
    let n = o.dim;
    if n == 0 {
        return Err(CliError::argument("dim must be at least 1"));
    }
    let mut skew = flows::random_skew(n, rng) * o.skew;
    let potential = match o.kind {
        "zero" => Potential::Zero,
        "quadratic" => Potential::Isotropic { mu: o.mu },
        "diagonal" => {
            let d = if n == 1 {
                vec![o.mu]
            } else {
                (0..n).map(|i| 0.5 + 1.5 * i as f64 / (n - 1) as f64).collect()
            };
            Potential::Quadratic {
                s: DMatrix::from_diagonal(&DVector::from_vec(d)),
            }
        }
        "rotation" => {
            for i in (0..n.saturating_sub(1)).step_by(2) {
                skew[(i, i + 1)] += 1.0;
                skew[(i + 1, i)] -= 1.0;
            }
            Potential::Zero
        }
        _ => Potential::Icnn {
            w: DMatrix::from_fn(2 * n, n, |_, _| rng.sample(StandardNormal)),
            b: DVector::from_fn(2 * n, |_, _| rng.sample(StandardNormal)),
        },
    };
    Ok(FlowSpec::constant(potential, skew, o.horizon)?)
}

pub fn flow_sim(ctx: &Context, o: FlowOptions) -> Result<(), CliError> {
    let seed = ctx.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = flow_spec(&o, &mut rng)?;
    let x0 = DVector::from_fn(o.dim, |_, _| rng.sample(StandardNormal));
    let z0 = DVector::from_fn(o.dim, |_, _| rng.sample(StandardNormal));
    let report = flows::contraction_envelope_check(&spec, &x0, &z0, o.step)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::new("io.failure", e.to_string());
    w.write_record(["t", "d_t", "lower", "upper"]).map_err(io)?;
    for r in &report.rows {
        w.write_record([
            format!("{:.6}", r.t),
            format!("{:.12e}", r.distance),
            format!("{:.12e}", r.lower),
            format!("{:.12e}", r.upper),
        ])
        .map_err(io)?;
    }
    write(
        &ctx.out.join("flow.csv"),
        &w.into_inner().map_err(|e| CliError::new("io.failure", e.to_string()))?,
    )?;

    if let Some(h) = o.scheme_step {
        let steps = (o.horizon / h).round().max(1.0) as usize;
        let rows = flows::scheme_compare(&spec, &x0, &z0, &Scheme::ALL, h, steps)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scheme", "step", "k", "t", "distance", "ratio", "norm_drift"])
            .map_err(io)?;
        for r in rows {
            w.write_record([
                r.scheme.name().to_string(),
                r.step.to_string(),
                r.k.to_string(),
                format!("{:.6}", r.t),
                format!("{:.12e}", r.distance),
                format!("{:.12e}", r.ratio),
                format!("{:.12e}", r.norm_drift),
            ])
            .map_err(io)?;
        }
        write(
            &ctx.out.join("schemes.csv"),
            &w.into_inner().map_err(|e| CliError::new("io.failure", e.to_string()))?,
        )?;
    }
    println!(
        "{}",
        serde_json::json!({
            "envelope_holds": report.holds,
            "worst_violation": report.worst_violation,
            "worst_t": report.worst_t,
            "points": report.rows.len(),
        })
    );
    Ok(())
}

pub fn inspect(ctx: &Context, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let dir = checkpoint.unwrap_or_else(|| ctx.out.join("checkpoints").join("last"));
    let ck = load_checkpoint(&dir)?;
    let m = &ck.manifest;
    let layers: Vec<_> = ck
        .net
        .layers()
        .iter()
        .map(|l| {
            serde_json::json!({
                "kind": l.kind(),
                "in": l.in_shape(),
                "out": l.out_shape(),
                "params": l.params().iter().map(|p| p.len()).sum::<usize>(),
            })
        })
        .collect();
    let info = serde_json::json!({
        "format_version": m.format_version,
        "seed": m.seed,
        "train_step": m.train_step,
        "param_count": m.param_count,
        "relaxed": ck.net.is_relaxed(),
        "sigmas": ck.net.sigmas(),
        "layers": layers,
    });
    println!("{}", serde_json::to_string_pretty(&info).expect("json"));
    Ok(())
}
