use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use dpsc::accountant::{self, calibrate_sigma, default_orders, sampled_gaussian_curve, steps_per_epoch};
use dpsc::checkpoint::{self, Checkpoint};
use dpsc::container::write_atomic;
use dpsc::data::{load_cifar10, load_raw_container, seeded_subset, synth_blobs, Dataset, Split};
use dpsc::dp::{keyed_rng, stream, train_epochs, DpConfig, EpochRecord, OptimizerState, TrainConfig};
use dpsc::instrumentation::{capture, export_csv, histogram, Range};
use dpsc::landscape::{analyze_model, Protocol};
use dpsc::nn::{GroupSpec, Model, NetworkSpec};

use crate::config::{Arch, DataSource, Noise, RunConfig, Validation};
use crate::CliError;

type Out<'a> = &'a mut dyn Write;

pub const METRICS_HEADER: &str = "epoch,step,train_loss,val_loss,val_acc,lr,epsilon_spent";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.dpsc";
pub const BEST_CHECKPOINT: &str = "best.dpsc";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_COPY: &str = "config.txt";

/// Training, optional validation, and optional test splits.
pub struct Splits {
    pub train: Dataset<f32>,
    pub val: Option<Dataset<f32>>,
    pub test: Option<Dataset<f32>>,
}

/// Loads a source as (train, test-if-any) without any subsetting.
pub fn load_source(source: &DataSource) -> Result<(Dataset<f32>, Option<Dataset<f32>>), CliError> {
    let data_err = |e: dpsc::Error| match e {
        dpsc::Error::Config(m) => CliError::Config(m),
        other => CliError::data(other.to_string()),
    };
    match source {
        DataSource::Cifar10(dir) => {
            let (train, test) = load_cifar10(dir).map_err(data_err)?;
            Ok((train, Some(test)))
        }
        DataSource::Raw(path) => Ok((load_raw_container(path).map_err(data_err)?, None)),
        DataSource::Synth(cfg) => Ok((synth_blobs(cfg).map_err(data_err)?, None)),
    }
}

/// Applies the configured training subset and validation split; both are
/// keyed by the run seed.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let (mut train, test) = load_source(&cfg.data)?;
    if let Some(m) = cfg.train_subset {
        if m > train.len() {
            return Err(CliError::config(format!(
                "train_subset {m} exceeds the {} training samples",
                train.len()
            )));
        }
        let idx = seeded_subset(train.len(), m, &mut keyed_rng(cfg.seed, stream::DATA_SLICE, 1, 0));
        train = train.subset(&idx, Split::Train)?;
    }
    let val = match cfg.validation {
        Validation::None => None,
        Validation::Test => test.clone(),
        Validation::Holdout(p) => {
            let n = train.len();
            let k = ((p * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
            if n < 2 {
                return Err(CliError::config("a holdout needs at least two training samples"));
            }
            let held = seeded_subset(n, k, &mut keyed_rng(cfg.seed, stream::DATA_SLICE, 2, 0));
            let mut is_held = vec![false; n];
            held.iter().for_each(|&i| is_held[i] = true);
            let kept: Vec<usize> = (0..n).filter(|&i| !is_held[i]).collect();
            let val = train.subset(&held, Split::Val)?;
            train = train.subset(&kept, Split::Train)?;
            Some(val)
        }
    };
    Ok(Splits { train, val, test })
}

fn network(cfg: &RunConfig, data: &Dataset<f32>) -> Result<NetworkSpec, CliError> {
    let spec = cfg
        .architecture
        .build(cfg.scale_norm, cfg.groups, cfg.width, data.sample_shape(), data.classes);
    spec.validate()?;
    Ok(spec)
}

/// Noise multiplier in force for `cfg` on a training set of `n` samples.
pub fn resolve_sigma(cfg: &RunConfig, n: usize) -> Result<f64, CliError> {
    match cfg.noise {
        Noise::Sigma(s) => Ok(s),
        Noise::TargetEpsilon(target) => {
            let q = cfg.lot_size as f64 / n as f64;
            let steps = cfg.epochs as u64 * steps_per_epoch(n, cfg.lot_size);
            Ok(calibrate_sigma(target, q, steps, cfg.delta)?)
        }
    }
}

fn metrics_line(r: &EpochRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.step, r.train_loss, r.val_loss, r.val_acc, r.lr, r.epsilon_spent
    )
}

fn io_err(path: &Path) -> impl Fn(dpsc::Error) -> CliError + '_ {
    move |e| CliError::Failure(format!("cannot write {}: {e}", path.display()))
}

pub fn train(config_path: &Path, dry_run: bool, out: Out<'_>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", config_path.display())))?;
    let cfg = RunConfig::parse(&text)?;
    let splits = load_splits(&cfg)?;
    let n = splits.train.len();
    let spec = network(&cfg, &splits.train)?;
    if cfg.lot_size > n {
        return Err(CliError::config(format!(
            "lot_size {} exceeds the {n} training samples",
            cfg.lot_size
        )));
    }
    let sigma = resolve_sigma(&cfg, n)?;
    let q = cfg.lot_size as f64 / n as f64;
    let steps = cfg.epochs as u64 * steps_per_epoch(n, cfg.lot_size);
    let planned = if cfg.dp && sigma > 0.0 {
        accountant::epsilon(q, sigma, steps, cfg.delta)?.0
    } else {
        f64::INFINITY
    };
    writeln!(out, "parameters={}", spec.param_count())?;
    writeln!(out, "sigma={sigma}")?;
    writeln!(out, "q={q}")?;
    writeln!(out, "steps={steps}")?;
    writeln!(out, "planned_epsilon={planned}")?;
    if dry_run {
        writeln!(out, "dry_run=true")?;
        return Ok(());
    }

    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", dir.display())))?;
    let cfg_path = dir.join(CONFIG_COPY);
    write_atomic(&cfg_path, cfg.to_text().as_bytes()).map_err(io_err(&cfg_path))?;

    let mut model = Model::<f32>::init(spec, cfg.seed)?;
    let dp = DpConfig {
        enabled: cfg.dp,
        clip_bound: cfg.clip,
        noise_multiplier: sigma,
        expected_lot_size: cfg.lot_size,
        multiplicity: cfg.multiplicity,
    };
    let tcfg = TrainConfig {
        epsilon_ceiling: cfg.epsilon_ceiling,
        delta: cfg.delta,
        ..TrainConfig::new(cfg.epochs, cfg.seed, dp)
    };
    let mut state = OptimizerState::new(&model.params.to_flat(), cfg.lr, cfg.ema_tau)?;
    let metrics_path = dir.join(METRICS_FILE);
    let best_path = dir.join(BEST_CHECKPOINT);
    let mut metrics = format!("{METRICS_HEADER}\n");
    write_atomic(&metrics_path, metrics.as_bytes()).map_err(io_err(&metrics_path))?;
    // best = highest selection accuracy, ties to the lower loss, then earlier
    let mut best: Option<(usize, f64, f64)> = None;
    let result = train_epochs(
        &mut model,
        &splits.train,
        splits.val.as_ref(),
        &tcfg,
        &mut state,
        |rec, m, ema| {
            metrics.push_str(&metrics_line(rec));
            metrics.push('\n');
            write_atomic(&metrics_path, metrics.as_bytes())?;
            let better = match best {
                None => true,
                Some((_, acc, loss)) => rec.val_acc > acc || (rec.val_acc == acc && rec.val_loss < loss),
            };
            if better {
                best = Some((rec.epoch, rec.val_acc, rec.val_loss));
                checkpoint::save(&best_path, m, ema)?;
            }
            Ok(())
        },
    );

    let mut summary = String::new();
    let _ = writeln!(summary, "parameters={}", model.spec.param_count());
    let _ = writeln!(summary, "train_samples={n}");
    let _ = writeln!(summary, "sigma={sigma}");
    let _ = writeln!(summary, "q={q}");
    let _ = writeln!(summary, "delta={}", cfg.delta);
    let summary_path = dir.join(SUMMARY_FILE);
    let outcome = match result {
        Ok(o) => o,
        Err(dpsc::Error::BudgetExceeded { spent, ceiling }) => {
            let _ = writeln!(summary, "status=budget_exceeded");
            let _ = writeln!(summary, "epsilon_next_step={spent}");
            let _ = writeln!(summary, "epsilon_ceiling={ceiling}");
            write_atomic(&summary_path, summary.as_bytes()).map_err(io_err(&summary_path))?;
            return Err(CliError::Budget(format!(
                "the next step would spend ε={spent:.4} > ceiling {ceiling}"
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let ema_params = match &state.ema {
        Some(e) => Some(model.params.with_flat(&e.shadow)?),
        None => None,
    };
    let final_path = dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&final_path, &model, ema_params.as_ref()).map_err(io_err(&final_path))?;
    if best.is_none() {
        // zero epochs: the initial weights are both final and best
        checkpoint::save(&best_path, &model, ema_params.as_ref()).map_err(io_err(&best_path))?;
    }

    let _ = writeln!(summary, "status=complete");
    let _ = writeln!(summary, "steps={}", state.nadam.t);
    let eps = outcome.records.last().map_or(0.0, |r| r.epsilon_spent);
    let _ = writeln!(summary, "epsilon_spent={eps}");
    if let Some(r) = outcome.records.last() {
        let _ = writeln!(summary, "final_train_loss={}", r.train_loss);
        let _ = writeln!(summary, "final_train_acc={}", r.train_acc);
        let _ = writeln!(summary, "final_val_loss={}", r.val_loss);
        let _ = writeln!(summary, "final_val_acc={}", r.val_acc);
    }
    if let Some((epoch, acc, _)) = best {
        let _ = writeln!(summary, "best_epoch={epoch}");
        let _ = writeln!(summary, "best_val_acc={acc}");
    }
    if let Some(test) = &splits.test {
        let (loss, acc) = model.evaluate(&test.images, &test.labels, tcfg.eval_chunk)?;
        let _ = writeln!(summary, "test_loss={loss}");
        let _ = writeln!(summary, "test_acc={acc}");
        if let Some(p) = &ema_params {
            let m = Model::new(model.spec.clone(), p.clone())?;
            let (loss, acc) = m.evaluate(&test.images, &test.labels, tcfg.eval_chunk)?;
            let _ = writeln!(summary, "ema_test_loss={loss}");
            let _ = writeln!(summary, "ema_test_acc={acc}");
        }
    }
    let audit = &outcome.clip_audit;
    let _ = writeln!(summary, "clip_samples={}", audit.samples);
    let _ = writeln!(summary, "clip_max_norm_before={}", audit.max_norm_before);
    let _ = writeln!(summary, "clip_max_norm_after={}", audit.max_norm_after);
    let _ = writeln!(summary, "clip_violations={}", audit.violations);
    let _ = writeln!(summary, "unaccounted_feedback={}", outcome.unaccounted_feedback);
    if outcome.unaccounted_feedback {
        let source = match cfg.validation {
            Validation::None => "the full training set",
            Validation::Test => "the test split",
            Validation::Holdout(_) => "the holdout split",
        };
        let _ = writeln!(
            summary,
            "note=the learning-rate schedule and best-checkpoint choice read losses on {source}; that channel is outside the reported epsilon"
        );
    }
    write_atomic(&summary_path, summary.as_bytes()).map_err(io_err(&summary_path))?;
    writeln!(out, "epsilon_spent={eps}")?;
    writeln!(out, "out_dir={}", dir.display())?;
    Ok(())
}

/// Flags of the `account` command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccountArgs {
    pub q: Option<f64>,
    pub sigma: Option<f64>,
    pub steps: Option<u64>,
    pub delta: f64,
    pub target_epsilon: Option<f64>,
}

pub fn account(args: &AccountArgs, out: Out<'_>) -> Result<(), CliError> {
    let q = args.q.ok_or_else(|| CliError::config("--q is required"))?;
    let steps = args.steps.ok_or_else(|| CliError::config("--steps is required"))?;
    let sigma = match (args.sigma, args.target_epsilon) {
        (Some(s), None) => s,
        (None, Some(target)) => {
            let s = calibrate_sigma(target, q, steps, args.delta)?;
            writeln!(out, "sigma={s}")?;
            s
        }
        _ => return Err(CliError::config("give exactly one of --sigma and --target-epsilon")),
    };
    accountant::PrivacyParams {
        q,
        sigma,
        steps,
        delta: args.delta,
    }
    .validate()?;
    let curve = sampled_gaussian_curve(q, sigma, &default_orders())?.compose(steps);
    let log_inv = -args.delta.ln();
    writeln!(out, "alpha,rdp,epsilon")?;
    for (a, e) in curve.orders().iter().zip(curve.values()) {
        writeln!(out, "{a},{e},{}", e + log_inv / (a - 1.0))?;
    }
    let (eps, alpha) = curve.to_epsilon(args.delta);
    writeln!(out, "epsilon={eps} alpha={alpha} delta={}", args.delta)?;
    Ok(())
}

/// Loads a checkpoint, mapping every failure to a data error.
pub fn load_checkpoint<T: dpsc::Scalar>(path: &Path) -> Result<Checkpoint<T>, CliError> {
    checkpoint::load(path).map_err(|e| CliError::data(format!("checkpoint {}: {e}", path.display())))
}

fn fit_check(model: &Model<impl dpsc::Scalar>, data: &Dataset<impl dpsc::Scalar>) -> Result<(), CliError> {
    let classes = model.spec.classes()?;
    if data.sample_shape() != model.spec.input || data.classes > classes {
        return Err(CliError::data(format!(
            "data ({:?}, {} classes) does not fit the checkpoint's network ({:?}, {classes} classes)",
            data.sample_shape(),
            data.classes,
            model.spec.input
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianArgs {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub k: usize,
    pub iters: usize,
    pub tol: f64,
    pub slice: usize,
    pub seed: u64,
    pub ema: bool,
    pub max_hvp_calls: Option<usize>,
    pub time_limit: Option<Duration>,
    /// Directory for `hessian.txt` and `eigenvalues.csv`.
    pub out: Option<PathBuf>,
}

pub fn hessian(args: &HessianArgs, out: Out<'_>) -> Result<(), CliError> {
    if args.k == 0 || args.iters == 0 || args.tol.is_nan() || args.tol < 0.0 || args.slice == 0 {
        return Err(CliError::config(
            "--k, --iters and --slice must be positive and --tol non-negative",
        ));
    }
    let ckpt = load_checkpoint::<f64>(&args.checkpoint)?;
    let model = if args.ema { ckpt.eval_model() } else { ckpt.model };
    let (data, _) = load_source(&args.data)?;
    let data = data.cast::<f64>();
    fit_check(&model, &data)?;
    let protocol = Protocol {
        k: args.k,
        max_iters: args.iters,
        tol: args.tol,
        seed: args.seed,
        max_hvp_calls: args.max_hvp_calls,
        time_limit: args.time_limit,
    };
    let report = analyze_model(&model, &data, args.slice, 1.0, &protocol)?;
    let record = report.to_record();
    out.write_all(record.as_bytes())?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("hessian.txt");
        write_atomic(&path, record.as_bytes()).map_err(io_err(&path))?;
        if report.eigenvalues.len() > 1 {
            let path = dir.join("eigenvalues.csv");
            write_atomic(&path, report.eigen_csv().as_bytes()).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramArgs {
    pub checkpoint: PathBuf,
    pub tap: String,
    pub data: DataSource,
    pub bins: usize,
    pub range: Range,
    pub samples: usize,
    pub seed: u64,
    pub ema: bool,
    pub out: PathBuf,
}

/// `symmetric`, `auto`, or `lo:hi`.
pub fn parse_range(s: &str) -> Result<Range, CliError> {
    match s {
        "symmetric" => Ok(Range::Symmetric),
        "auto" => Ok(Range::Auto),
        _ => {
            let (lo, hi) = s
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)))
                .ok_or_else(|| CliError::config(format!("range `{s}`: expected symmetric, auto or lo:hi")))?;
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(CliError::config(format!("range `{s}` must satisfy lo < hi")));
            }
            Ok(Range::Fixed(lo, hi))
        }
    }
}

pub fn histogram_cmd(args: &HistogramArgs, out: Out<'_>) -> Result<(), CliError> {
    if args.bins == 0 || args.samples == 0 {
        return Err(CliError::config("--bins and --samples must be positive"));
    }
    let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
    let model = if args.ema { ckpt.eval_model() } else { ckpt.model };
    if !model.spec.has_tap(&args.tap) {
        return Err(CliError::config(format!(
            "unknown tap `{}`; available: {}",
            args.tap,
            model.spec.taps().join(", ")
        )));
    }
    let (data, _) = load_source(&args.data)?;
    fit_check(&model, &data)?;
    let idx = seeded_subset(
        data.len(),
        args.samples,
        &mut keyed_rng(args.seed, stream::DATA_SLICE, 3, 0),
    );
    let batch = data.images.gather_samples(&idx)?;
    let caps = capture(&model, &batch, &[args.tap.as_str()])?;
    let h = histogram(caps[0].values.data(), args.bins, args.range)?;
    export_csv(&h, &args.out).map_err(io_err(&args.out))?;
    let m = &h.moments;
    writeln!(out, "tap={}", caps[0].tap)?;
    writeln!(out, "# mean={}, std={}, skew={}, n={}", m.mean, m.std, m.skew, m.n)?;
    writeln!(out, "out={}", args.out.display())?;
    Ok(())
}

/// Default sample shape and class count used when counting parameters.
pub fn default_shape(arch: Arch) -> ([usize; 3], usize) {
    match arch {
        Arch::Resnet9 | Arch::Wrn16_4 => ([3, 32, 32], 10),
        Arch::Tiny | Arch::Mlp => ([3, 8, 8], 10),
    }
}

pub fn paramcount(
    arch: Arch,
    scale_norm: bool,
    groups: GroupSpec,
    width: Option<usize>,
    out: Out<'_>,
) -> Result<(), CliError> {
    let (input, classes) = default_shape(arch);
    let spec = arch.build(
        scale_norm,
        groups,
        width.unwrap_or(arch.default_width()),
        input,
        classes,
    );
    spec.validate()?;
    writeln!(out, "layer,kind,params")?;
    for (i, layer) in spec.layers.iter().enumerate() {
        writeln!(out, "{i},{},{}", layer.kind(), layer.param_count())?;
    }
    writeln!(out, "total={}", spec.param_count())?;
    Ok(())
}
