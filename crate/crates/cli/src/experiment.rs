//! Desk-scale comparison of ScaleNorm and plain residual networks under the
//! same privacy budget: several seeds per variant on a seeded CIFAR-10
//! subset, compared by median final test accuracy.

use std::path::PathBuf;

use dpsc::accountant::steps_per_epoch;
use dpsc::dp::{train_epochs, DpConfig, OptimizerState, TrainConfig};
use dpsc::nn::{GroupSpec, Model};

use crate::commands::{load_splits, resolve_sigma};
use crate::config::{Arch, DataSource, Noise, RunConfig, Validation};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergencePlan {
    pub cifar_dir: PathBuf,
    pub arch: Arch,
    pub groups: GroupSpec,
    pub width: usize,
    pub train_subset: usize,
    pub epochs: usize,
    pub lot_size: usize,
    pub clip: f64,
    pub target_epsilon: f64,
    pub delta: f64,
    pub lr: f64,
    pub seeds: Vec<u64>,
    /// Allowed shortfall of the ScaleNorm median, in accuracy units.
    pub margin: f64,
}

impl ConvergencePlan {
    /// 5 000 training images, 10 epochs, ε = 7.42, three seeds, ResNet-9.
    pub fn standard(cifar_dir: PathBuf) -> Self {
        ConvergencePlan {
            cifar_dir,
            arch: Arch::Resnet9,
            groups: GroupSpec::Count(32),
            width: 8,
            train_subset: 5000,
            epochs: 10,
            lot_size: 256,
            clip: 1.5,
            target_epsilon: 7.42,
            delta: 1e-5,
            lr: 1e-3,
            seeds: vec![0, 1, 2],
            margin: 0.005,
        }
    }

    fn run_config(&self, scale_norm: bool, seed: u64) -> RunConfig {
        RunConfig {
            architecture: self.arch,
            scale_norm,
            groups: self.groups,
            width: self.width,
            data: DataSource::Cifar10(self.cifar_dir.clone()),
            train_subset: Some(self.train_subset),
            validation: Validation::None,
            epochs: self.epochs,
            lot_size: self.lot_size,
            clip: self.clip,
            noise: Noise::TargetEpsilon(self.target_epsilon),
            delta: self.delta,
            epsilon_ceiling: None,
            dp: true,
            lr: self.lr,
            multiplicity: 1,
            ema_tau: None,
            seed,
            out_dir: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRun {
    pub scale_norm: bool,
    pub seed: u64,
    pub test_acc: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceOutcome {
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub runs: Vec<VariantRun>,
    pub median_scale_norm: f64,
    pub median_plain: f64,
}

impl ConvergenceOutcome {
    pub fn holds(&self, margin: f64) -> bool {
        self.median_scale_norm >= self.median_plain - margin
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Trains every (variant, seed) pair and reports final raw-weight test
/// accuracies. The training subset is keyed by the seed, so both variants of
/// one seed see the same images.
pub fn run_convergence(
    plan: &ConvergencePlan,
    mut progress: impl FnMut(&VariantRun),
) -> Result<ConvergenceOutcome, CliError> {
    if plan.seeds.is_empty() {
        return Err(CliError::config("the comparison needs at least one seed"));
    }
    let mut runs = Vec::new();
    let mut calibration = None;
    for &seed in &plan.seeds {
        for scale_norm in [true, false] {
            let cfg = plan.run_config(scale_norm, seed);
            let splits = load_splits(&cfg)?;
            let test = splits
                .test
                .as_ref()
                .ok_or_else(|| CliError::data("the CIFAR-10 source has no test split"))?;
            let n = splits.train.len();
            let sigma = resolve_sigma(&cfg, n)?;
            let q = cfg.lot_size as f64 / n as f64;
            let steps = cfg.epochs as u64 * steps_per_epoch(n, cfg.lot_size);
            calibration = Some((sigma, q, steps));
            let spec = cfg.architecture.build(
                scale_norm,
                cfg.groups,
                cfg.width,
                splits.train.sample_shape(),
                splits.train.classes,
            );
            let mut model = Model::<f32>::init(spec, seed)?;
            let dp = DpConfig {
                enabled: true,
                clip_bound: cfg.clip,
                noise_multiplier: sigma,
                expected_lot_size: cfg.lot_size,
                multiplicity: 1,
            };
            let tcfg = TrainConfig {
                delta: cfg.delta,
                ..TrainConfig::new(cfg.epochs, seed, dp)
            };
            let mut state = OptimizerState::new(&model.params.to_flat(), cfg.lr, None)?;
            let outcome = train_epochs(&mut model, &splits.train, None, &tcfg, &mut state, |_, _, _| Ok(()))?;
            let (_, test_acc) = model.evaluate(&test.images, &test.labels, tcfg.eval_chunk)?;
            let run = VariantRun {
                scale_norm,
                seed,
                test_acc,
                epsilon: outcome.records.last().map_or(0.0, |r| r.epsilon_spent),
            };
            progress(&run);
            runs.push(run);
        }
    }
    let (sigma, q, steps) = calibration.expect("at least one run");
    let pick = |sn: bool| median(runs.iter().filter(|r| r.scale_norm == sn).map(|r| r.test_acc).collect());
    Ok(ConvergenceOutcome {
        sigma,
        q,
        steps,
        median_scale_norm: pick(true),
        median_plain: pick(false),
        runs,
    })
}
