use crate::accountant::{self, RdpCurve};
use crate::data::{augment, Dataset};
use crate::nn::{Model, ParamSet};
use crate::{Error, Result, Scalar};

use super::optim::OptimizerState;
use super::{
    add_noise_and_scale, keyed_rng, lot_sum, poisson_sample_lot, scale_mean, stream, AugmentFn, DpConfig, StepKey,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub dp: DpConfig,
    pub delta: f64,
    /// Halt with a budget error before any step that would pass this ε.
    pub epsilon_ceiling: Option<f64>,
    /// Samples per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64, dp: DpConfig) -> Self {
        TrainConfig {
            epochs,
            seed,
            dp,
            delta: accountant::DEFAULT_DELTA,
            epsilon_ceiling: None,
            eval_chunk: 256,
        }
    }
}

/// Metrics for one finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Steps applied so far.
    pub step: u64,
    /// Mean per-sample loss over the epoch's lots, at the weights in force
    /// when each lot was drawn.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub ema_val_loss: Option<f64>,
    pub ema_val_acc: Option<f64>,
    /// Learning rate for the next epoch.
    pub lr: f64,
    /// `f64::INFINITY` whenever the run is not privately accounted.
    pub epsilon_spent: f64,
}

/// Clipping evidence gathered over a whole run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipAudit {
    pub samples: u64,
    pub max_norm_before: f64,
    pub max_norm_after: f64,
    pub violations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub clip_audit: ClipAudit,
    /// True when the learning-rate schedule consumed loss evaluations
    /// (validation, or training loss without a validation split), a channel
    /// the accountant does not cover.
    pub unaccounted_feedback: bool,
}

/// Runs `cfg.epochs` epochs of `ceil(N / L)` Poisson-sampled steps each.
/// `on_epoch` sees every record together with the current raw weights and EMA
/// weights; an error from it aborts training.
pub fn train_epochs<T, F>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig,
    state: &mut OptimizerState<T>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    T: Scalar,
    F: FnMut(&EpochRecord, &Model<T>, Option<&ParamSet<T>>) -> Result<()>,
{
    let n = train.len();
    let dp = cfg.dp;
    dp.validate(n)?;
    model.check_batch(&train.images.sample(0)?)?;
    let q = dp.sampling_rate(n);
    let steps_per_epoch = accountant::steps_per_epoch(n, dp.expected_lot_size);
    let accounted = dp.enabled && dp.noise_multiplier > 0.0;
    let curve: Option<RdpCurve> = if accounted {
        Some(accountant::sampled_gaussian_curve(
            q,
            dp.noise_multiplier,
            &accountant::default_orders(),
        )?)
    } else {
        None
    };
    let epsilon_after = |steps: u64| match &curve {
        Some(c) => c.compose(steps).to_epsilon(cfg.delta).0,
        None => f64::INFINITY,
    };
    let aug_fn = |x: &crate::Tensor<T>, rng: &mut rand_chacha::ChaCha8Rng| augment(x, rng);
    let augmentation: Option<&AugmentFn<'_, T>> = if dp.multiplicity > 1 { Some(&aug_fn) } else { None };
    let clip_bound = dp.enabled.then_some(dp.clip_bound);

    let mut flat = model.params.to_flat();
    let mut audit = ClipAudit::default();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = state.nadam.t;
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..steps_per_epoch {
            if let Some(ceiling) = cfg.epsilon_ceiling {
                let next = epsilon_after(step + 1);
                if next > ceiling {
                    return Err(Error::BudgetExceeded { spent: next, ceiling });
                }
            }
            let lot = poisson_sample_lot(n, q, &mut keyed_rng(cfg.seed, stream::LOT, step, 0))?;
            let key = StepKey { seed: cfg.seed, step };
            let sum = lot_sum(model, train, &lot, dp.multiplicity, augmentation, key, clip_bound)?;
            audit.samples += sum.count as u64;
            audit.violations += sum.violations as u64;
            audit.max_norm_before = audit.max_norm_before.max(sum.max_norm_before);
            audit.max_norm_after = audit.max_norm_after.max(sum.max_norm_after);
            loss_sum += sum.loss_sum;
            correct += sum.correct;
            seen += sum.count;
            let grad = if dp.enabled {
                let mut rng = keyed_rng(cfg.seed, stream::NOISE, step, 0);
                add_noise_and_scale(
                    &sum.sum,
                    dp.noise_multiplier,
                    dp.clip_bound,
                    dp.expected_lot_size as f64,
                    &mut rng,
                )
            } else if sum.count == 0 {
                // nothing drawn and nothing to hide: skip the update
                step += 1;
                continue;
            } else {
                scale_mean(&sum.sum, sum.count as f64)
            };
            state.nadam.step(&mut flat, &grad)?;
            model.params.assign_flat(&flat)?;
            if let Some(ema) = state.ema.as_mut() {
                ema.update(&flat)?;
            }
            step += 1;
        }
        let eval_set = val.unwrap_or(train);
        let (val_loss, val_acc) = model.evaluate(&eval_set.images, &eval_set.labels, cfg.eval_chunk)?;
        let ema_params = match &state.ema {
            Some(e) => Some(model.params.with_flat(&e.shadow)?),
            None => None,
        };
        let (ema_val_loss, ema_val_acc) = match &ema_params {
            Some(p) => {
                let m = Model {
                    spec: model.spec.clone(),
                    params: p.clone(),
                };
                let (l, a) = m.evaluate(&eval_set.images, &eval_set.labels, cfg.eval_chunk)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        let lr = state.schedule.observe(val_loss);
        state.nadam.lr = lr;
        let record = EpochRecord {
            epoch,
            step,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            train_acc: if seen > 0 {
                correct as f64 / seen as f64
            } else {
                f64::NAN
            },
            val_loss,
            val_acc,
            ema_val_loss,
            ema_val_acc,
            lr,
            epsilon_spent: epsilon_after(step),
        };
        on_epoch(&record, model, ema_params.as_ref())?;
        records.push(record);
    }
    Ok(TrainOutcome {
        records,
        clip_audit: audit,
        unaccounted_feedback: cfg.epochs > 0,
    })
}
