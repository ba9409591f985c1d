//! DP-SGD: Poisson lot sampling, per-sample gradients with augmentation
//! multiplicity, clipping, Gaussian noising, NAdam with a plateau schedule,
//! EMA weight averaging and the epoch loop tying them together.

mod optim;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::nn::{forward, predictions, Model};
use crate::{Error, Graph, Result, Scalar, Tensor};

pub use optim::{Ema, Nadam, OptimizerState, Plateau};
pub use train::{train_epochs, ClipAudit, EpochRecord, TrainConfig, TrainOutcome};

/// Slack allowed on a clipped norm before it counts as a violation.
pub const CLIP_SLACK: f64 = 1e-6;

/// Samples whose gradients are held in memory at once while summing a lot.
const CHUNK: usize = 16;

/// Random-stream domains for [`keyed_rng`].
pub mod stream {
    pub const LOT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DATA_SLICE: u64 = 4;
    pub const PROBE: u64 = 5;
}

/// Counter-based generator: the stream depends only on the key, never on
/// how many draws other consumers made.
pub fn keyed_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, word) in [seed, domain, a, b].iter().enumerate() {
        key[8 * i..8 * i + 8].copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// DP-SGD mechanism settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpConfig {
    /// When false, lots are averaged plainly: no clipping, no noise.
    pub enabled: bool,
    pub clip_bound: f64,
    pub noise_multiplier: f64,
    pub expected_lot_size: usize,
    /// Augmented copies averaged per sample; augmentation is only applied
    /// when this exceeds 1.
    pub multiplicity: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            enabled: true,
            clip_bound: 1.5,
            noise_multiplier: 1.0,
            expected_lot_size: 1024,
            multiplicity: 1,
        }
    }
}

impl DpConfig {
    /// `q = L / N`.
    pub fn sampling_rate(&self, n: usize) -> f64 {
        self.expected_lot_size as f64 / n as f64
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        if self.expected_lot_size == 0 || self.expected_lot_size > n {
            return Err(Error::config(format!(
                "expected lot size {} must lie in 1..={n}",
                self.expected_lot_size
            )));
        }
        if self.multiplicity == 0 {
            return Err(Error::config("augmentation multiplicity must be ≥ 1"));
        }
        if !(self.clip_bound > 0.0) {
            return Err(Error::config(format!(
                "clip bound {} must be positive",
                self.clip_bound
            )));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "noise multiplier {} must be finite and non-negative",
                self.noise_multiplier
            )));
        }
        if self.enabled && self.noise_multiplier > 0.0 && self.clip_bound.is_infinite() {
            return Err(Error::config("noise needs a finite clip bound"));
        }
        Ok(())
    }
}

/// Each index in `0..n` joins independently with probability `q`.
pub fn poisson_sample_lot<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("sampling rate {q} outside [0, 1]")));
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}

/// Euclidean norm accumulated in double precision.
pub fn norm<T: Scalar>(g: &[T]) -> f64 {
    g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Scales `g` onto the ball of radius `c` when it lies outside; returns the
/// norm before clipping. Vectors already inside are left untouched, so an
/// infinite bound is a bitwise no-op.
pub fn clip<T: Scalar>(g: &mut [T], c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::config(format!("clip bound {c} must be positive")));
    }
    let n = norm(g);
    if n > c {
        let s = c / n;
        for v in g.iter_mut() {
            *v = T::lit(v.to_f64_lossy() * s);
        }
    }
    Ok(n)
}

/// `(sum + z) / lot` with `z ~ N(0, (σC)²)` per coordinate, drawn from `rng`
/// (consumed whenever σ > 0, regardless of the sum's contents).
pub fn add_noise_and_scale<T: Scalar, R: Rng + ?Sized>(sum: &[T], sigma: f64, c: f64, lot: f64, rng: &mut R) -> Vec<T> {
    if sigma == 0.0 {
        return scale_mean(sum, lot);
    }
    let l = T::lit(lot);
    let std = sigma * c;
    sum.iter()
        .map(|&s| {
            let z: f64 = rng.sample(StandardNormal);
            (s + T::lit(std * z)) / l
        })
        .collect()
}

/// `sum / lot`, elementwise.
pub fn scale_mean<T: Scalar>(sum: &[T], lot: f64) -> Vec<T> {
    let l = T::lit(lot);
    sum.iter().map(|&s| s / l).collect()
}

/// Privatised mean of already-clipped gradients: `(Σ ĝᵢ + z) / L`.
pub fn privatize<T: Scalar, R: Rng + ?Sized>(
    clipped: &[Vec<T>],
    dim: usize,
    sigma: f64,
    c: f64,
    expected_lot: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(sigma >= 0.0) || !(expected_lot > 0.0) {
        return Err(Error::config(format!(
            "privatize needs σ ≥ 0 and L > 0 (σ={sigma}, L={expected_lot})"
        )));
    }
    let mut sum = vec![T::zero(); dim];
    for (i, g) in clipped.iter().enumerate() {
        if g.len() != dim {
            return Err(Error::dim(format!(
                "gradient {i} has {} entries, expected {dim}",
                g.len()
            )));
        }
        let n = norm(g);
        if n > c + CLIP_SLACK {
            return Err(Error::Contract(format!(
                "gradient {i} has norm {n} above clip bound {c}"
            )));
        }
        for (s, &v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    Ok(add_noise_and_scale(&sum, sigma, c, expected_lot, rng))
}

/// Augmentation hook: maps one `1×C×H×W` image to another of the same shape.
pub type AugmentFn<'a, T> = dyn Fn(&Tensor<T>, &mut ChaCha8Rng) -> Result<Tensor<T>> + Sync + 'a;

/// Randomness key for a step: `(seed, step)`; samples add their index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepKey {
    pub seed: u64,
    pub step: u64,
}

/// One sample's gradient (averaged over its augmented copies) with the
/// matching loss and whether the first copy was classified correctly.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad<T> {
    pub index: usize,
    pub grad: Vec<T>,
    pub loss: f64,
    pub correct: bool,
}

fn one_sample<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    index: usize,
    k: usize,
    augment: Option<&AugmentFn<'_, T>>,
    key: StepKey,
) -> Result<SampleGrad<T>> {
    let x = data.images.sample(index)?;
    let label = [data.labels[index]];
    let mut rng = keyed_rng(key.seed, stream::AUGMENT, key.step, index as u64);
    let mut mean = vec![T::zero(); model.params.numel()];
    let (mut loss, mut correct) = (0.0, false);
    for copy in 1..=k {
        let input = match augment {
            Some(f) => {
                let y = f(&x, &mut rng)?;
                if y.shape() != x.shape() {
                    return Err(Error::dim(format!(
                        "augmentation changed shape {:?} to {:?}",
                        x.shape(),
                        y.shape()
                    )));
                }
                y
            }
            None => x.clone(),
        };
        let g = Graph::new();
        let params = model.leaves(&g);
        let logits = forward(&model.spec, &params, g.constant(input), None)?;
        let l = logits.softmax_cross_entropy(&label)?;
        let grads = g.gradients(l, &params)?;
        if copy == 1 {
            correct = predictions(&logits.value())[0] == label[0];
        }
        // running mean: identical copies reproduce the single-copy gradient exactly
        let inv = T::one() / T::lit(copy as f64);
        let lv = l.value().item()?.to_f64_lossy();
        loss += (lv - loss) / copy as f64;
        let mut off = 0;
        for t in &grads {
            for (m, &v) in mean[off..off + t.numel()].iter_mut().zip(t.data()) {
                *m += (v - *m) * inv;
            }
            off += t.numel();
        }
    }
    Ok(SampleGrad {
        index,
        grad: mean,
        loss,
        correct,
    })
}

/// Per-sample gradients for the lot, in lot order. Samples are independent,
/// so parallel evaluation does not change any value.
pub fn per_sample_gradients<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    lot: &[usize],
    k: usize,
    augment: Option<&AugmentFn<'_, T>>,
    key: StepKey,
) -> Result<Vec<SampleGrad<T>>> {
    if k == 0 {
        return Err(Error::config("augmentation multiplicity must be ≥ 1"));
    }
    if let Some(&bad) = lot.iter().find(|&&i| i >= data.len()) {
        return Err(Error::dim(format!("lot index {bad} outside dataset of {}", data.len())));
    }
    lot.par_iter()
        .map(|&i| one_sample(model, data, i, k, augment, key))
        .collect()
}

/// Reduction of one lot: the (optionally clipped) gradient sum plus
/// bookkeeping, accumulated in ascending lot order.
#[derive(Clone, Debug, PartialEq)]
pub struct LotSum<T> {
    pub sum: Vec<T>,
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
    /// Largest norm before and after clipping.
    pub max_norm_before: f64,
    pub max_norm_after: f64,
    /// Clipped gradients whose norm exceeded the bound plus slack.
    pub violations: usize,
}

/// Sums per-sample gradients over a lot, clipping each to `clip` when given.
/// Works through the lot in fixed-size chunks to bound memory.
pub fn lot_sum<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    lot: &[usize],
    k: usize,
    augment: Option<&AugmentFn<'_, T>>,
    key: StepKey,
    clip_bound: Option<f64>,
) -> Result<LotSum<T>> {
    let mut acc = LotSum {
        sum: vec![T::zero(); model.params.numel()],
        loss_sum: 0.0,
        correct: 0,
        count: 0,
        max_norm_before: 0.0,
        max_norm_after: 0.0,
        violations: 0,
    };
    for chunk in lot.chunks(CHUNK) {
        for mut s in per_sample_gradients(model, data, chunk, k, augment, key)? {
            let (before, after) = match clip_bound {
                Some(c) => {
                    let before = clip(&mut s.grad, c)?;
                    let after = norm(&s.grad);
                    if after > c + CLIP_SLACK {
                        acc.violations += 1;
                    }
                    (before, after)
                }
                None => {
                    let n = norm(&s.grad);
                    (n, n)
                }
            };
            acc.max_norm_before = acc.max_norm_before.max(before);
            acc.max_norm_after = acc.max_norm_after.max(after);
            for (a, &v) in acc.sum.iter_mut().zip(&s.grad) {
                *a += v;
            }
            acc.loss_sum += s.loss;
            acc.correct += usize::from(s.correct);
            acc.count += 1;
        }
    }
    Ok(acc)
}
