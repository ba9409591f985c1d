//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Result, Scalar};

/// Relative L2 error between autodiff and finite-difference gradients, per
/// input tensor.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn eval<T: Scalar, F>(inputs: &[Tensor<T>], f: &F) -> Result<f64>
where
    F: for<'g> Fn(&[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&vars)?;
    g.ensure_finite()?;
    Ok(out.value().item()?.to_f64_lossy())
}

/// Compares `∂f/∂input` from the graph with `(f(x+h) − f(x−h)) / 2h`.
///
/// `f` must return a one-element tensor.
pub fn gradcheck<T: Scalar, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&vars)?;
    let analytic = g.gradients(out, &vars)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + T::lit(h);
            let up = eval(&probe, &f)?;
            probe[k].data_mut()[j] = x0 - T::lit(h);
            let down = eval(&probe, &f)?;
            probe[k].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let auto = a.data()[j].to_f64_lossy();
            diff2 += (auto - numeric).powi(2);
            a2 += auto * auto;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt()).max(1e-12);
        rel_errors.push(diff2.sqrt() / scale);
    }
    Ok(GradCheckReport { rel_errors })
}

/// Random tensor whose entries are distinct and at least `2/numel` apart, so that
/// pooling argmaxes survive finite-difference perturbations.
fn spread<T: Scalar>(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<T> {
    let n = crate::tensor::numel(shape);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| T::lit(-1.0 + 2.0 * perm[i] as f64 / n as f64))
}

pub type LossFn<T> = for<'g> fn(&[Var<'g, T>]) -> Result<Var<'g, T>>;

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted<'g, T: Scalar>(y: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| T::lit(0.3 + ((i * 7) % 11) as f64 / 10.0));
    y.mul(y.graph().constant(w))?.sum_all()
}

/// Input generator of a gradient-check case.
pub type MakeInputs<T> = fn(&mut ChaCha8Rng) -> Vec<Tensor<T>>;

/// Every differentiable layer operation as `(name, scalar loss, random inputs)`.
pub fn layer_op_cases<T: Scalar>() -> Vec<(&'static str, LossFn<T>, MakeInputs<T>)> {
    vec![
        (
            "conv2d",
            |v| weighted(v[0].conv2d(v[1], Some(v[2]), 1, 1)?),
            |r| {
                let c = r.random_range(1..3);
                let f = r.random_range(1..3);
                vec![
                    Tensor::randn(&[2, c, 4, 4], 1.0, r),
                    Tensor::randn(&[f, c, 3, 3], 0.5, r),
                    Tensor::randn(&[f], 0.5, r),
                ]
            },
        ),
        (
            "conv2d_strided",
            |v| weighted(v[0].conv2d(v[1], None, 2, 0)?),
            |r| {
                vec![
                    Tensor::randn(&[1, 2, 5, 5], 1.0, r),
                    Tensor::randn(&[2, 2, 3, 3], 0.5, r),
                ]
            },
        ),
        (
            "group_norm",
            |v| weighted(v[0].group_norm(2, v[1], v[2], T::lit(1e-5))?),
            |r| {
                vec![
                    Tensor::randn(&[2, 4, 3, 3], 1.0, r),
                    Tensor::randn(&[4], 0.3, r).map(|x| x + T::one()),
                    Tensor::randn(&[4], 0.3, r),
                ]
            },
        ),
        (
            "mish",
            |v| weighted(v[0].mish()?),
            |r| vec![Tensor::randn(&[3, 5], 2.0, r)],
        ),
        (
            "max_pool",
            |v| weighted(v[0].max_pool2d(2, 2)?),
            |r| vec![spread(&[1, 2, 4, 4], r)],
        ),
        (
            "global_max_pool",
            |v| weighted(v[0].global_max_pool()?),
            |r| vec![spread(&[2, 3, 3, 3], r)],
        ),
        (
            "global_avg_pool",
            |v| weighted(v[0].global_avg_pool()?),
            |r| vec![Tensor::randn(&[2, 3, 3, 3], 1.0, r)],
        ),
        (
            "linear",
            |v| weighted(v[0].linear(v[1], v[2])?),
            |r| {
                vec![
                    Tensor::randn(&[3, 4], 1.0, r),
                    Tensor::randn(&[4, 2], 1.0, r),
                    Tensor::randn(&[2], 1.0, r),
                ]
            },
        ),
        (
            "cross_entropy",
            |v| v[0].softmax_cross_entropy(&[0, 3, 1]),
            |r| vec![Tensor::randn(&[3, 4], 2.0, r)],
        ),
    ]
}

/// Worst relative error per layer operation over `configs` random input
/// draws seeded `first_seed..`. The finite-difference step is 1e-3 for
/// 32-bit scalars and 1e-5 otherwise.
pub fn run_suite<T: Scalar>(configs: u64, first_seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let h = if std::mem::size_of::<T>() <= 4 { 1e-3 } else { 1e-5 };
    layer_op_cases::<T>()
        .into_iter()
        .map(|(name, loss, make)| {
            let mut worst = 0.0f64;
            for seed in first_seed..first_seed + configs {
                let inputs = make(&mut ChaCha8Rng::seed_from_u64(seed));
                worst = worst.max(gradcheck(&inputs, h, loss)?.max_rel_error());
            }
            Ok((name, worst))
        })
        .collect()
}
