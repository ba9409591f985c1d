//! Layer-level differentiable operations composed from graph primitives.

use std::rc::Rc;

use crate::{Error, Result, Scalar};

use super::graph::ConvMode;
use super::kernels::{self, ConvGeom};
use super::{Tensor, Var};

/// Group-norm output split into the normalised tensor and the affine result.
pub struct GroupNormParts<'g, T: Scalar> {
    pub normalized: Var<'g, T>,
    pub output: Var<'g, T>,
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Zero-padded cross-correlation of an `N×C×H×W` input with an
    /// `F×C×k×k` kernel, plus an optional per-filter bias.
    pub fn conv2d(
        self,
        kernel: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        let geom = Rc::new(ConvGeom::new(&self.shape(), &kernel.shape(), stride, padding)?);
        let y = self.conv_raw(ConvMode::Forward, kernel, &geom);
        match bias {
            None => Ok(y),
            Some(b) => {
                if b.shape() != [geom.out_channels] {
                    return Err(Error::dim(format!(
                        "conv bias shape {:?}, expected [{}]",
                        b.shape(),
                        geom.out_channels
                    )));
                }
                let b = b.reshape(&[1, geom.out_channels, 1, 1])?;
                y.add(b.broadcast_to(&geom.output_shape())?)
            }
        }
    }

    /// Group normalisation with per-channel affine parameters.
    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        Ok(self.group_norm_parts(groups, gamma, beta, eps)?.output)
    }

    pub fn group_norm_parts(
        self,
        groups: usize,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: T,
    ) -> Result<GroupNormParts<'g, T>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::dim(format!("group_norm expects rank 4, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        if eps <= T::zero() {
            return Err(Error::config("group_norm eps must be positive"));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if p.shape() != [c] {
                return Err(Error::dim(format!(
                    "group_norm {name} shape {:?}, expected [{c}]",
                    p.shape()
                )));
            }
        }
        let m = shape[1..].iter().product::<usize>() / groups;
        let inv_m = T::one() / T::lit(m as f64);
        let grouped = self.reshape(&[n, groups, m])?;
        let stat = [n, groups, 1];
        let full = [n, groups, m];
        let mean = grouped.sum_to(&stat)?.scale(inv_m);
        let centered = grouped.sub(mean.broadcast_to(&full)?)?;
        let var = centered.mul(centered)?.sum_to(&stat)?.scale(inv_m);
        let inv_std = var.add_scalar(eps).powf(T::lit(-0.5));
        let normalized = centered.mul(inv_std.broadcast_to(&full)?)?.reshape(&shape)?;
        let gamma = gamma.reshape(&[1, c, 1, 1])?.broadcast_to(&shape)?;
        let beta = beta.reshape(&[1, c, 1, 1])?.broadcast_to(&shape)?;
        let output = normalized.mul(gamma)?.add(beta)?;
        Ok(GroupNormParts { normalized, output })
    }

    /// `x · tanh(softplus(x))`.
    pub fn mish(self) -> Result<Var<'g, T>> {
        self.mul(self.softplus().tanh())
    }

    /// Windowed max pool; the gradient goes to the first maximal element.
    pub fn max_pool2d(self, window: usize, stride: usize) -> Result<Var<'g, T>> {
        let (idx, shape) = kernels::max_pool_indices(&self.value(), window, stride)?;
        self.gather(idx, &shape)
    }

    /// Per-channel spatial maximum: `N×C×H×W → N×C`.
    pub fn global_max_pool(self) -> Result<Var<'g, T>> {
        let (idx, shape) = kernels::global_max_indices(&self.value())?;
        self.gather(idx, &shape)
    }

    /// Per-channel spatial mean: `N×C×H×W → N×C`.
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects rank 4, got {shape:?}")));
        }
        let area = T::lit((shape[2] * shape[3]) as f64);
        self.sum_to(&[shape[0], shape[1], 1, 1])?
            .reshape(&[shape[0], shape[1]])
            .map(|v| v.scale(T::one() / area))
    }

    /// Collapse everything after the leading axis.
    pub fn flatten(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let n = *shape.first().ok_or_else(|| Error::dim("flatten of a scalar"))?;
        let rest = shape[1..].iter().product();
        self.reshape(&[n, rest])
    }

    /// `x · W + b` for `x: N×D`, `W: D×U`, `b: U`.
    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim(format!("linear of {xs:?} with weight {ws:?}")));
        }
        if bias.shape() != [ws[1]] {
            return Err(Error::dim(format!(
                "linear bias shape {:?}, expected [{}]",
                bias.shape(),
                ws[1]
            )));
        }
        let y = self.matmul(weight)?;
        let b = bias.reshape(&[1, ws[1]])?.broadcast_to(&[xs[0], ws[1]])?;
        y.add(b)
    }

    /// Row-wise log-softmax of an `N×K` matrix.
    pub fn log_softmax(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::dim(format!("log_softmax expects N×K, got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        let v = self.value();
        let row_max = Tensor::from_fn(&[n, 1], |i| {
            v.data()[i * k..(i + 1) * k]
                .iter()
                .copied()
                .fold(T::neg_infinity(), T::max)
        });
        let shift = self.graph().constant(row_max).broadcast_to(&shape)?;
        let shifted = self.sub(shift)?;
        let lse = shifted.exp().sum_to(&[n, 1])?.ln();
        shifted.sub(lse.broadcast_to(&shape)?)
    }

    /// Per-sample negative log-likelihood, shape `N`.
    pub fn cross_entropy_per_sample(self, labels: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy of logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} outside 0..{k}")));
        }
        let idx = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
        Ok(self.log_softmax()?.gather(idx, &[labels.len()])?.neg())
    }

    /// Mean softmax cross-entropy over the batch, as a rank-0 tensor.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'g, T>> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("cross entropy of an empty batch".into()));
        }
        Ok(self
            .cross_entropy_per_sample(labels)?
            .sum_all()?
            .scale(T::one() / T::lit(n as f64)))
    }
}

/// Scalar Mish used by references and diagnostics.
pub fn mish_scalar<T: Scalar>(x: T) -> T {
    x * super::graph::softplus(x).tanh()
}
