use std::collections::HashSet;

use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result, Scalar};

use super::params::ParamSet;
use super::spec::*;

/// GroupNorm variance floor.
pub const GN_EPS: f64 = 1e-5;

/// Collects copies of named activations during a forward pass.
#[derive(Debug)]
pub struct TapRecorder<T> {
    wanted: HashSet<String>,
    captured: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> TapRecorder<T> {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        TapRecorder {
            wanted: names.iter().map(|n| canonical_tap(n.as_ref())).collect(),
            captured: Vec::new(),
        }
    }

    fn offer(&mut self, layer: usize, tap: &str, v: &Var<'_, T>) {
        let name = format!("{layer}.{tap}");
        if self.wanted.contains(&name) {
            self.captured.push((name, (*v.value()).clone()));
        }
    }

    pub fn into_captured(self) -> Vec<(String, Tensor<T>)> {
        self.captured
    }
}

struct Params<'a, 'g, T: Scalar> {
    iter: std::slice::Iter<'a, Var<'g, T>>,
}

impl<'g, T: Scalar> Params<'_, 'g, T> {
    fn next(&mut self) -> Result<Var<'g, T>> {
        self.iter
            .next()
            .copied()
            .ok_or_else(|| Error::Format("network consumed more parameters than supplied".into()))
    }
}

fn eps<T: Scalar>() -> T {
    T::lit(GN_EPS)
}

fn conv_block<'g, T: Scalar>(x: Var<'g, T>, cb: &ConvBlockConfig, p: &mut Params<'_, 'g, T>) -> Result<Var<'g, T>> {
    let (w, b, gamma, beta) = (p.next()?, p.next()?, p.next()?, p.next()?);
    let g = cb.groups.resolve(cb.out_channels)?;
    let y = x
        .conv2d(w, Some(b), cb.stride, cb.padding)?
        .mish()?
        .group_norm(g, gamma, beta, eps())?;
    match cb.pool_after {
        Some(win) => y.max_pool2d(win, win),
        None => Ok(y),
    }
}

fn norm_act<'g, T: Scalar>(
    x: Var<'g, T>,
    groups: GroupSpec,
    channels: usize,
    p: &mut Params<'_, 'g, T>,
) -> Result<Var<'g, T>> {
    let (gamma, beta) = (p.next()?, p.next()?);
    x.group_norm(groups.resolve(channels)?, gamma, beta, eps())?.mish()
}

fn linear<'g, T: Scalar>(x: Var<'g, T>, p: &mut Params<'_, 'g, T>) -> Result<Var<'g, T>> {
    let (w, b) = (p.next()?, p.next()?);
    x.linear(w, b)
}

/// Adds the residual and convolutional paths, applies ScaleNorm when
/// configured, and reports the four block taps. The `V_AS` tap holds the
/// normalised sum before the affine step.
#[allow(clippy::too_many_arguments)]
fn merge<'g, T: Scalar>(
    layer: usize,
    residual: Var<'g, T>,
    conv_path: Var<'g, T>,
    scale_norm: bool,
    groups: GroupSpec,
    channels: usize,
    p: &mut Params<'_, 'g, T>,
    taps: &mut Option<&mut TapRecorder<T>>,
) -> Result<Var<'g, T>> {
    let sum = residual.add(conv_path)?;
    if let Some(t) = taps.as_deref_mut() {
        t.offer(layer, TAP_RESIDUAL, &residual);
        t.offer(layer, TAP_CONV_PATH, &conv_path);
        t.offer(layer, TAP_SUM, &sum);
    }
    if !scale_norm {
        return Ok(sum);
    }
    let (gamma, beta) = (p.next()?, p.next()?);
    let parts = sum.group_norm_parts(groups.resolve(channels)?, gamma, beta, eps())?;
    if let Some(t) = taps.as_deref_mut() {
        t.offer(layer, TAP_SCALE_NORM, &parts.normalized);
    }
    Ok(parts.output)
}

/// Builds the forward graph of `spec` on `x` using parameter nodes in
/// layout order.
pub fn forward<'g, T: Scalar>(
    spec: &NetworkSpec,
    params: &[Var<'g, T>],
    x: Var<'g, T>,
    mut taps: Option<&mut TapRecorder<T>>,
) -> Result<Var<'g, T>> {
    let mut p = Params { iter: params.iter() };
    let mut h = x;
    for (i, layer) in spec.layers.iter().enumerate() {
        h = match layer {
            LayerSpec::ConvBlock(cb) => conv_block(h, cb, &mut p)?,
            LayerSpec::Residual(r) => {
                let path = r.path();
                let f = conv_block(h, &path, &mut p)?;
                let f = conv_block(f, &path, &mut p)?;
                merge(i, h, f, r.scale_norm, r.groups, r.channels, &mut p, &mut taps)?
            }
            LayerSpec::WideBlock(wb) => {
                let a = norm_act(h, wb.groups, wb.in_channels, &mut p)?;
                let (w1, b1) = (p.next()?, p.next()?);
                let mut f = a.conv2d(w1, Some(b1), 1, 1)?;
                if wb.downsample {
                    f = f.max_pool2d(2, 2)?;
                }
                let f = norm_act(f, wb.groups, wb.out_channels, &mut p)?;
                let (w2, b2) = (p.next()?, p.next()?);
                let f = f.conv2d(w2, Some(b2), 1, 1)?;
                let r = if wb.has_projection() {
                    let (ws, bs) = (p.next()?, p.next()?);
                    let s = a.conv2d(ws, Some(bs), 1, 0)?;
                    if wb.downsample {
                        s.max_pool2d(2, 2)?
                    } else {
                        s
                    }
                } else {
                    h
                };
                merge(i, r, f, wb.scale_norm, wb.groups, wb.out_channels, &mut p, &mut taps)?
            }
            LayerSpec::Conv { padding, .. } => {
                let (w, b) = (p.next()?, p.next()?);
                h.conv2d(w, Some(b), 1, *padding)?
            }
            LayerSpec::NormAct { channels, groups } => norm_act(h, *groups, *channels, &mut p)?,
            LayerSpec::GlobalMaxPool => h.global_max_pool()?,
            LayerSpec::GlobalAvgPool => h.global_avg_pool()?,
            LayerSpec::Flatten => h.flatten()?,
            LayerSpec::Linear { .. } => linear(h, &mut p)?,
            LayerSpec::Mish => h.mish()?,
            LayerSpec::Classifier(c) => match c.hidden {
                None => linear(h, &mut p)?,
                Some(_) => {
                    let z = linear(h, &mut p)?.mish()?;
                    linear(z, &mut p)?
                }
            },
        };
    }
    if p.iter.next().is_some() {
        return Err(Error::Format("unused parameters after forward pass".into()));
    }
    Ok(h)
}

/// Architecture plus parameter values.
/// Captured activations as `(tap name, values)`, in request order.
pub type TapValues<T> = Vec<(String, Tensor<T>)>;

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: NetworkSpec,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(spec: NetworkSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        params.check_layout(&spec)?;
        Ok(Model { spec, params })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = ParamSet::init(&spec, seed);
        Ok(Model { spec, params })
    }

    pub fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::dim(format!(
                "batch {:?} does not match network input N×{:?}",
                s, self.spec.input
            )));
        }
        Ok(())
    }

    /// Logits plus copies of the requested tap activations.
    pub fn forward_with_taps<S: AsRef<str>>(&self, batch: &Tensor<T>, taps: &[S]) -> Result<(Tensor<T>, TapValues<T>)> {
        for t in taps {
            if !self.spec.has_tap(t.as_ref()) {
                return Err(Error::UnknownTap(t.as_ref().to_string()));
            }
        }
        self.check_batch(batch)?;
        let g = Graph::new();
        let params = self.constants(&g);
        let x = g.constant(batch.clone());
        let mut rec = TapRecorder::new(taps);
        let out = forward(&self.spec, &params, x, Some(&mut rec))?;
        g.ensure_finite()?;
        Ok(((*out.value()).clone(), rec.into_captured()))
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_taps::<&str>(batch, &[])?.0)
    }

    fn constants<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.params.tensors().iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn leaves<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.params.tensors().iter().map(|t| g.param(t.clone())).collect()
    }

    /// Mean cross-entropy on a batch and its gradient as one flat vector.
    pub fn loss_and_grad(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
        self.check_batch(batch)?;
        let g = Graph::new();
        let params = self.leaves(&g);
        let x = g.constant(batch.clone());
        let loss = forward(&self.spec, &params, x, None)?.softmax_cross_entropy(labels)?;
        let grads = g.gradients(loss, &params)?;
        let mut flat = Vec::with_capacity(self.params.numel());
        for t in &grads {
            flat.extend_from_slice(t.data());
        }
        Ok((loss.value().item()?, flat))
    }

    /// Mean loss and top-1 accuracy, evaluated in chunks.
    pub fn evaluate(&self, images: &Tensor<T>, labels: &[usize], chunk: usize) -> Result<(f64, f64)> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Data("evaluation on an empty set".into()));
        }
        let chunk = chunk.max(1);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let batch = images.gather_samples(&idx)?;
            let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let params = self.constants(&g);
            let x = g.constant(batch);
            let logits = forward(&self.spec, &params, x, None)?;
            let per = logits.cross_entropy_per_sample(&lab)?;
            g.ensure_finite()?;
            loss_sum += per.value().data().iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            correct += predictions(&logits.value())
                .iter()
                .zip(&lab)
                .filter(|(p, l)| p == l)
                .count();
        }
        Ok((loss_sum / n as f64, correct as f64 / n as f64))
    }
}

/// Row-wise argmax of an `N×K` logit matrix (first maximum on ties).
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}
