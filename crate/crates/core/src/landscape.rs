//! Matrix-free curvature diagnostics: dominant eigenpairs by power iteration
//! with deflation, Hutchinson trace estimates, and the summary report built
//! from them for a model's training loss.

use std::cell::Cell;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{seeded_subset, Dataset};
use crate::dp::{keyed_rng, stream};
use crate::nn::{forward, Model};
use crate::tensor::{dot, hvp};
use crate::{Error, Result, Scalar, Tensor};

/// A symmetric linear map accessed only through products.
pub trait LinearOperator<T> {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[T]) -> Result<Vec<T>>;
    /// True once an evaluation budget is spent; solvers then stop early and
    /// report non-convergence.
    fn exhausted(&self) -> bool {
        false
    }
}

/// Row-major dense symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DenseOperator<T> {
    pub fn new(n: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim(format!("{} entries for a {n}×{n} matrix", data.len())));
        }
        Ok(DenseOperator { n, data })
    }

    pub fn diagonal(d: &[T]) -> Self {
        let n = d.len();
        let mut data = vec![T::zero(); n * n];
        for (i, &v) in d.iter().enumerate() {
            data[i * n + i] = v;
        }
        DenseOperator { n, data }
    }
}

impl<T: Scalar> LinearOperator<T> for DenseOperator<T> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.n {
            return Err(Error::dim(format!(
                "vector of {} for a {}×{} operator",
                v.len(),
                self.n,
                self.n
            )));
        }
        Ok(self.data.chunks(self.n).map(|row| dot(row, v)).collect())
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    pub dim: usize,
    pub f: F,
}

impl<T, F: Fn(&[T]) -> Result<Vec<T>>> LinearOperator<T> for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[T]) -> Result<Vec<T>> {
        (self.f)(v)
    }
}

/// Counts products and enforces an optional call cap and deadline.
pub struct Metered<'a, T> {
    inner: &'a dyn LinearOperator<T>,
    calls: Cell<usize>,
    max_calls: Option<usize>,
    deadline: Option<Instant>,
}

impl<'a, T> Metered<'a, T> {
    pub fn new(inner: &'a dyn LinearOperator<T>, max_calls: Option<usize>, time_limit: Option<Duration>) -> Self {
        Metered {
            inner,
            calls: Cell::new(0),
            max_calls,
            deadline: time_limit.map(|d| Instant::now() + d),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<T> LinearOperator<T> for Metered<'_, T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, v: &[T]) -> Result<Vec<T>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.apply(v)
    }

    fn exhausted(&self) -> bool {
        self.max_calls.is_some_and(|m| self.calls.get() >= m)
            || self.deadline.is_some_and(|d| Instant::now() >= d)
            || self.inner.exhausted()
    }
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

fn dot64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy()).sum()
}

fn normalize<T: Scalar>(v: &mut [T]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        let inv = 1.0 / n;
        for x in v.iter_mut() {
            *x = T::lit(x.to_f64_lossy() * inv);
        }
    }
    n
}

/// Removes the components along each (unit) basis vector.
fn project_out<T: Scalar>(v: &mut [T], basis: &[Vec<T>]) {
    for b in basis {
        let c = T::lit(dot64(v, b));
        for (x, &y) in v.iter_mut().zip(b) {
            *x -= c * y;
        }
    }
}

fn ensure_finite<T: Scalar>(w: &[T]) -> Result<()> {
    if w.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("operator product".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair<T> {
    /// Rayleigh quotient of the final iterate (signed).
    pub value: f64,
    pub vector: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Largest-magnitude Ritz pair of the operator restricted to span{a, b},
/// given `a`, `b` (unit, not necessarily orthogonal) and their images.
fn ritz2<T: Scalar>(a: &[T], aa: &[T], b: &[T], ab: &[T]) -> Option<(f64, Vec<T>)> {
    // orthonormal q1 = a, q2 ∝ b − (a·b)a, with images formed linearly
    let c = dot64(a, b);
    let mut q2: Vec<f64> = b
        .iter()
        .zip(a)
        .map(|(x, y)| x.to_f64_lossy() - c * y.to_f64_lossy())
        .collect();
    let n2 = q2.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n2 > 1e-10) {
        return None;
    }
    q2.iter_mut().for_each(|x| *x /= n2);
    let aq2: Vec<f64> = ab
        .iter()
        .zip(aa)
        .map(|(x, y)| (x.to_f64_lossy() - c * y.to_f64_lossy()) / n2)
        .collect();
    let t11 = dot64(a, aa);
    let t12: f64 = a.iter().zip(&aq2).map(|(x, y)| x.to_f64_lossy() * y).sum();
    let t22: f64 = q2.iter().zip(&aq2).map(|(x, y)| x * y).sum();
    // eigen-decomposition of the symmetric 2×2 [[t11, t12], [t12, t22]]
    let mean = 0.5 * (t11 + t22);
    let rad = (0.25 * (t11 - t22).powi(2) + t12 * t12).sqrt();
    let theta = if (mean + rad).abs() >= (mean - rad).abs() {
        mean + rad
    } else {
        mean - rad
    };
    let (y1, y2) = if t12.abs() > 1e-300 {
        (t12, theta - t11)
    } else if (t11 - theta).abs() <= (t22 - theta).abs() {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let ny = (y1 * y1 + y2 * y2).sqrt();
    let v = a
        .iter()
        .zip(&q2)
        .map(|(x, q)| T::lit((y1 * x.to_f64_lossy() + y2 * q) / ny))
        .collect();
    Some((theta, v))
}

fn power_iteration_deflated<T: Scalar, R: Rng + ?Sized>(
    op: &dyn LinearOperator<T>,
    found: &[Vec<T>],
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<EigenPair<T>> {
    let dim = op.dim();
    if dim == 0 {
        return Err(Error::config("eigenproblem of dimension 0"));
    }
    let mut v: Vec<T> = (0..dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    project_out(&mut v, found);
    normalize(&mut v);
    let mut prev: Option<(Vec<T>, Vec<T>)> = None;
    let mut best = EigenPair {
        value: 0.0,
        vector: v.clone(),
        iterations: 0,
        converged: false,
    };
    let mut last = f64::NAN;
    while best.iterations < max_iters && !op.exhausted() {
        let mut w = op.apply(&v)?;
        ensure_finite(&w)?;
        project_out(&mut w, found);
        best.iterations += 1;
        // Rayleigh quotient, refined by a Ritz step over the last two iterates,
        // which separates eigenvalues of equal magnitude and opposite sign
        let (value, vector) = prev
            .as_ref()
            .and_then(|(pv, pw)| ritz2(pv, pw, &v, &w))
            .unwrap_or_else(|| (dot64(&v, &w), v.clone()));
        best.value = value;
        best.vector = vector;
        let done = best.iterations > 1 && ((value.abs() - last.abs()).abs() <= tol * value.abs() || value == 0.0);
        last = value;
        let mut next = w.clone();
        if normalize(&mut next) == 0.0 {
            // v lies in the (deflated) null space: eigenvalue 0
            best.value = 0.0;
            best.vector = v;
            best.converged = true;
            break;
        }
        prev = Some((v, w));
        v = next;
        if done {
            best.converged = true;
            break;
        }
    }
    Ok(best)
}

/// Dominant eigenpair (largest |λ|, sign kept). Converged when the relative
/// change of |λ| between successive iterations falls below `tol`.
pub fn power_iteration_top<T: Scalar, R: Rng + ?Sized>(
    op: &dyn LinearOperator<T>,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<EigenPair<T>> {
    power_iteration_deflated(op, &[], max_iters, tol, rng)
}

/// Top-`k` eigenpairs by magnitude via power iteration on the operator
/// deflated against the vectors found so far; sorted by |λ| descending.
pub fn deflated_spectrum<T: Scalar, R: Rng + ?Sized>(
    op: &dyn LinearOperator<T>,
    k: usize,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<Vec<EigenPair<T>>> {
    if k > op.dim() {
        return Err(Error::config(format!("k={k} exceeds dimension {}", op.dim())));
    }
    let mut pairs: Vec<EigenPair<T>> = Vec::with_capacity(k);
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut p = power_iteration_deflated(op, &basis, max_iters, tol, rng)?;
        // re-orthogonalise against the basis to keep rounding from leaking back
        project_out(&mut p.vector, &basis);
        normalize(&mut p.vector);
        basis.push(p.vector.clone());
        pairs.push(p);
    }
    pairs.sort_by(|a, b| b.value.abs().total_cmp(&a.value.abs()));
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEstimate {
    pub trace: f64,
    /// Standard error of the mean over probes (0 with fewer than two).
    pub stderr: f64,
    pub samples: usize,
    pub converged: bool,
}

/// Fewest probes before the trace estimator may declare convergence.
pub const MIN_TRACE_PROBES: usize = 10;

/// Hutchinson's estimator with Rademacher probes. Stops once the standard
/// error of the running mean falls below `tol` relative to the mean (and at
/// least [`MIN_TRACE_PROBES`] probes were drawn).
pub fn hutchinson_trace<T: Scalar, R: Rng + ?Sized>(
    op: &dyn LinearOperator<T>,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<TraceEstimate> {
    hutchinson_trace_deflated(op, &[], &[], max_iters, tol, rng)
}

/// Variance-reduced Hutchinson: `basis` is orthonormal with Rayleigh quotients
/// `values`; tr(A) = Σ values + tr(PAP) with P the projector onto the
/// complement, and only the second term is sampled (probes Pz). With an
/// empty basis this is the plain estimator. The stopping rule compares the
/// standard error against `tol` times the total.
pub fn hutchinson_trace_deflated<T: Scalar, R: Rng + ?Sized>(
    op: &dyn LinearOperator<T>,
    basis: &[Vec<T>],
    values: &[f64],
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<TraceEstimate> {
    if basis.len() != values.len() {
        return Err(Error::Contract(format!(
            "{} basis vectors but {} Rayleigh quotients",
            basis.len(),
            values.len()
        )));
    }
    let dim = op.dim();
    let exact: f64 = values.iter().sum();
    if basis.len() == dim {
        return Ok(TraceEstimate {
            trace: exact,
            stderr: 0.0,
            samples: 0,
            converged: true,
        });
    }
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    let mut samples = 0;
    let mut converged = false;
    while samples < max_iters && !op.exhausted() {
        let mut v: Vec<T> = (0..dim)
            .map(|_| if rng.random_bool(0.5) { T::one() } else { -T::one() })
            .collect();
        project_out(&mut v, basis);
        let w = op.apply(&v)?;
        ensure_finite(&w)?;
        let s = dot64(&v, &w);
        samples += 1;
        let delta = s - mean;
        mean += delta / samples as f64;
        m2 += delta * (s - mean);
        let se = (m2 / (samples.max(2) - 1) as f64 / samples as f64).sqrt();
        if samples >= MIN_TRACE_PROBES && se <= tol * (exact + mean).abs() {
            converged = true;
            break;
        }
    }
    let stderr = if samples > 1 {
        (m2 / (samples - 1) as f64).sqrt() / (samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(TraceEstimate {
        trace: exact + mean,
        stderr,
        samples,
        converged,
    })
}

/// Iteration limits and seeds for an analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Cap on operator products across the whole analysis.
    pub max_hvp_calls: Option<usize>,
    pub time_limit: Option<Duration>,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            k: 128,
            max_iters: 1000,
            tol: 1e-3,
            seed: 0,
            max_hvp_calls: None,
            time_limit: None,
        }
    }
}

/// Curvature summary at one set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianReport {
    pub dim: usize,
    pub trace: f64,
    pub trace_stderr: f64,
    pub trace_samples: usize,
    pub trace_converged: bool,
    pub lambda_max: f64,
    /// Most negative eigenvalue among those found, if any.
    pub lambda_min: Option<f64>,
    /// Top-k eigenvalues by magnitude, descending.
    pub eigenvalues: Vec<f64>,
    pub eigen_iterations: Vec<usize>,
    pub eigen_converged: Vec<bool>,
    pub negative_count: usize,
    /// |smallest-magnitude top-k eigenvalue| / |λ_max|.
    pub condition: f64,
    pub hvp_calls: usize,
    /// False when a call or time budget cut the analysis short.
    pub complete: bool,
}

impl HessianReport {
    pub fn converged(&self) -> bool {
        self.trace_converged && self.eigen_converged.iter().all(|&c| c)
    }

    /// Flat `key=value` lines.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "trace={}", self.trace);
        let _ = writeln!(s, "trace_stderr={}", self.trace_stderr);
        let _ = writeln!(s, "trace_samples={}", self.trace_samples);
        let _ = writeln!(s, "trace_converged={}", self.trace_converged);
        let _ = writeln!(s, "lambda_max={}", self.lambda_max);
        if self.eigenvalues.len() > 1 {
            match self.lambda_min {
                Some(v) => {
                    let _ = writeln!(s, "lambda_min={v}");
                }
                None => {
                    let _ = writeln!(s, "lambda_min=none");
                }
            }
            let _ = writeln!(s, "k={}", self.eigenvalues.len());
            let _ = writeln!(s, "negative_count={}", self.negative_count);
            let _ = writeln!(s, "condition={}", self.condition);
            let _ = writeln!(
                s,
                "condition_definition=|smallest-magnitude top-k eigenvalue| / |lambda_max|"
            );
        }
        let _ = writeln!(s, "eigen_converged={}", self.eigen_converged.iter().all(|&c| c));
        let _ = writeln!(s, "hvp_calls={}", self.hvp_calls);
        let _ = writeln!(s, "complete={}", self.complete);
        s
    }

    /// `index,eigenvalue,iterations,converged` rows.
    pub fn eigen_csv(&self) -> String {
        let mut s = String::from("index,eigenvalue,iterations,converged\n");
        for (i, v) in self.eigenvalues.iter().enumerate() {
            let _ = writeln!(s, "{i},{v},{},{}", self.eigen_iterations[i], self.eigen_converged[i]);
        }
        s
    }
}

/// Runs the deflated spectrum and the trace estimator on `op`.
pub fn analyze<T: Scalar>(op: &dyn LinearOperator<T>, protocol: &Protocol) -> Result<HessianReport> {
    let k = protocol.k.max(1).min(op.dim());
    let metered = Metered::new(op, protocol.max_hvp_calls, protocol.time_limit);
    let mut eig_rng = keyed_rng(protocol.seed, stream::PROBE, 0, 0);
    let pairs = deflated_spectrum(&metered, k, protocol.max_iters, protocol.tol, &mut eig_rng)?;
    // the eigenvectors double as a control variate for the trace
    let basis: Vec<Vec<T>> = pairs.iter().map(|p| p.vector.clone()).collect();
    let values: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    let mut trace_rng = keyed_rng(protocol.seed, stream::PROBE, 1, 0);
    let trace = hutchinson_trace_deflated(
        &metered,
        &basis,
        &values,
        protocol.max_iters,
        protocol.tol,
        &mut trace_rng,
    )?;
    let complete = !metered.exhausted() || (pairs.iter().all(|p| p.converged) && trace.converged);
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    let lambda_max = eigenvalues[0];
    let smallest = eigenvalues.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let condition = if lambda_max == 0.0 {
        f64::NAN
    } else {
        smallest / lambda_max.abs()
    };
    let lambda_min = eigenvalues
        .iter()
        .copied()
        .filter(|v| *v < 0.0)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
    let report = HessianReport {
        dim: op.dim(),
        trace: trace.trace,
        trace_stderr: trace.stderr,
        trace_samples: trace.samples,
        trace_converged: trace.converged,
        lambda_max,
        lambda_min,
        negative_count: eigenvalues.iter().filter(|v| **v < 0.0).count(),
        condition,
        eigen_iterations: pairs.iter().map(|p| p.iterations).collect(),
        eigen_converged: pairs.iter().map(|p| p.converged).collect(),
        eigenvalues,
        hvp_calls: metered.calls(),
        complete,
    };
    Ok(report)
}

/// Hessian of the mean cross-entropy of `model` over a data slice, applied
/// in chunks of `chunk` samples and scaled by `scale`.
pub struct ModelHessian<'a, T> {
    pub model: &'a Model<T>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub chunk: usize,
    pub scale: f64,
}

impl<'a, T: Scalar> ModelHessian<'a, T> {
    /// The seeded `slice`-sample subset of `data` (all of it when smaller).
    pub fn new(model: &'a Model<T>, data: &Dataset<T>, slice: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("Hessian analysis needs data".into()));
        }
        model.check_batch(&data.images.sample(0)?)?;
        let idx = seeded_subset(data.len(), slice, &mut keyed_rng(seed, stream::DATA_SLICE, 0, 0));
        Ok(ModelHessian {
            model,
            images: data.images.gather_samples(&idx)?,
            labels: idx.iter().map(|&i| data.labels[i]).collect(),
            chunk: 64,
            scale: 1.0,
        })
    }
}

impl<T: Scalar> LinearOperator<T> for ModelHessian<'_, T> {
    fn dim(&self) -> usize {
        self.model.params.numel()
    }

    fn apply(&self, v: &[T]) -> Result<Vec<T>> {
        let dir = self.model.params.with_flat(v)?;
        let n = self.labels.len();
        let mut out = vec![T::zero(); v.len()];
        for start in (0..n).step_by(self.chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + self.chunk.max(1)).min(n)).collect();
            let x = self.images.gather_samples(&idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
            let weight = T::lit(self.scale * idx.len() as f64 / n as f64);
            let hv = hvp(self.model.params.tensors(), dir.tensors(), |p| {
                let g = p[0].graph();
                forward(&self.model.spec, p, g.constant(x.clone()), None)?.softmax_cross_entropy(&labels)
            })?;
            let mut off = 0;
            for t in &hv {
                for (o, &h) in out[off..off + t.numel()].iter_mut().zip(t.data()) {
                    *o += weight * h;
                }
                off += t.numel();
            }
        }
        Ok(out)
    }
}

/// Full report for `model` on a seeded slice of `data`.
pub fn analyze_model<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    slice: usize,
    loss_scale: f64,
    protocol: &Protocol,
) -> Result<HessianReport> {
    let mut op = ModelHessian::new(model, data, slice, protocol.seed)?;
    op.scale = loss_scale;
    analyze(&op, protocol)
}

/// Random symmetric test matrix with standard-normal entries.
pub fn random_symmetric(n: usize, seed: u64) -> DenseOperator<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let x: f64 = rng.sample(StandardNormal);
            data[i * n + j] = x;
            data[j * n + i] = x;
        }
    }
    DenseOperator { n, data }
}
