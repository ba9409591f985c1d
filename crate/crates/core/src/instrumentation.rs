//! Activation taps, uniform histograms with raw-value moments, and their
//! CSV export.

use std::fmt::Write as _;
use std::path::Path;

use crate::container::write_atomic;
use crate::nn::{canonical_tap, Model};
use crate::{Error, Result, Scalar, Tensor};

/// Bins used when the caller does not choose.
pub const DEFAULT_BINS: usize = 80;

/// One captured activation.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSample<T> {
    /// Canonical `<layer>.<tap>` name.
    pub tap: String,
    /// Activation tensor, batch first.
    pub values: Tensor<T>,
    pub step: Option<u64>,
    pub epoch: Option<u64>,
    /// Number of input samples that produced `values`.
    pub samples: usize,
}

/// Runs `batch` through `model`, returning copies of the requested taps in
/// the order asked. The logits are identical to an untapped forward pass.
pub fn capture<T: Scalar, S: AsRef<str>>(model: &Model<T>, batch: &Tensor<T>, taps: &[S]) -> Result<Vec<TapSample<T>>> {
    let (_, captured) = model.forward_with_taps(batch, taps)?;
    let samples = batch.shape().first().copied().unwrap_or(0);
    taps.iter()
        .map(|t| {
            let name = canonical_tap(t.as_ref());
            let values = captured
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::UnknownTap(t.as_ref().to_string()))?;
            if !values.all_finite() {
                return Err(Error::NonFinite(format!("tap {name}")));
            }
            Ok(TapSample {
                tap: name,
                values,
                step: None,
                epoch: None,
                samples,
            })
        })
        .collect()
}

/// Mean, population standard deviation and adjusted Fisher–Pearson skewness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
}

impl Moments {
    pub fn of<T: Scalar>(values: &[T]) -> Result<Self> {
        Self::of_iter(values.iter().map(|v| v.to_f64_lossy()))
    }

    fn of_iter(values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let mut n = 0u64;
        let mut sum = 0.0;
        for v in values.clone() {
            if !v.is_finite() {
                return Err(Error::NonFinite("histogram input".into()));
            }
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Err(Error::Data("statistics of an empty sample".into()));
        }
        let mean = sum / n as f64;
        // two-pass central moments
        let (mut m2, mut m3) = (0.0, 0.0);
        for v in values {
            let d = v - mean;
            m2 += d * d;
            m3 += d * d * d;
        }
        let nf = n as f64;
        let (m2, m3) = (m2 / nf, m3 / nf);
        let skew = if n < 3 || m2 == 0.0 {
            0.0
        } else {
            m3 / m2.powf(1.5) * (nf * (nf - 1.0)).sqrt() / (nf - 2.0)
        };
        Ok(Moments {
            n,
            mean,
            std: m2.sqrt(),
            skew,
        })
    }
}

/// Per-group moments of an `N×C×H×W` activation, pooled over samples and
/// positions; channels split into `groups` contiguous blocks.
pub fn group_moments<T: Scalar>(t: &Tensor<T>, groups: usize) -> Result<Vec<Moments>> {
    let shape = t.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!(
            "group statistics need a 4-d activation, got {shape:?}"
        )));
    }
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!("{groups} groups do not divide {c} channels")));
    }
    let per = c / groups;
    let data = t.data();
    (0..groups)
        .map(|g| {
            let it = (0..n).flat_map(move |s| {
                let start = (s * c + g * per) * hw;
                data[start..start + per * hw].iter().map(|v| v.to_f64_lossy())
            });
            Moments::of_iter(it)
        })
        .collect()
}

/// How the histogram range is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Range {
    /// `[min, max]` of the data.
    Auto,
    /// `[−r, r]` with `r = max |value|`.
    #[default]
    Symmetric,
    /// Explicit bounds; values outside are counted in the edge bins.
    Fixed(f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub moments: Moments,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }
}

/// Uniform histogram of `values`. Moments come from the raw values, not
/// the bins. A zero-width range is widened to one unit around its centre.
pub fn histogram<T: Scalar>(values: &[T], bins: usize, range: Range) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let moments = Moments::of(values)?;
    let (mut lo, mut hi) = match range {
        Range::Auto => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64_lossy();
            (lo.min(v), hi.max(v))
        }),
        Range::Symmetric => {
            let r = values.iter().fold(0.0f64, |r, v| r.max(v.to_f64_lossy().abs()));
            (-r, r)
        }
        Range::Fixed(lo, hi) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!(
                    "histogram range [{lo}, {hi}] must be finite and non-empty"
                )));
            }
            (lo, hi)
        }
    };
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    edges[bins] = hi;
    let mut counts = vec![0u64; bins];
    for v in values {
        let x = v.to_f64_lossy();
        let i = ((x - lo) / width).floor();
        let i = if i < 0.0 { 0 } else { (i as usize).min(bins - 1) };
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts, moments })
}

/// CSV text: `bin_lo,bin_hi,count` rows then a `# mean=…` comment. Floats
/// use the shortest representation that parses back exactly.
pub fn to_csv(h: &Histogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", h.edges[i], h.edges[i + 1]);
    }
    let m = &h.moments;
    let _ = writeln!(s, "# mean={}, std={}, skew={}, n={}", m.mean, m.std, m.skew, m.n);
    s
}

pub fn export_csv(h: &Histogram, path: &Path) -> Result<()> {
    write_atomic(path, to_csv(h).as_bytes())
}

/// Inverse of [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Histogram> {
    let bad = |m: String| Error::Format(format!("histogram csv: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("bin_lo,bin_hi,count") {
        return Err(bad("missing header".into()));
    }
    let mut edges = Vec::new();
    let mut counts = Vec::new();
    let mut moments = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("# ") {
            let mut kv = std::collections::HashMap::new();
            for part in rest.split(", ") {
                let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("bad field {part:?}")))?;
                kv.insert(k, v);
            }
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
            let f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
            moments = Some(Moments {
                n: get("n")?.parse().map_err(|_| bad("bad n".into()))?,
                mean: f("mean")?,
                std: f("std")?,
                skew: f("skew")?,
            });
            continue;
        }
        if moments.is_some() {
            return Err(bad("rows after the summary comment".into()));
        }
        let cols: Vec<&str> = line.split(',').collect();
        let [lo, hi, c] = cols[..] else {
            return Err(bad(format!("row {line:?}")));
        };
        let lo: f64 = lo.parse().map_err(|_| bad(format!("edge {lo:?}")))?;
        let hi: f64 = hi.parse().map_err(|_| bad(format!("edge {hi:?}")))?;
        match edges.last() {
            None => edges.push(lo),
            Some(&prev) if prev == lo => {}
            Some(_) => return Err(bad("edges are not contiguous".into())),
        }
        if !(hi > lo) {
            return Err(bad("edges must increase".into()));
        }
        edges.push(hi);
        counts.push(c.parse().map_err(|_| bad(format!("count {c:?}")))?);
    }
    let moments = moments.ok_or_else(|| bad("missing summary comment".into()))?;
    if counts.is_empty() {
        return Err(bad("no bins".into()));
    }
    Ok(Histogram { edges, counts, moments })
}
