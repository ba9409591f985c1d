//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Everything here works in `f64` regardless of the training precision: the
//! quantities are cheap scalars and the log-space sums need the headroom.

use crate::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-5;

/// Lower / upper ends of the noise-multiplier search interval.
pub const SIGMA_RANGE: (f64, f64) = (0.3, 100.0);

/// Mechanism description: sampling rate, noise multiplier, step count, δ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyParams {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        check_q(self.q)?;
        check_sigma(self.sigma)?;
        check_delta(self.delta)
    }

    /// `(ε, best order)` after `steps` compositions.
    pub fn epsilon(&self) -> Result<(f64, f64)> {
        self.validate()?;
        Ok(sampled_gaussian_curve(self.q, self.sigma, &default_orders())?
            .compose(self.steps)
            .to_epsilon(self.delta))
    }
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Accounting(format!("sampling rate {q} outside [0, 1]")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Accounting(format!("noise multiplier {sigma} must be positive")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Accounting(format!("delta {delta} outside (0, 1]")));
    }
    Ok(())
}

fn check_order(alpha: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::Accounting(format!("Rényi order {alpha} must exceed 1")));
    }
    Ok(())
}

/// Integers 2..=256 plus a few fractional orders, ascending.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75, 2.5, 3.5];
    orders.extend((2..=256).map(f64::from));
    orders.sort_by(f64::total_cmp);
    orders
}

/// Per-step ε(α) of the unsampled Gaussian mechanism with unit sensitivity.
pub fn rdp_gaussian(sigma: f64, alpha: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_order(alpha)?;
    Ok(alpha / (2.0 * sigma * sigma))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.into_iter().collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `n · ln x`, with the convention `0 · ln 0 = 0`.
fn pow_log(n: f64, ln_x: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        n * ln_x
    }
}

fn finish(log_moment: f64, alpha: f64) -> Result<f64> {
    let eps = log_moment / (alpha - 1.0);
    if !eps.is_finite() {
        return Err(Error::Accounting(format!(
            "ε(α={alpha}) overflowed; raise σ or drop high orders"
        )));
    }
    // the moment is ≥ 1 analytically; rounding may dip a hair below zero
    Ok(eps.max(0.0))
}

/// Per-step ε(α) of the Poisson-subsampled Gaussian mechanism at an integer
/// order, via the binomial expansion evaluated in log space.
pub fn rdp_sampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    check_q(q)?;
    check_sigma(sigma)?;
    if alpha < 2 {
        return Err(Error::Accounting(format!("integer order {alpha} must be ≥ 2")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = alpha as usize;
    let mut ln_fact = vec![0.0f64; a + 1];
    for i in 1..=a {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let (ln_q, ln_1q) = (q.ln(), (-q).ln_1p());
    let two_s2 = 2.0 * sigma * sigma;
    let terms = (0..=a).map(|k| {
        let kf = k as f64;
        ln_fact[a] - ln_fact[k] - ln_fact[a - k]
            + pow_log((a - k) as f64, ln_1q)
            + pow_log(kf, ln_q)
            + kf * (kf - 1.0) / two_s2
    });
    finish(log_sum(terms), f64::from(alpha))
}

/// Per-step ε(α) at any real order `α > 1` by trapezoid quadrature of
/// `E_{z~N(0,σ²)}[((1−q) + q·exp((2z−1)/(2σ²)))^α]` in log space.
pub fn rdp_sampled_gaussian_quadrature(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    check_q(q)?;
    check_sigma(sigma)?;
    check_order(alpha)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let (ln_q, ln_1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    // the integrand's mass lies between the two mixture centres 0 and α
    let lo = -15.0 * sigma - 1.0;
    let hi = alpha + 15.0 * sigma + 1.0;
    let h = sigma / 64.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let log_f = |z: f64| {
        let ln_ratio = log_add(ln_1q, ln_q + (2.0 * z - 1.0) / (2.0 * s2));
        ln_norm - z * z / (2.0 * s2) + alpha * ln_ratio
    };
    let terms = (0..=n).map(|i| {
        let w = if i == 0 || i == n { 0.5f64.ln() } else { 0.0 };
        log_f(lo + i as f64 * h) + w
    });
    finish(log_sum(terms) + h.ln(), alpha)
}

/// Per-step ε(α) for any order, dispatching integers to the closed form.
pub fn rdp_sampled_gaussian_at(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if alpha.fract() == 0.0 && (2.0..=u32::MAX as f64).contains(&alpha) {
        rdp_sampled_gaussian(q, sigma, alpha as u32)
    } else {
        rdp_sampled_gaussian_quadrature(q, sigma, alpha)
    }
}

/// Rényi-DP curve of a mechanism composed `steps` times with itself.
///
/// The per-step values and the step count are kept apart so that composing
/// is exact integer arithmetic; values are formed on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct RdpCurve {
    orders: Vec<f64>,
    per_step: Vec<f64>,
    steps: u64,
}

impl RdpCurve {
    /// A single-step curve.
    pub fn new(orders: Vec<f64>, per_step: Vec<f64>) -> Result<Self> {
        if orders.is_empty() || orders.len() != per_step.len() {
            return Err(Error::Accounting(
                "orders and values must be non-empty and aligned".into(),
            ));
        }
        for &a in &orders {
            check_order(a)?;
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Accounting("orders must be strictly increasing".into()));
        }
        if per_step.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::Accounting("ε(α) must be finite and non-negative".into()));
        }
        Ok(RdpCurve {
            orders,
            per_step,
            steps: 1,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Total ε(α) per order.
    pub fn values(&self) -> Vec<f64> {
        let t = self.steps as f64;
        self.per_step.iter().map(|e| e * t).collect()
    }

    /// Self-composition `t` times.
    pub fn compose(&self, t: u64) -> Self {
        RdpCurve {
            steps: self.steps * t,
            ..self.clone()
        }
    }

    /// Sequential composition with another run of the same mechanism.
    pub fn add(&self, other: &RdpCurve) -> Result<Self> {
        if self.orders != other.orders || self.per_step != other.per_step {
            return Err(Error::Accounting(
                "only runs of the same mechanism can be composed".into(),
            ));
        }
        Ok(RdpCurve {
            steps: self.steps + other.steps,
            ..self.clone()
        })
    }

    /// `(ε, α*)` minimising `ε(α) + ln(1/δ)/(α−1)` over the grid. A curve
    /// that is zero everywhere (no steps, or nothing ever sampled) releases
    /// nothing and converts to `(0, ∞)` rather than the grid's residual
    /// `ln(1/δ)/(α_max − 1)`.
    pub fn to_epsilon(&self, delta: f64) -> (f64, f64) {
        let values = self.values();
        if values.iter().all(|&e| e == 0.0) {
            return (0.0, f64::INFINITY);
        }
        let log_inv = -delta.ln();
        values
            .iter()
            .zip(&self.orders)
            .map(|(e, &a)| (e + log_inv / (a - 1.0), a))
            .fold(
                (f64::INFINITY, f64::NAN),
                |best, cur| if cur.0 < best.0 { cur } else { best },
            )
    }
}

/// Per-step curve of the subsampled Gaussian on the given orders.
pub fn sampled_gaussian_curve(q: f64, sigma: f64, orders: &[f64]) -> Result<RdpCurve> {
    let per_step = orders
        .iter()
        .map(|&a| rdp_sampled_gaussian_at(q, sigma, a))
        .collect::<Result<Vec<_>>>()?;
    RdpCurve::new(orders.to_vec(), per_step)
}

/// `(ε, α*)` spent after `steps` steps.
pub fn epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<(f64, f64)> {
    PrivacyParams { q, sigma, steps, delta }.epsilon()
}

/// Poisson-sampled steps in one epoch: `ceil(n / lot)`.
pub fn steps_per_epoch(n: usize, expected_lot: usize) -> u64 {
    n.div_ceil(expected_lot.max(1)) as u64
}

/// Smallest-interval bisection for the σ whose ε lands in `[target − 1e-3, target]`.
pub fn calibrate_sigma(target: f64, q: f64, steps: u64, delta: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Calibration(format!("target ε {target} must be positive")));
    }
    check_q(q)?;
    check_delta(delta)?;
    let eps_at = |s: f64| epsilon(q, s, steps, delta).map(|r| r.0);
    let (mut lo, mut hi) = SIGMA_RANGE;
    let (e_lo, e_hi) = (eps_at(lo)?, eps_at(hi)?);
    if e_hi > target {
        return Err(Error::Calibration(format!(
            "target ε {target} unreachable: σ={hi} still spends {e_hi:.4}"
        )));
    }
    if e_lo < target - 1e-3 {
        return Err(Error::Calibration(format!(
            "target ε {target} unreachable: σ={lo} already spends only {e_lo:.4}"
        )));
    }
    if e_lo <= target {
        return Ok(lo);
    }
    // invariant: ε(lo) > target ≥ ε(hi)
    let mut e = e_hi;
    for _ in 0..200 {
        if e >= target - 1e-3 {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        let em = eps_at(mid)?;
        if em > target {
            lo = mid;
        } else {
            hi = mid;
            e = em;
        }
    }
    Err(Error::Calibration(format!("bisection for ε {target} did not converge")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_closed_form() {
        assert_eq!(rdp_gaussian(1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_gaussian(2.0, 8.0).unwrap(), 1.0);
        assert!(rdp_gaussian(1.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_rates() {
        assert_eq!(rdp_sampled_gaussian(0.0, 1.0, 8).unwrap(), 0.0);
        let full = rdp_sampled_gaussian(1.0, 1.3, 8).unwrap();
        assert!((full - rdp_gaussian(1.3, 8.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn quadrature_agrees_with_binomial_at_integers() {
        for (q, s, a) in [(0.01, 1.0, 8), (0.3, 0.8, 3), (0.02, 2.0, 20)] {
            let b = rdp_sampled_gaussian(q, s, a).unwrap();
            let t = rdp_sampled_gaussian_quadrature(q, s, a as f64).unwrap();
            assert!((b - t).abs() <= 1e-9 * b.max(1e-12), "{q} {s} {a}: {b} vs {t}");
        }
    }

    #[test]
    fn curve_rejects_bad_orders() {
        assert!(RdpCurve::new(vec![2.0, 2.0], vec![0.0, 0.0]).is_err());
        assert!(RdpCurve::new(vec![1.0], vec![0.0]).is_err());
    }
}
