use crate::{Error, Result, Scalar};

/// NAdam with Nesterov lookahead on the bias-corrected first moment.
#[derive(Clone, Debug, PartialEq)]
pub struct Nadam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    /// Applied steps.
    pub t: u64,
}

impl<T: Scalar> Nadam<T> {
    pub fn new(dim: usize, lr: f64) -> Self {
        Nadam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            t: 0,
        }
    }

    /// One update. A non-finite gradient is rejected before any state moves.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::dim(format!(
                "NAdam over {} entries given {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to NAdam".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (one, lr, eps) = (T::one(), T::lit(self.lr), T::lit(self.eps));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let m_bar = b1 * m_hat + (one - b1) * g / c1;
            params[i] -= lr * m_bar / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Halves the learning rate after more than `patience` consecutive epochs
/// without a relative improvement of at least `threshold`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    pub stagnant: usize,
}

impl Plateau {
    pub fn new(lr: f64) -> Self {
        Plateau {
            lr,
            factor: 0.5,
            patience: 3,
            threshold: 1e-4,
            best: None,
            stagnant: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let improved = match self.best {
            None => loss.is_finite(),
            Some(b) => loss < b - self.threshold * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
            if self.stagnant > self.patience {
                self.lr *= self.factor;
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema<T> {
    pub tau: f64,
    pub shadow: Vec<T>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(initial: &[T], tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::config(format!("EMA decay {tau} outside [0, 1)")));
        }
        Ok(Ema {
            tau,
            shadow: initial.to_vec(),
        })
    }

    /// `shadow ← τ·shadow + (1−τ)·params`.
    pub fn update(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::dim(format!(
                "EMA over {} entries given {}",
                self.shadow.len(),
                params.len()
            )));
        }
        let (tau, rest) = (T::lit(self.tau), T::lit(1.0 - self.tau));
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = tau * *s + rest * p;
        }
        Ok(())
    }
}

/// Everything the optimiser carries between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub nadam: Nadam<T>,
    pub schedule: Plateau,
    pub ema: Option<Ema<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(initial: &[T], lr: f64, ema_tau: Option<f64>) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate {lr} must be positive")));
        }
        Ok(OptimizerState {
            nadam: Nadam::new(initial.len(), lr),
            schedule: Plateau::new(lr),
            ema: ema_tau.map(|tau| Ema::new(initial, tau)).transpose()?,
        })
    }
}
