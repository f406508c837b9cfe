//! Variable-q Rényi DP accountant for the subsampled Gaussian mechanism.
//!
//! Each step adds `RDP_α(q_t, σ)` for every tracked integer order α; the
//! `(ε, δ)` statement is the minimum over orders of
//! `RDP_α + log(1/δ)/(α−1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default orders `{2, 3, …, 64}`.
pub fn default_orders() -> Vec<u32> {
    (2..=64).collect()
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let n = f64::from(n);
    let k = f64::from(k);
    libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0)
}

/// `log(1 + e^x)` without overflow or loss for tiny `e^x`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(e^x − 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 50.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// Integer-order RDP of the Gaussian mechanism with noise multiplier `sigma`
/// under subsampling rate `q`:
///
/// `(1/(α−1))·log Σ_{j=0}^{α} C(α,j) q^j (1−q)^{α−j} exp(j(j−1)/(2σ²))`.
///
/// Since the binomial weights sum to one and the `j ∈ {0, 1}` exponents
/// vanish, the sum is `1 + T` with
/// `T = Σ_{j≥2} C(α,j) q^j (1−q)^{α−j} expm1(j(j−1)/(2σ²))`, a sum of
/// non-negative terms. `log T` is taken by log-sum-exp around the largest
/// term, and `log(1 + T)` by a softplus, so neither large exponents nor
/// `q → 0` lose precision.
pub fn rdp_subsampled_gaussian(alpha: u32, q: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("noise multiplier must be positive, got {sigma}")));
    }
    if q.is_nan() || q > 1.0 {
        return Err(Error::arg(format!("sampling rate must lie in [0, 1], got {q}")));
    }
    if alpha < 2 || q <= 0.0 {
        return Ok(0.0);
    }
    let a = f64::from(alpha);
    let two_var = 2.0 * sigma * sigma;
    if q == 1.0 {
        return Ok(a / two_var);
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let terms: Vec<f64> = (2..=alpha)
        .map(|j| {
            let jf = f64::from(j);
            ln_binomial(alpha, j)
                + jf * ln_q
                + (a - jf) * ln_1mq
                + ln_expm1(jf * (jf - 1.0) / two_var)
        })
        .collect();
    let pivot = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ln_t = pivot + terms.iter().map(|t| (t - pivot).exp()).sum::<f64>().ln();
    Ok(softplus(ln_t) / (a - 1.0))
}

/// Smallest noise multiplier satisfying the classical Gaussian-mechanism
/// bound `σ ≥ Δ₂·√(2 ln(1.25/δ))/ε`.
pub fn calibrate_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::arg(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// Exactly rounded running sum (Shewchuk partials, as in Python's
/// `math.fsum`). The rounded total does not depend on the order in which
/// terms were added.
#[derive(Debug, Clone, Default)]
struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    fn add(&mut self, mut x: f64) {
        let mut kept = 0;
        for k in 0..self.partials.len() {
            let mut y = self.partials[k];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    fn value(&self) -> f64 {
        let p = &self.partials;
        let Some(&last) = p.last() else {
            return 0.0;
        };
        let mut n = p.len() - 1;
        let mut hi = last;
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // round-half-even correction when the remaining partials push past
        // the halfway point
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl PartialEq for PrivacyLedger {
    fn eq(&self, other: &Self) -> bool {
        self.orders == other.orders
            && self.rdp == other.rdp
            && self.sigma == other.sigma
            && self.steps == other.steps
    }
}

/// `(ε, δ)` statement and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderEpsilon {
    pub epsilon: f64,
    pub best_order: u32,
    pub delta: f64,
}

/// Accumulated per-order RDP for one noise multiplier.
#[derive(Debug, Clone)]
pub struct PrivacyLedger {
    orders: Vec<u32>,
    rdp: Vec<f64>,
    sums: Vec<ExactSum>,
    sigma: f64,
    steps: u64,
    // most recent (q, per-order RDP); consecutive steps usually share q
    cache: Option<(f64, Vec<f64>)>,
}

impl PrivacyLedger {
    pub fn new(sigma: f64, orders: &[u32]) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::arg(format!("ledger needs a positive noise multiplier, got {sigma}")));
        }
        if orders.is_empty() {
            return Err(Error::config("order set must be non-empty"));
        }
        if orders.iter().any(|&a| a < 2) {
            return Err(Error::config("orders must be integers >= 2"));
        }
        let mut orders = orders.to_vec();
        orders.sort_unstable();
        orders.dedup();
        let rdp = vec![0.0; orders.len()];
        let sums = vec![ExactSum::default(); orders.len()];
        Ok(Self { orders, rdp, sums, sigma, steps: 0, cache: None })
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    /// Accumulated RDP, aligned with [`orders`](Self::orders).
    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    /// Composes one step with sampling rate `q`.
    pub fn record_step(&mut self, q: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::arg(format!("sampling rate must lie in [0, 1], got {q}")));
        }
        let fresh = match &self.cache {
            Some((cached_q, _)) => cached_q.to_bits() != q.to_bits(),
            None => true,
        };
        if fresh {
            let per_order = self
                .orders
                .iter()
                .map(|&a| rdp_subsampled_gaussian(a, q, self.sigma))
                .collect::<Result<Vec<_>>>()?;
            self.cache = Some((q, per_order));
        }
        if let Some((_, per_order)) = &self.cache {
            for ((total, sum), &step) in self.rdp.iter_mut().zip(&mut self.sums).zip(per_order) {
                sum.add(step);
                *total = sum.value();
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Converts the accumulated RDP to `(ε, δ)`. Ties go to the smallest order.
    pub fn epsilon(&self, delta: f64) -> Result<OrderEpsilon> {
        check_delta(delta)?;
        let log_inv_delta = (1.0 / delta).ln();
        let mut best = OrderEpsilon { epsilon: f64::INFINITY, best_order: self.orders[0], delta };
        for (&alpha, &rdp) in self.orders.iter().zip(&self.rdp) {
            let eps = rdp + log_inv_delta / f64::from(alpha - 1);
            if eps < best.epsilon {
                best.epsilon = eps;
                best.best_order = alpha;
            }
        }
        Ok(best)
    }
}
