//! Rényi-DP of the Poisson-subsampled Gaussian mechanism.
//!
//! For sampling rate `q` and noise multiplier `σ` the order-`α` RDP is
//! `ln(A_α)/(α-1)` with `A_α = E_{z~N(0,σ²)}[((1-q) + q·e^{(2z-1)/(2σ²)})^α]`.
//! Integer orders use the binomial expansion of `A_α` summed in the log
//! domain; fractional orders use the two-sided series with `erfc` tails.

use crate::error::{Error, Result};

/// Integers 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<f64> {
    (2..=64).map(f64::from).chain([128.0, 256.0]).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    debug_assert!(a >= b);
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a == b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln Γ(x)` via libm.
fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln erfc(x)`, accurate far into the upper tail.
fn log_erfc(x: f64) -> f64 {
    if x < 26.0 {
        libm::erfc(x).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
    }
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let a = alpha as f64;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let log_binom = ln_gamma(a + 1.0) - ln_gamma(fi + 1.0) - ln_gamma(a - fi + 1.0);
        let term = log_binom + fi * lq + (a - fi) * l1q + (fi * fi - fi) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    // Generalised binomial coefficient, tracked as sign and log magnitude.
    let (mut coef_sign, mut log_coef) = (1.0f64, 0.0f64);
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if coef_sign > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
        // C(α, i+1) = C(α, i)·(α - i)/(i + 1)
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio < 0.0 {
            coef_sign = -coef_sign;
        }
        log_coef += ratio.abs().ln();
        i += 1;
    }
    log_add(log_a0, log_a1)
}

/// Order-`α` RDP of one step of the subsampled Gaussian.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("RDP order {alpha} must be > 1")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {q} must lie in (0, 1]")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("noise multiplier {sigma} must be > 0")));
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let log_a = if alpha.fract() == 0.0 && alpha < 1e6 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    Ok(log_a / (alpha - 1.0))
}

/// Convert composed RDP values to `(ε, δ)`-DP: `min_α rdp(α) + ln(1/δ)/(α-1)`.
/// Returns `(ε, minimising order)`.
pub fn rdp_to_dp(orders: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    if orders.is_empty() {
        return Err(Error::InvalidArgument("no RDP orders given".into()));
    }
    if orders.len() != rdp.len() {
        return Err(Error::Shape(format!(
            "{} orders but {} RDP values",
            orders.len(),
            rdp.len()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} must lie in (0, 1)")));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&a, &r) in orders.iter().zip(rdp) {
        if !(a > 1.0) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!("bad RDP entry ({a}, {r})")));
        }
        let eps = r + log_inv_delta / (a - 1.0);
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok(best)
}

/// `(ε, order)` after `rounds` compositions of the subsampled Gaussian.
pub fn epsilon_for(q: f64, sigma: f64, rounds: usize, delta: f64, orders: &[f64]) -> Result<(f64, f64)> {
    let rdp = orders
        .iter()
        .map(|&a| rdp_subsampled_gaussian(q, sigma, a).map(|r| r * rounds as f64))
        .collect::<Result<Vec<_>>>()?;
    rdp_to_dp(orders, &rdp, delta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    /// `ε` actually achieved at `sigma`.
    pub epsilon: f64,
    pub order: f64,
}

const SIGMA_BRACKET: (f64, f64) = (0.3, 1e4);

/// Smallest noise multiplier meeting `(ε, δ)` after `rounds` steps at rate `q`,
/// found by bisection on `[0.3, 1e4]`.
pub fn calibrate_sigma(
    epsilon: f64,
    delta: f64,
    q: f64,
    rounds: usize,
    orders: &[f64],
) -> Result<Calibration> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("target epsilon {epsilon} must be > 0")));
    }
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_at = |s: f64| epsilon_for(q, s, rounds, delta, orders);
    if eps_at(hi)?.0 > epsilon {
        return Err(Error::Calibration(format!(
            "epsilon {epsilon} is unreachable for sigma in [{lo}, {hi}]"
        )));
    }
    if eps_at(lo)?.0 <= epsilon {
        return Err(Error::Calibration(format!(
            "epsilon {epsilon} is already met at sigma {lo}, the bottom of the search bracket [{lo}, {hi}]"
        )));
    }
    while (hi - lo) / hi > 1e-7 {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)?.0 <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (eps, order) = eps_at(hi)?;
    Ok(Calibration {
        sigma: hi,
        epsilon: eps,
        order,
    })
}

/// Tracks `ε(t)` at fixed `δ` for a run with a fixed `(q, σ)` per round.
#[derive(Debug, Clone)]
pub struct RdpAccountant {
    orders: Vec<f64>,
    per_round: Vec<f64>,
    delta: f64,
    rounds: usize,
}

impl RdpAccountant {
    pub fn new(q: f64, sigma: f64, delta: f64, orders: Vec<f64>) -> Result<Self> {
        let per_round = if sigma == 0.0 {
            vec![f64::INFINITY; orders.len()]
        } else {
            orders
                .iter()
                .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            orders,
            per_round,
            delta,
            rounds: 0,
        })
    }

    pub fn step(&mut self) {
        self.rounds += 1;
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// `ε` spent so far; infinite when noise is off.
    pub fn epsilon(&self) -> f64 {
        if self.rounds == 0 {
            return 0.0;
        }
        if self.per_round.iter().any(|r| r.is_infinite()) {
            return f64::INFINITY;
        }
        let composed: Vec<f64> = self.per_round.iter().map(|r| r * self.rounds as f64).collect();
        rdp_to_dp(&self.orders, &composed, self.delta)
            .map(|(e, _)| e)
            .unwrap_or(f64::INFINITY)
    }
}
