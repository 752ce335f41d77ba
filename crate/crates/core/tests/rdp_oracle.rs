//! Accountant checks against direct numerical integration of the Rényi
//! divergence, plus grid monotonicity.

use pflm_core::privacy::{
    calibrate_sigma, default_orders, epsilon_for, rdp_subsampled_gaussian,
};

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln A_α` by composite Simpson in the log domain over `[-15σ, α + 15σ]`.
fn log_a_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let (lo, hi) = (-15.0 * sigma, alpha + 15.0 * sigma);
    let mut n = ((hi - lo) / (sigma / 400.0)).ceil() as usize;
    n += n % 2;
    let h = (hi - lo) / n as f64;
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let log_f = |z: f64| {
        let ratio = log_add((-q).ln_1p(), q.ln() + (2.0 * z - 1.0) / (2.0 * s2));
        log_norm - z * z / (2.0 * s2) + alpha * ratio
    };
    let terms: Vec<f64> = (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            log_f(lo + i as f64 * h) + f64::ln(w)
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() + (h / 3.0).ln()
}

#[test]
fn integer_orders_match_quadrature() {
    let (q, sigma) = (0.01, 1.5);
    let mut worst = 0.0f64;
    for a in 2..=64 {
        let alpha = a as f64;
        let oracle = log_a_quadrature(q, sigma, alpha) / (alpha - 1.0);
        let got = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
        worst = worst.max((got - oracle).abs());
        assert!((got - oracle).abs() < 1e-6, "alpha {a}: {got} vs {oracle}");
    }
    eprintln!("worst abs error {worst:e}");
}

#[test]
fn fractional_orders_match_quadrature() {
    for &(q, sigma) in &[(0.01, 1.5), (0.002, 0.9), (0.2, 4.0)] {
        for alpha in [1.5, 2.25, 3.7, 10.5, 31.3] {
            let oracle = log_a_quadrature(q, sigma, alpha) / (alpha - 1.0);
            let got = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
            assert!(
                (got - oracle).abs() < 1e-6 * (1.0 + oracle.abs()),
                "q {q} sigma {sigma} alpha {alpha}: {got} vs {oracle}"
            );
        }
    }
}

#[test]
fn full_batch_general_quadrature_agrees_with_closed_form() {
    // The integral at q -> 1 approaches alpha/(2 sigma^2); check the limit numerically.
    let alpha = 4.0;
    let oracle = log_a_quadrature(1.0 - 1e-12, 2.0, alpha) / (alpha - 1.0);
    assert!((oracle - rdp_subsampled_gaussian(1.0, 2.0, alpha).unwrap()).abs() < 1e-9);
}

#[test]
fn epsilon_monotone_on_grids() {
    let orders = default_orders();
    let delta = 1e-6;
    let qs = [1e-3, 2e-3, 1e-2, 0.05, 0.2, 1.0];
    let sigmas = [0.6, 0.9, 1.5, 3.0, 9.0];
    let ts = [1, 10, 100, 1000];
    for &s in &sigmas {
        for &t in &ts {
            let eps: Vec<f64> = qs.iter().map(|&q| epsilon_for(q, s, t, delta, &orders).unwrap().0).collect();
            assert!(eps.windows(2).all(|w| w[0] <= w[1]), "q grid at s {s} t {t}: {eps:?}");
        }
        for &q in &qs {
            let eps: Vec<f64> = ts.iter().map(|&t| epsilon_for(q, s, t, delta, &orders).unwrap().0).collect();
            assert!(eps.windows(2).all(|w| w[0] <= w[1]), "T grid at s {s} q {q}: {eps:?}");
        }
    }
    for &q in &qs {
        for &t in &ts {
            let eps: Vec<f64> = sigmas.iter().map(|&s| epsilon_for(q, s, t, delta, &orders).unwrap().0).collect();
            assert!(eps.windows(2).all(|w| w[0] >= w[1]), "sigma grid at q {q} t {t}: {eps:?}");
        }
    }
}

#[test]
fn calibration_never_exceeds_target() {
    let orders = default_orders();
    for &(e, q, t) in &[(2.0, 2e-3, 2000), (2.0, 0.2, 300), (0.5, 0.01, 100), (8.0, 0.05, 50)] {
        let c = calibrate_sigma(e, 1e-6, q, t, &orders).unwrap();
        let (eps, _) = epsilon_for(q, c.sigma, t, 1e-6, &orders).unwrap();
        assert!(eps <= e && eps >= 0.999 * e, "{e} {q} {t}: {eps}");
        let half = calibrate_sigma(e, 1e-6, q, t / 2, &orders).unwrap();
        assert!(half.sigma <= c.sigma);
    }
}

/// Noise multipliers from `tests/oracles/rdp_quadrature.py`, which integrates
/// the divergence numerically and root-finds on the same order grid.
const GOLDEN_SIGMA: [(usize, f64); 3] = [
    (500, 0.8458857031622199),
    (2000, 0.8617902718785894),
    (5000, 0.8885621928138542),
];

#[test]
fn calibrated_sigma_matches_golden() {
    let orders = default_orders();
    for (t, golden) in GOLDEN_SIGMA {
        let c = calibrate_sigma(2.0, 1e-6, 2e-3, t, &orders).unwrap();
        assert!((c.sigma / golden - 1.0).abs() < 5e-3, "T {t}: {} vs {golden}", c.sigma);
        assert!(c.epsilon <= 2.0 && c.epsilon >= 0.999 * 2.0);
    }
    let c = calibrate_sigma(2.0, 1e-6, 0.2, 300, &orders).unwrap();
    assert!((c.sigma / 9.560531348746268 - 1.0).abs() < 5e-3, "{}", c.sigma);
}
