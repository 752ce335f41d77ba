use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Scale that projects a vector of norm `norm` onto the L2 ball of radius `radius`.
pub fn clip_factor(norm: f64, radius: f64) -> f64 {
    if norm > radius {
        radius / norm
    } else {
        1.0
    }
}

/// `delta · min(1, S/‖delta‖₂)`.
pub fn clip_l2(delta: &[f64], radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("clip radius {radius} must be positive")));
    }
    if delta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector to clip".into()));
    }
    let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut c = clip_factor(norm, radius);
    let mut out: Vec<f64> = delta.iter().map(|x| x * c).collect();
    // Rounding can leave the result an ulp outside the ball.
    while c < 1.0 && out.iter().map(|x| x * x).sum::<f64>().sqrt() > radius {
        c *= 1.0 - f64::EPSILON;
        out = delta.iter().map(|x| x * c).collect();
    }
    Ok(out)
}

/// Add i.i.d. `N(0, (σ·S)²)` to every coordinate of a sum of clipped vectors.
pub fn gaussian_noise_sum<R: Rng + ?Sized>(
    summed: &mut [f64],
    sigma: f64,
    radius: f64,
    rng: &mut R,
) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise multiplier {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma * radius)
        .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
    for x in summed.iter_mut() {
        *x += normal.sample(rng);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::{prop_assert, proptest};

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn three_four_five() {
        let c = clip_l2(&[3.0, 4.0], 0.3).unwrap();
        assert!((c[0] - 0.18).abs() < 1e-15 && (c[1] - 0.24).abs() < 1e-15);
        assert!((norm(&c) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn short_vectors_pass_through() {
        let x = [0.06, -0.08];
        assert_eq!(clip_l2(&x, 0.3).unwrap(), x.to_vec());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(clip_l2(&[f64::NAN], 1.0).is_err());
        assert!(clip_l2(&[1.0], 0.0).is_err());
        assert!(gaussian_noise_sum(&mut [0.0], -1.0, 1.0, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn thousand_random_vectors_stay_in_ball() {
        let mut rng = stream(17, &[]);
        for _ in 0..1000 {
            let n = rng.random_range(1..50);
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let c = clip_l2(&x, 0.3).unwrap();
            assert!(norm(&c) <= 0.3);
            // Positive multiple of the input.
            let ratio = c.iter().zip(&x).find(|(_, b)| **b != 0.0).map(|(a, b)| a / b).unwrap();
            assert!(ratio > 0.0 && ratio <= 1.0);
            for (a, b) in c.iter().zip(&x) {
                assert!((a - ratio * b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_seed_is_deterministic() {
        let mut x = vec![1.0, 2.0, 3.0];
        gaussian_noise_sum(&mut x, 0.0, 0.3, &mut stream(1, &[])).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 64];
        gaussian_noise_sum(&mut a, 1.3, 0.3, &mut stream(5, &[2])).unwrap();
        gaussian_noise_sum(&mut b, 1.3, 0.3, &mut stream(5, &[2])).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn empirical_std_matches() {
        let mut x = vec![0.0; 1_000_000];
        gaussian_noise_sum(&mut x, 1.0, 0.3, &mut stream(3, &[])).unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.3).abs() < 0.003, "{std}");
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent(x in proptest::collection::vec(-100.0f64..100.0, 1..40), s in 0.01f64..10.0) {
            let once = clip_l2(&x, s).unwrap();
            prop_assert!(norm(&once) <= s);
            let twice = clip_l2(&once, s).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
