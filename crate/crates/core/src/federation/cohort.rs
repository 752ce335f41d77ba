use rand::Rng;

use crate::error::{Error, Result};

/// Poisson sampling: each of `population` clients joins independently with
/// probability `q`. Ids are returned in increasing order.
pub fn sample_cohort<R: Rng + ?Sized>(population: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {q} must lie in (0, 1]")));
    }
    if q == 1.0 {
        return Ok((0..population).collect());
    }
    Ok((0..population).filter(|_| rng.random::<f64>() < q).collect())
}
