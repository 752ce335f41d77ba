use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::corpus::{FederatedCorpus, UserData};
use crate::error::{Error, Result};

/// Dirichlet draw computed in the log domain so tiny concentrations do not
/// underflow to an all-zero vector.
fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    // G(a) = G(a + 1) * U^(1/a)
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            let g = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / a
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Integer counts summing to `n`, as close to `n * mix` as the pools allow.
fn allocate(n: usize, mix: &[f64], avail: &[usize]) -> Vec<usize> {
    let target: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut out: Vec<usize> = target
        .iter()
        .zip(avail)
        .map(|(t, &a)| (t.floor() as usize).min(a))
        .collect();
    let mut left = n - out.iter().sum::<usize>();
    while left > 0 {
        let pick = (0..mix.len())
            .filter(|&l| out[l] < avail[l])
            .max_by(|&a, &b| {
                (target[a] - out[a] as f64)
                    .total_cmp(&(target[b] - out[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("enough sentences remain");
        out[pick] += 1;
        left -= 1;
    }
    out
}

/// Split labelled sentences over `num_clients` equal-sized clients whose
/// label mixtures are drawn from `Dirichlet(concentration * p_global)`.
/// Every sentence lands on exactly one client.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    sentences: Vec<(Vec<u32>, usize)>,
    num_clients: usize,
    concentration: f64,
    rng: &mut R,
) -> Result<Vec<UserData>> {
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!("concentration {concentration} must be positive")));
    }
    let n = sentences.len();
    if n < num_clients {
        return Err(Error::InvalidArgument(format!(
            "{n} sentences cannot fill {num_clients} clients"
        )));
    }
    let num_labels = sentences.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
    let mut pools: Vec<Vec<Vec<u32>>> = vec![Vec::new(); num_labels];
    for (s, l) in sentences {
        pools[l].push(s);
    }
    let present: Vec<usize> = (0..num_labels).filter(|&l| !pools[l].is_empty()).collect();
    for &l in &present {
        pools[l].shuffle(rng);
    }
    let alpha: Vec<f64> = present
        .iter()
        .map(|&l| concentration * pools[l].len() as f64 / n as f64)
        .collect();

    let mut users = Vec::with_capacity(num_clients);
    for c in 0..num_clients {
        let size = n / num_clients + usize::from(c < n % num_clients);
        let mix = dirichlet(&alpha, rng);
        let avail: Vec<usize> = present.iter().map(|&l| pools[l].len()).collect();
        let counts = allocate(size, &mix, &avail);
        let mut user = UserData {
            user_id: format!("client-{c:05}"),
            sentences: Vec::with_capacity(size),
            labels: Vec::with_capacity(size),
        };
        for (&l, &k) in present.iter().zip(&counts) {
            let pool = &mut pools[l];
            user.sentences.extend(pool.drain(pool.len() - k..));
            user.labels.extend(std::iter::repeat(l).take(k));
        }
        users.push(user);
    }
    Ok(users.into_iter().filter(|u| !u.sentences.is_empty()).collect())
}

impl FederatedCorpus {
    /// Pool every training sentence and redistribute it with [`partition_dirichlet`].
    pub fn repartition<R: Rng + ?Sized>(
        &self,
        num_clients: usize,
        concentration: f64,
        rng: &mut R,
    ) -> Result<FederatedCorpus> {
        let pooled = self
            .users
            .iter()
            .flat_map(|u| u.sentences.iter().cloned().zip(u.labels.iter().copied()))
            .collect();
        Ok(FederatedCorpus {
            vocab: self.vocab.clone(),
            users: partition_dirichlet(pooled, num_clients, concentration, rng)?,
            dev: self.dev.clone(),
        })
    }
}
