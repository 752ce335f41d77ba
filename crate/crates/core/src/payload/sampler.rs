//! Server-side word sampling without replacement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How kept embedding rows are reweighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Scale by `1/Q(w)`.
    ApproxQ,
    /// Scale by `1/π(w)`, the probability that `w` lands in the sampled set.
    InclusionProb,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approx-q" => Ok(Self::ApproxQ),
            "inclusion-prob" => Ok(Self::InclusionProb),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting {other:?}, expected approx-q or inclusion-prob"
            ))),
        }
    }
}

/// Binary indexed tree over nonnegative weights, for sequential draws with removal.
struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let mut tree = vec![0.0; n + 1];
        tree[1..].copy_from_slice(weights);
        for i in 1..=n {
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i];
            }
        }
        Self { tree }
    }

    fn add(&mut self, index: usize, value: f64) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] += value;
            i += i & i.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut i = self.tree.len() - 1;
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    /// Index whose cumulative interval contains `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                pos = next;
                target -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Distribution `Q`, sample size `m` and the reweighting rule.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSampler {
    q: Vec<f64>,
    m: usize,
    weighting: Weighting,
    uniform: bool,
    inclusion: Option<Vec<f64>>,
}

impl WordSampler {
    /// Sampler with `Q ∝ weights^(1/temperature)`.
    pub fn new(weights: &[f64], temperature: f64, m: usize, weighting: Weighting) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("sampler needs a nonempty vocabulary".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("sampler weights must be finite and nonnegative".into()));
        }
        let powered: Vec<f64> = weights.iter().map(|w| w.powf(1.0 / temperature)).collect();
        let total: f64 = powered.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("sampler weights sum to zero".into()));
        }
        let q: Vec<f64> = powered.iter().map(|w| w / total).collect();
        let support = q.iter().filter(|&&x| x > 0.0).count();
        if m > support {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {m} distinct words from a support of {support}"
            )));
        }
        let uniform = q.iter().all(|&x| x == q[0]);
        let inclusion = uniform.then(|| vec![m as f64 / q.len() as f64; q.len()]);
        Ok(Self {
            q,
            m,
            weighting,
            uniform,
            inclusion,
        })
    }

    pub fn uniform(vocab: usize, m: usize, weighting: Weighting) -> Result<Self> {
        Self::new(&vec![1.0; vocab], 1.0, m, weighting)
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn vocab_size(&self) -> usize {
        self.q.len()
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn inclusion(&self) -> Option<&[f64]> {
        self.inclusion.as_deref()
    }

    /// Install an externally computed inclusion table.
    pub fn set_inclusion(&mut self, pi: Vec<f64>) -> Result<()> {
        if pi.len() != self.q.len() {
            return Err(Error::Shape(format!(
                "inclusion table has {} entries for a vocabulary of {}",
                pi.len(),
                self.q.len()
            )));
        }
        if pi.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::InvalidArgument("inclusion probabilities must lie in (0, 1]".into()));
        }
        self.inclusion = Some(pi);
        Ok(())
    }

    /// Fill the inclusion table by Monte Carlo over `trials` draws of the word set.
    /// Words never drawn are credited half a hit so their weight stays finite.
    pub fn estimate_inclusion<R: Rng + ?Sized>(&mut self, trials: usize, rng: &mut R) -> Result<()> {
        if self.uniform {
            return Ok(());
        }
        if trials == 0 {
            return Err(Error::InvalidArgument("need at least one Monte Carlo trial".into()));
        }
        let mut hits = vec![0u64; self.q.len()];
        for _ in 0..trials {
            for w in self.sample(rng)? {
                hits[w as usize] += 1;
            }
        }
        let pi = hits
            .iter()
            .zip(&self.q)
            .map(|(&h, &q)| {
                if q == 0.0 {
                    1.0
                } else {
                    (h as f64).max(0.5) / trials as f64
                }
            })
            .collect();
        self.inclusion = Some(pi);
        Ok(())
    }

    /// Draw `m` distinct ids by sequential draws from `Q` renormalised over
    /// the words not yet taken. Returned in increasing order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<u32>> {
        let v = self.q.len();
        let mut out = if self.m == v {
            (0..v as u32).collect()
        } else if self.uniform {
            rand::seq::index::sample(rng, v, self.m)
                .into_iter()
                .map(|i| i as u32)
                .collect()
        } else {
            let mut tree = Fenwick::new(&self.q);
            let mut taken = vec![false; v];
            let mut out = Vec::with_capacity(self.m);
            while out.len() < self.m {
                let total = tree.total();
                let i = tree.find(rng.random::<f64>() * total);
                // Rounding can leave crumbs of a removed weight; redraw.
                if taken[i] || self.q[i] == 0.0 {
                    continue;
                }
                taken[i] = true;
                tree.add(i, -self.q[i]);
                out.push(i as u32);
            }
            out
        };
        out.sort_unstable();
        Ok(out)
    }

    /// Importance weight applied to the kept row of `word`.
    pub fn weight(&self, word: u32) -> Result<f64> {
        let w = word as usize;
        if w >= self.q.len() {
            return Err(Error::TokenOutOfRange {
                id: word,
                vocab: self.q.len(),
            });
        }
        match self.weighting {
            Weighting::ApproxQ => Ok(1.0 / self.q[w]),
            Weighting::InclusionProb => match &self.inclusion {
                Some(pi) => Ok(1.0 / pi[w]),
                None => Err(Error::InvalidArgument(
                    "inclusion-prob weighting needs an inclusion table".into(),
                )),
            },
        }
    }
}
