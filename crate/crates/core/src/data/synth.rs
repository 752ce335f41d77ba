//! Synthetic federated corpus with Zipfian topic vocabularies and
//! cluster-coherent Markov chains.
//!
//! Each topic ranks the vocabulary by a Zipf law, shuffled inside short rank
//! windows so topics differ locally. Words are partitioned per topic into
//! small clusters, and the transition
//! `P(j|i) = (1-β)π_j + β π_j 1[c(j)=c(i)] / π(c(i))`
//! keeps `π` stationary while making the next word predictable from the
//! current cluster.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::corpus::{FederatedCorpus, UserData};
use super::vocab::{Vocabulary, BOS_TOKEN, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_users: usize,
    /// Total vocabulary size including BOS and UNK.
    pub vocab_size: usize,
    pub sentences_per_user: usize,
    /// Held-out sentences generated per user and pooled into the dev set.
    pub dev_sentences_per_user: usize,
    pub topics: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of staying inside the current word's cluster.
    pub coherence: f64,
    pub cluster_size: usize,
    /// Width of the rank windows shuffled per topic.
    pub rank_window: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_users: 50,
            vocab_size: 1000,
            sentences_per_user: 200,
            dev_sentences_per_user: 10,
            topics: 4,
            zipf_exponent: 1.1,
            min_len: 5,
            max_len: 20,
            coherence: 0.8,
            cluster_size: 8,
            rank_window: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_users", self.num_users),
            ("sentences_per_user", self.sentences_per_user),
            ("topics", self.topics),
            ("min_len", self.min_len),
            ("cluster_size", self.cluster_size),
            ("rank_window", self.rank_window),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size", "must be at least 3"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("max_len", "must be at least min_len"));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config("zipf_exponent", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(Error::config("coherence", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

struct Topic {
    start: WeightedAliasIndex<f64>,
    cluster_of: Vec<usize>,
    clusters: Vec<(Vec<u32>, WeightedAliasIndex<f64>)>,
}

impl Topic {
    fn new<R: Rng + ?Sized>(cfg: &SynthConfig, zipf: &[f64], rng: &mut R) -> Self {
        let n = zipf.len();
        let mut rank_of: Vec<usize> = (0..n).collect();
        for window in rank_of.chunks_mut(cfg.rank_window) {
            window.shuffle(rng);
        }
        let pi: Vec<f64> = rank_of.iter().map(|&r| zipf[r]).collect();
        let mut words: Vec<usize> = (0..n).collect();
        words.shuffle(rng);
        let mut cluster_of = vec![0; n];
        let clusters = words
            .chunks(cfg.cluster_size)
            .enumerate()
            .map(|(c, members)| {
                members.iter().for_each(|&w| cluster_of[w] = c);
                let ids = members.iter().map(|&w| w as u32 + 2).collect();
                let weights = members.iter().map(|&w| pi[w]).collect();
                (ids, WeightedAliasIndex::new(weights).expect("positive weights"))
            })
            .collect();
        Self {
            start: WeightedAliasIndex::new(pi).expect("positive weights"),
            cluster_of,
            clusters,
        }
    }

    fn sentence<R: Rng + ?Sized>(&self, len: usize, coherence: f64, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut w = self.start.sample(rng);
        out.push(w as u32 + 2);
        while out.len() < len {
            w = if rng.random::<f64>() < coherence {
                let (ids, dist) = &self.clusters[self.cluster_of[w]];
                ids[dist.sample(rng)] as usize - 2
            } else {
                self.start.sample(rng)
            };
            out.push(w as u32 + 2);
        }
        out
    }
}

/// Generate a corpus fully determined by `cfg.seed`. Words are named `w0`,
/// `w1`, ... by base Zipf rank, and numbered by training frequency like any
/// vocabulary built from text.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<FederatedCorpus> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[purpose::DATA]);
    let real = cfg.vocab_size - 2;
    let zipf: Vec<f64> = (1..=real).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
    let topics: Vec<Topic> = (0..cfg.topics).map(|_| Topic::new(cfg, &zipf, &mut rng)).collect();

    let mut users = Vec::with_capacity(cfg.num_users);
    let mut dev = Vec::with_capacity(cfg.num_users * cfg.dev_sentences_per_user);
    for u in 0..cfg.num_users {
        let primary = rng.random_range(0..cfg.topics);
        let secondary = (cfg.topics > 1 && rng.random::<bool>()).then(|| {
            let t = rng.random_range(0..cfg.topics - 1);
            if t >= primary {
                t + 1
            } else {
                t
            }
        });
        let weight: f64 = rng.random_range(0.5..1.0);
        let draw = |rng: &mut crate::rng::StreamRng| {
            let topic = match secondary {
                Some(s) if rng.random::<f64>() >= weight => s,
                _ => primary,
            };
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            (topics[topic].sentence(len, cfg.coherence, rng), topic)
        };
        let mut user = UserData {
            user_id: format!("user-{u:05}"),
            sentences: Vec::with_capacity(cfg.sentences_per_user),
            labels: Vec::with_capacity(cfg.sentences_per_user),
        };
        for _ in 0..cfg.sentences_per_user {
            let (s, t) = draw(&mut rng);
            user.sentences.push(s);
            user.labels.push(t);
        }
        for _ in 0..cfg.dev_sentences_per_user {
            dev.push(draw(&mut rng).0);
        }
        users.push(user);
    }

    let mut counts = vec![0u64; cfg.vocab_size];
    for &w in users.iter().flat_map(|u| u.sentences.iter().flatten()) {
        counts[w as usize] += 1;
    }
    // Renumber real words the way a vocabulary built from the text would:
    // by training count, ties by name.
    let mut order: Vec<usize> = (2..cfg.vocab_size).collect();
    let name = |i: usize| format!("w{}", i - 2);
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then_with(|| name(a).cmp(&name(b))));
    let mut remap = vec![0u32; cfg.vocab_size];
    remap[1] = 1;
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new as u32 + 2;
    }
    for s in users.iter_mut().flat_map(|u| u.sentences.iter_mut()).chain(dev.iter_mut()) {
        s.iter_mut().for_each(|w| *w = remap[*w as usize]);
    }
    let words = [BOS_TOKEN.to_string(), UNK_TOKEN.to_string()]
        .into_iter()
        .chain(order.iter().map(|&i| name(i)))
        .collect();
    let counts = [0, 0].into_iter().chain(order.iter().map(|&i| counts[i])).collect();
    let corpus = FederatedCorpus {
        vocab: Vocabulary::from_counts(words, counts)?,
        users,
        dev,
    };
    corpus.validate()?;
    Ok(corpus)
}
