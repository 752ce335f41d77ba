use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::data::ngram_windows;
use crate::error::{Error, Result};
use crate::model::{nce_loss_and_grad, Minibatch, ModelDelta, ModelParams};

/// Client-side optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub epochs: usize,
    /// Sentences per minibatch.
    pub batch_size: usize,
    pub lr: f64,
}

/// Draws NCE noise words from the unigram.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    alias: WeightedAliasIndex<f64>,
}

impl NoiseSampler {
    pub fn new(p_uni: &[f64]) -> Result<Self> {
        let alias = WeightedAliasIndex::new(p_uni.to_vec())
            .map_err(|e| Error::InvalidArgument(format!("unigram table unusable for sampling: {e}")))?;
        Ok(Self { alias })
    }

    pub fn draw<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<u32> {
        (0..k).map(|_| self.alias.sample(rng) as u32).collect()
    }
}

/// Turn a group of sentences into an NCE minibatch.
pub fn make_minibatch<R: Rng + ?Sized>(
    sentences: &[&Vec<u32>],
    fofe_order: usize,
    noise_k: usize,
    noise: &NoiseSampler,
    rng: &mut R,
) -> Minibatch {
    let mut batch = Minibatch::default();
    for s in sentences {
        for ex in ngram_windows(s, fofe_order) {
            batch.contexts.push(ex.history);
            batch.targets.push(ex.target);
            batch.noise.push(noise.draw(noise_k, rng));
        }
    }
    batch
}

/// Plain minibatch SGD on the NCE loss, in place. Sentences are reshuffled
/// every epoch with `rng`, which also supplies the noise words.
pub fn sgd_epochs<R: Rng + ?Sized>(
    params: &mut ModelParams,
    sentences: &[Vec<u32>],
    settings: &LocalSettings,
    p_uni: &[f64],
    noise: &NoiseSampler,
    rng: &mut R,
    client: usize,
) -> Result<()> {
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let (order, k) = (params.config.fofe_order, params.config.nce_noise_k);
    let mut refs: Vec<&Vec<u32>> = sentences.iter().collect();
    let mut batch_index = 0;
    for _ in 0..settings.epochs {
        refs.shuffle(rng);
        for chunk in refs.chunks(settings.batch_size) {
            let batch = make_minibatch(chunk, order, k, noise, rng);
            let out = nce_loss_and_grad(params, &batch, p_uni)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    client,
                    batch: batch_index,
                });
            }
            params
                .apply_gradients(&out.grads, -settings.lr)
                .map_err(|_| Error::Diverged {
                    client,
                    batch: batch_index,
                })?;
            batch_index += 1;
        }
    }
    Ok(())
}

/// Train a copy of `theta` on one client's sentences and return the change
/// in the trainable parameters.
pub fn local_train<R: Rng + ?Sized>(
    sentences: &[Vec<u32>],
    theta: &ModelParams,
    settings: &LocalSettings,
    p_uni: &[f64],
    noise: &NoiseSampler,
    rng: &mut R,
    client: usize,
) -> Result<ModelDelta> {
    let mut local = theta.clone();
    sgd_epochs(&mut local, sentences, settings, p_uni, noise, rng, client)?;
    local.diff(theta)
}
