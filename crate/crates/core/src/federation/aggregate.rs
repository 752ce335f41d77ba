use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDelta;
use crate::payload::{build_client_payload, expand_payload, SparsePayload, WordSampler};
use crate::privacy::{gaussian_noise_sum, PrivacyParams};

/// What the noised sum is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Expected cohort size `q · N`.
    ExpectedCohort,
    /// Realised cohort size `|C|`.
    ActualCohort,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected-cohort" => Ok(Self::ExpectedCohort),
            "actual-cohort" => Ok(Self::ActualCohort),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization {other:?}, expected expected-cohort or actual-cohort"
            ))),
        }
    }
}

/// Wire payload of one client, already clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPayload {
    pub payload: SparsePayload,
    /// L2 norm before clipping.
    pub norm: f64,
}

/// Restrict (when a sampler is given), weight and clip one client delta.
pub fn prepare_payload(
    delta: &ModelDelta,
    words: &[u32],
    sampler: Option<&WordSampler>,
    clip_radius: f64,
) -> Result<ClientPayload> {
    let mut payload = match sampler {
        Some(s) => build_client_payload(delta, words, s)?,
        None => SparsePayload::full(delta),
    };
    let norm = payload.clip(clip_radius)?;
    Ok(ClientPayload { payload, norm })
}

/// Sum clipped payloads in the given order, noise the sum on the sampled rows
/// and the dense section, normalise and expand to a full-shape delta.
pub fn combine_payloads<R: Rng + ?Sized>(
    payloads: &[ClientPayload],
    template: SparsePayload,
    privacy: &PrivacyParams,
    population: usize,
    normalization: Normalization,
    vocab: usize,
    rng: &mut R,
) -> Result<ModelDelta> {
    let mut sum = template;
    sum.iter_mut().for_each(|x| *x = 0.0);
    for p in payloads {
        sum.add_assign(&p.payload)?;
    }
    let mut flat: Vec<f64> = sum.iter().copied().collect();
    gaussian_noise_sum(&mut flat, privacy.noise_sigma, privacy.clip_radius, rng)?;
    let denom = match normalization {
        Normalization::ExpectedCohort => privacy.sampling_rate * population as f64,
        Normalization::ActualCohort => payloads.len().max(1) as f64,
    };
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument("normaliser must be positive".into()));
    }
    for (dst, src) in sum.iter_mut().zip(flat) {
        *dst = src / denom;
    }
    expand_payload(&sum, vocab)
}

/// One round of aggregation over raw client deltas: payload construction,
/// clipping, summation in the given order, noise, normalisation, expansion.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_round<R: Rng + ?Sized>(
    deltas: &[ModelDelta],
    words: &[u32],
    sampler: Option<&WordSampler>,
    privacy: &PrivacyParams,
    population: usize,
    normalization: Normalization,
    template: &ModelDelta,
    rng: &mut R,
) -> Result<ModelDelta> {
    let vocab = template.rows.nrows();
    for d in deltas {
        if d.rows.dim() != template.rows.dim() || d.dense.len() != template.dense.len() {
            return Err(Error::Shape("client delta does not match the model layout".into()));
        }
    }
    let payloads = deltas
        .iter()
        .map(|d| prepare_payload(d, words, sampler, privacy.clip_radius))
        .collect::<Result<Vec<_>>>()?;
    let indices = match sampler {
        Some(_) => words.to_vec(),
        None => (0..vocab as u32).collect(),
    };
    let empty = SparsePayload::zeros(indices, template.rows.ncols(), template.dense.len());
    combine_payloads(&payloads, empty, privacy, population, normalization, vocab, rng)
}
