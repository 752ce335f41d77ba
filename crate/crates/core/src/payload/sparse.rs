use ndarray::Array2;

use super::sampler::WordSampler;
use crate::error::{Error, Result};
use crate::model::ModelDelta;

/// A client update with embedding rows restricted to the sampled word set.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePayload {
    /// Strictly increasing token ids.
    pub indices: Vec<u32>,
    /// One weighted row per index.
    pub rows: Array2<f64>,
    /// Every non-embedding trainable, unweighted.
    pub dense: Vec<f64>,
}

pub(crate) fn check_indices(indices: &[u32], vocab: usize) -> Result<()> {
    for pair in indices.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::format(
                "payload",
                format!("indices must be strictly increasing, found {} then {}", pair[0], pair[1]),
            ));
        }
    }
    if let Some(&last) = indices.last() {
        if last as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: last, vocab });
        }
    }
    Ok(())
}

impl SparsePayload {
    /// Zero payload over a given word set.
    pub fn zeros(indices: Vec<u32>, row_width: usize, dense_len: usize) -> Self {
        let m = indices.len();
        Self {
            indices,
            rows: Array2::zeros((m, row_width)),
            dense: vec![0.0; dense_len],
        }
    }

    /// Every row kept with weight one.
    pub fn full(delta: &ModelDelta) -> Self {
        Self {
            indices: (0..delta.rows.nrows() as u32).collect(),
            rows: delta.rows.clone(),
            dense: delta.dense.clone(),
        }
    }

    pub fn row_width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.len() + self.dense.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.rows.iter().chain(self.dense.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.rows.iter_mut().chain(self.dense.iter_mut())
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|x| *x *= factor);
    }

    /// Scale onto the L2 ball of radius `radius`; returns the pre-clip norm.
    pub fn clip(&mut self, radius: f64) -> Result<f64> {
        if !(radius > 0.0) {
            return Err(Error::InvalidArgument(format!("clip radius {radius} must be positive")));
        }
        if self.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("payload before clipping".into()));
        }
        let norm = self.l2_norm();
        let f = crate::privacy::clip_factor(norm, radius);
        if f < 1.0 {
            self.scale(f);
            // Rounding can leave the result an ulp outside the ball.
            while self.l2_norm() > radius {
                self.scale(1.0 - f64::EPSILON);
            }
        }
        Ok(norm)
    }

    /// Elementwise sum with a payload over the same word set.
    pub fn add_assign(&mut self, other: &SparsePayload) -> Result<()> {
        if self.indices != other.indices
            || self.rows.dim() != other.rows.dim()
            || self.dense.len() != other.dense.len()
        {
            return Err(Error::Shape("payloads cover different word sets or layouts".into()));
        }
        self.rows += &other.rows;
        self.dense.iter_mut().zip(&other.dense).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Restrict a full client delta to the word set `words`, weighting each kept
/// row by the sampler's importance weight.
pub fn build_client_payload(
    delta: &ModelDelta,
    words: &[u32],
    sampler: &WordSampler,
) -> Result<SparsePayload> {
    let vocab = delta.rows.nrows();
    if sampler.vocab_size() != vocab {
        return Err(Error::Shape(format!(
            "sampler covers {} words, delta has {} rows",
            sampler.vocab_size(),
            vocab
        )));
    }
    check_indices(words, vocab)?;
    let mut rows = Array2::zeros((words.len(), delta.rows.ncols()));
    for (k, &w) in words.iter().enumerate() {
        let weight = sampler.weight(w)?;
        rows.row_mut(k)
            .zip_mut_with(&delta.rows.row(w as usize), |dst, &src| *dst = weight * src);
    }
    Ok(SparsePayload {
        indices: words.to_vec(),
        rows,
        dense: delta.dense.clone(),
    })
}

/// Scatter a payload back into a dense `vocab × width` delta with zeros off the word set.
pub fn expand_payload(payload: &SparsePayload, vocab: usize) -> Result<ModelDelta> {
    check_indices(&payload.indices, vocab)?;
    if payload.rows.nrows() != payload.indices.len() {
        return Err(Error::Shape(format!(
            "{} rows for {} indices",
            payload.rows.nrows(),
            payload.indices.len()
        )));
    }
    let mut delta = ModelDelta::zeros(vocab, payload.row_width(), payload.dense.len());
    for (k, &w) in payload.indices.iter().enumerate() {
        delta.rows.row_mut(w as usize).assign(&payload.rows.row(k));
    }
    delta.dense.copy_from_slice(&payload.dense);
    Ok(delta)
}
