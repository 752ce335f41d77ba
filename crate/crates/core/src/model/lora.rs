use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Adapters, LowRank, ModelParams};
use crate::error::{Error, Result};

/// `W + L·R` in double precision.
///
/// The inner product over the rank is summed first and then added to `W`, so
/// `L = 0` reproduces `W` exactly.
pub fn lora_merge(
    w: ArrayView2<'_, f32>,
    l: ArrayView2<'_, f32>,
    r: ArrayView2<'_, f32>,
) -> Result<Array2<f64>> {
    let (rows, cols) = w.dim();
    if l.nrows() != rows || r.ncols() != cols || l.ncols() != r.nrows() {
        return Err(Error::Shape(format!(
            "cannot merge {:?} + {:?}·{:?}",
            w.dim(),
            l.dim(),
            r.dim()
        )));
    }
    let rank = l.ncols();
    let rt: Array2<f64> = r.t().mapv(|x| x as f64);
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let li: Vec<f64> = l.row(i).iter().map(|&x| x as f64).collect();
        if li.iter().all(|&x| x == 0.0) {
            for j in 0..cols {
                out[[i, j]] = w[[i, j]] as f64;
            }
            continue;
        }
        for j in 0..cols {
            let rj = rt.row(j);
            let mut s = 0.0;
            for k in 0..rank {
                s += li[k] * rj[k];
            }
            out[[i, j]] = w[[i, j]] as f64 + s;
        }
    }
    Ok(out)
}

/// Attach low-rank factors to the embedding(s), every dense layer and the
/// projection. Left factors start at zero, right factors are drawn from
/// `N(0, 1/r)`. The base matrices become frozen; the trainable set is then
/// the factors plus the biases.
pub fn lora_wrap<R: Rng + ?Sized>(params: &ModelParams, r: usize, rng: &mut R) -> Result<ModelParams> {
    if params.adapters.is_some() {
        return Err(Error::InvalidArgument("model already carries adapters".into()));
    }
    let mut config = params.config.clone();
    config.lora_rank = Some(r);
    super::check_rank(&config, r)?;
    let normal = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("positive std");
    let mut factor = |rows: usize, cols: usize| LowRank {
        left: Array2::zeros((rows, r)),
        right: Array2::from_shape_simple_fn((r, cols), || normal.sample(rng) as f32),
    };
    let (v, d) = (config.vocab_size, config.embed_dim);
    let embedding = factor(v, d);
    let output_embedding = params.output_embedding.as_ref().map(|_| factor(v, d));
    let layers = params
        .layers
        .iter()
        .map(|l| factor(l.weight.nrows(), l.weight.ncols()))
        .collect();
    let projection = factor(params.projection.nrows(), params.projection.ncols());
    let mut wrapped = params.clone();
    wrapped.config = config;
    wrapped.adapters = Some(Adapters {
        rank: r,
        embedding,
        output_embedding,
        layers,
        projection,
    });
    Ok(wrapped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::stream;
    use ndarray::Array2;

    fn naive(w: &Array2<f32>, l: &Array2<f32>, r: &Array2<f32>) -> Array2<f64> {
        let mut out = Array2::zeros(w.dim());
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                let mut s = 0.0;
                for k in 0..l.ncols() {
                    s += l[[i, k]] as f64 * r[[k, j]] as f64;
                }
                out[[i, j]] = w[[i, j]] as f64 + s;
            }
        }
        out
    }

    fn seq(rows: usize, cols: usize, seed: f32) -> Array2<f32> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f32 * seed).sin())
    }

    #[test]
    fn zero_left_factor_returns_base() {
        let w = seq(5, 3, 0.3);
        let merged = lora_merge(w.view(), Array2::zeros((5, 2)).view(), seq(2, 3, 0.7).view()).unwrap();
        assert_eq!(merged, w.mapv(|x| x as f64));
    }

    #[test]
    fn identity_slice_selects_rows_of_right() {
        let w = Array2::<f32>::zeros((2, 4));
        let mut l = Array2::<f32>::zeros((2, 3));
        l[[0, 0]] = 1.0;
        l[[1, 2]] = 1.0;
        let r = seq(3, 4, 1.3);
        let merged = lora_merge(w.view(), l.view(), r.view()).unwrap();
        assert_eq!(merged.row(0), r.row(0).mapv(|x| x as f64));
        assert_eq!(merged.row(1), r.row(2).mapv(|x| x as f64));
    }

    #[test]
    fn matches_triple_loop() {
        let (w, l, r) = (seq(6, 4, 0.11), seq(6, 2, 0.53), seq(2, 4, 0.91));
        assert_eq!(lora_merge(w.view(), l.view(), r.view()).unwrap(), naive(&w, &l, &r));
    }

    #[test]
    fn shape_mismatch() {
        let err = lora_merge(seq(3, 3, 1.0).view(), seq(2, 1, 1.0).view(), seq(1, 3, 1.0).view());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn wrap_counts_and_rejects_large_rank() {
        let cfg = ModelConfig {
            vocab_size: 20,
            embed_dim: 6,
            fofe_order: 2,
            fofe_alpha: 0.7,
            hidden_widths: vec![8, 8],
            lora_rank: None,
            nce_noise_k: 2,
            tie_embeddings: true,
            embed_init: 0.05,
        };
        let base = ModelParams::init(&cfg, &mut stream(0, &[1])).unwrap();
        let wrapped = lora_wrap(&base, 2, &mut stream(0, &[2])).unwrap();
        // L_E (20x2) rows; R_E 2x6, layers (12x2 + 2x8 + 8), (8x2 + 2x8 + 8), projection 8x2 + 2x6.
        assert_eq!(wrapped.row_width(), 2);
        assert_eq!(wrapped.dense_len(), 12 + (24 + 16 + 8) + (16 + 16 + 8) + (16 + 12));
        let a = wrapped.adapters.as_ref().unwrap();
        assert!(a.embedding.left.iter().all(|&x| x == 0.0));
        assert!(a.embedding.right.iter().any(|&x| x != 0.0));
        assert!(lora_wrap(&base, 6, &mut stream(0, &[3])).is_err());
        assert!(lora_wrap(&wrapped, 2, &mut stream(0, &[3])).is_err());
    }

    #[test]
    fn right_factor_variance_is_one_over_rank() {
        let cfg = ModelConfig {
            vocab_size: 2000,
            embed_dim: 64,
            fofe_order: 1,
            fofe_alpha: 0.7,
            hidden_widths: vec![64],
            lora_rank: None,
            nce_noise_k: 2,
            tie_embeddings: true,
            embed_init: 0.05,
        };
        let base = ModelParams::zeros(&cfg).unwrap();
        let wrapped = lora_wrap(&base, 16, &mut stream(9, &[1])).unwrap();
        let right = &wrapped.adapters.unwrap().embedding.right;
        let n = right.len() as f64;
        let var = right.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0 / 16.0).abs() < 0.01, "{var}");
    }
}
