use ndarray::ArrayView2;

use super::ModelConfig;
use crate::error::{Error, Result};

/// Fixed-size ordinally-forgetting encoding of a word history.
///
/// Runs `z_j = α·z_{j-1} + e(w_j)` over the whole (BOS-padded) history and
/// returns the codes at the `fofe_order` most recent positions, most recent
/// first. Positions before the start of the history contribute zero vectors.
pub fn fofe_encode(
    history: &[u32],
    cfg: &ModelConfig,
    embedding: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("empty FOFE history".into()));
    }
    if embedding.dim() != (cfg.vocab_size, cfg.embed_dim) {
        return Err(Error::Shape(format!(
            "embedding is {:?}, config expects {}x{}",
            embedding.dim(),
            cfg.vocab_size,
            cfg.embed_dim
        )));
    }
    for &w in history {
        if w as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: w,
                vocab: cfg.vocab_size,
            });
        }
    }
    let mut out = vec![0.0; cfg.input_dim()];
    fofe_into(
        history.iter().map(|&w| embedding.row(w as usize).to_slice().expect("row-major")),
        cfg.fofe_order,
        cfg.fofe_alpha,
        &mut out,
    );
    Ok(out)
}

/// Encode a history given as a sequence of embedding rows into `out`
/// (`order * d` values, overwritten).
pub fn fofe_into<'a>(
    rows: impl ExactSizeIterator<Item = &'a [f64]>,
    order: usize,
    alpha: f64,
    out: &mut [f64],
) {
    let len = rows.len();
    let d = out.len() / order;
    out.fill(0.0);
    let mut z = vec![0.0; d];
    for (j, row) in rows.enumerate() {
        for (zi, &e) in z.iter_mut().zip(row) {
            *zi = alpha * *zi + e;
        }
        let slot = len - 1 - j;
        if slot < order {
            out[slot * d..(slot + 1) * d].copy_from_slice(&z);
        }
    }
}

/// Adjoint of [`fofe_into`]: distribute `d_out` onto each history position.
/// `accumulate(j, g)` receives the gradient for the row at position `j`.
pub(crate) fn fofe_backward(
    len: usize,
    order: usize,
    alpha: f64,
    d_out: &[f64],
    mut accumulate: impl FnMut(usize, &[f64]),
) {
    let d = d_out.len() / order;
    let mut g = vec![0.0; d];
    for j in (0..len).rev() {
        let slot = len - 1 - j;
        for gi in g.iter_mut() {
            *gi *= alpha;
        }
        if slot < order {
            for (gi, &o) in g.iter_mut().zip(&d_out[slot * d..(slot + 1) * d]) {
                *gi += o;
            }
        }
        accumulate(j, &g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn cfg(v: usize, d: usize, k: usize, alpha: f64) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            embed_dim: d,
            fofe_order: k,
            fofe_alpha: alpha,
            hidden_widths: vec![4],
            lora_rank: None,
            nce_noise_k: 1,
            tie_embeddings: true,
            embed_init: 0.05,
        }
    }

    fn table(v: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut s = seed;
        Array2::from_shape_simple_fn((v, d), || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Direct summation `z_j = Σ_{i≤j} α^{j-i} e(w_i)`.
    fn direct(history: &[u32], e: &Array2<f64>, k: usize, alpha: f64) -> Vec<f64> {
        let d = e.ncols();
        let len = history.len();
        let mut out = vec![0.0; k * d];
        for slot in 0..k.min(len) {
            let j = len - 1 - slot;
            for i in 0..=j {
                let c = alpha.powi((j - i) as i32);
                for c_ in 0..d {
                    out[slot * d + c_] += c * e[[history[i] as usize, c_]];
                }
            }
        }
        out
    }

    #[test]
    fn single_token_is_its_embedding() {
        let e = table(5, 3, 1);
        let got = fofe_encode(&[2], &cfg(5, 3, 1, 0.7), e.view()).unwrap();
        assert_eq!(got, e.row(2).to_vec());
    }

    #[test]
    fn two_tokens_half_forgetting() {
        let e = table(5, 3, 2);
        let got = fofe_encode(&[1, 4], &cfg(5, 3, 1, 0.5), e.view()).unwrap();
        let want: Vec<f64> = (0..3).map(|c| 0.5 * e[[1, c]] + e[[4, c]]).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn third_order_matches_direct_sum() {
        let e = table(9, 4, 3);
        let history = [3, 0, 8, 8, 1, 5, 2];
        let got = fofe_encode(&history, &cfg(9, 4, 3, 0.7), e.view()).unwrap();
        let want = direct(&history, &e, 3, 0.7);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-300), "{g} vs {w}");
        }
    }

    #[test]
    fn short_history_pads_with_zero_codes() {
        let e = table(4, 2, 4);
        let got = fofe_encode(&[1, 2], &cfg(4, 2, 3, 0.7), e.view()).unwrap();
        assert_eq!(&got[4..], &[0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let e = table(4, 2, 5);
        assert!(fofe_encode(&[], &cfg(4, 2, 1, 0.7), e.view()).is_err());
        assert!(matches!(
            fofe_encode(&[4], &cfg(4, 2, 1, 0.7), e.view()),
            Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn backward_is_adjoint() {
        // <fofe(x), g> == Σ_j <e_j, backward(g)_j> for a linear map.
        let e = table(6, 3, 6);
        let history = [1u32, 5, 0, 2, 2];
        let enc = fofe_encode(&history, &cfg(6, 3, 3, 0.6), e.view()).unwrap();
        let g: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let lhs: f64 = enc.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut rhs = 0.0;
        fofe_backward(history.len(), 3, 0.6, &g, |j, gj| {
            rhs += gj
                .iter()
                .zip(e.row(history[j] as usize))
                .map(|(a, b)| a * b)
                .sum::<f64>();
        });
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn recursion_equals_direct_sum(
            history in proptest::collection::vec(0u32..7, 1..=32),
            k in 1usize..5,
            alpha in 0.05f64..0.95,
        ) {
            let e = table(7, 3, 11);
            let got = fofe_encode(&history, &cfg(7, 3, k, alpha), e.view()).unwrap();
            let want = direct(&history, &e, k, alpha);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
            }
        }
    }
}
