use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};

use super::fofe::{fofe_backward, fofe_into};
use super::lora::lora_merge;
use super::params::{Gradients, ModelParams};
use crate::error::{Error, Result};

/// One prediction: a BOS-padded word history and the word that follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub history: Vec<u32>,
    pub target: u32,
}

/// A training batch together with its NCE noise words.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Minibatch {
    pub contexts: Vec<Vec<u32>>,
    pub targets: Vec<u32>,
    /// `nce_noise_k` unigram draws per example.
    pub noise: Vec<Vec<u32>>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self, vocab: usize, noise_k: usize) -> Result<()> {
        if self.contexts.len() != self.targets.len() || self.noise.len() != self.targets.len() {
            return Err(Error::Shape(format!(
                "batch has {} contexts, {} targets and {} noise lists",
                self.contexts.len(),
                self.targets.len(),
                self.noise.len()
            )));
        }
        for noise in &self.noise {
            if noise.len() != noise_k {
                return Err(Error::Shape(format!(
                    "expected {noise_k} noise words per example, got {}",
                    noise.len()
                )));
            }
        }
        for (ctx, _) in self.contexts.iter().zip(&self.targets) {
            if ctx.is_empty() {
                return Err(Error::InvalidArgument("empty context in batch".into()));
            }
        }
        let all = self
            .contexts
            .iter()
            .flatten()
            .chain(&self.targets)
            .chain(self.noise.iter().flatten());
        for &w in all {
            if w as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: w, vocab });
            }
        }
        Ok(())
    }
}

/// Activations of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Post-ReLU activations of each hidden layer.
    pub hidden: Vec<Vec<f64>>,
    /// Output of the projection, scored against embedding rows.
    pub output: Vec<f64>,
    /// Unnormalised score of every vocabulary word.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NceOutput {
    /// Mean NCE loss over the batch.
    pub loss: f64,
    pub grads: Gradients,
}

/// Dense layers and projection with adapters merged, in double precision.
struct EffectiveNet {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
    projection: Array2<f64>,
}

impl EffectiveNet {
    fn new(params: &ModelParams) -> Result<Self> {
        let adapters = params.adapters.as_ref();
        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, layer) in params.layers.iter().enumerate() {
            let w = match adapters {
                Some(a) => lora_merge(
                    layer.weight.view(),
                    a.layers[i].left.view(),
                    a.layers[i].right.view(),
                )?,
                None => layer.weight.mapv(|x| x as f64),
            };
            layers.push((w, layer.bias.mapv(|x| x as f64)));
        }
        let projection = match adapters {
            Some(a) => lora_merge(
                params.projection.view(),
                a.projection.left.view(),
                a.projection.right.view(),
            )?,
            None => params.projection.mapv(|x| x as f64),
        };
        Ok(Self { layers, projection })
    }

    /// Returns pre-activations, activations (`acts[0]` is the input) and the
    /// projected output.
    fn run(&self, x: Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>, Array2<f64>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts = vec![x];
        for (w, b) in &self.layers {
            let z = acts.last().expect("input present").dot(w) + b;
            acts.push(z.mapv(|v| v.max(0.0)));
            pre.push(z);
        }
        let u = acts.last().expect("input present").dot(&self.projection);
        (pre, acts, u)
    }
}

/// Effective (adapter-merged) row of the input or output embedding.
fn effective_row(params: &ModelParams, word: usize, output: bool) -> Vec<f64> {
    let table = match (&params.output_embedding, output) {
        (Some(o), true) => o,
        _ => &params.embedding,
    };
    let base = table.row(word);
    let factor = params.adapters.as_ref().map(|a| match (&a.output_embedding, output) {
        (Some(o), true) => o,
        _ => &a.embedding,
    });
    match factor {
        None => base.iter().map(|&x| x as f64).collect(),
        Some(f) => {
            let l = f.left.row(word);
            (0..base.len())
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..l.len() {
                        s += l[k] as f64 * f.right[[k, j]] as f64;
                    }
                    base[j] as f64 + s
                })
                .collect()
        }
    }
}

fn effective_table(params: &ModelParams, output: bool) -> Result<Array2<f64>> {
    let table = match (&params.output_embedding, output) {
        (Some(o), true) => o,
        _ => &params.embedding,
    };
    match &params.adapters {
        None => Ok(table.mapv(|x| x as f64)),
        Some(a) => {
            let f = match (&a.output_embedding, output) {
                (Some(o), true) => o,
                _ => &a.embedding,
            };
            lora_merge(table.view(), f.left.view(), f.right.view())
        }
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(p(D=0|c,w), p(D=1|c,w))` for an unnormalised score, with
/// `p_θ(w,c) = exp(score)` mixed against `k·p_uni(w)`.
pub fn nce_probabilities(score: f64, noise_k: usize, p_uni: f64) -> Result<(f64, f64)> {
    let logit = nce_logit(score, noise_k, p_uni)?;
    Ok((sigmoid(-logit), sigmoid(logit)))
}

fn nce_logit(score: f64, noise_k: usize, p_uni: f64) -> Result<f64> {
    if !(p_uni > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "unigram probability {p_uni} must be positive for NCE"
        )));
    }
    Ok(score - (noise_k as f64 * p_uni).ln())
}

/// Forward pass for one context vector: hidden activations and the score of
/// every word.
pub fn forward(params: &ModelParams, context: &[f64]) -> Result<Forward> {
    let cfg = &params.config;
    if context.len() != cfg.input_dim() {
        return Err(Error::Shape(format!(
            "context vector has {} entries, first layer expects {}",
            context.len(),
            cfg.input_dim()
        )));
    }
    let net = EffectiveNet::new(params)?;
    let x = Array2::from_shape_vec((1, context.len()), context.to_vec()).expect("row vector");
    let (_, acts, u) = net.run(x);
    let output = u.row(0).to_vec();
    let scores = (0..cfg.vocab_size)
        .map(|w| {
            effective_row(params, w, true)
                .iter()
                .zip(&output)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Ok(Forward {
        hidden: acts[1..].iter().map(|a| a.row(0).to_vec()).collect(),
        output,
        scores,
    })
}

/// Mean NCE loss of a batch and its exact gradient over the trainable layout.
///
/// Each example contributes `-ln p(D=1|c,w) - Σ ln p(D=0|c,w̄)` over its noise
/// words. Only the embedding rows of words that occur in the batch (history,
/// target or noise) receive gradient.
pub fn nce_loss_and_grad(params: &ModelParams, batch: &Minibatch, p_uni: &[f64]) -> Result<NceOutput> {
    let cfg = &params.config;
    let (v, d, k) = (cfg.vocab_size, cfg.embed_dim, cfg.nce_noise_k);
    batch.validate(v, k)?;
    if p_uni.len() != v {
        return Err(Error::Shape(format!(
            "unigram table has {} entries, vocabulary {v}",
            p_uni.len()
        )));
    }
    let n = batch.len();
    let mut grads = Gradients::zeros(params.dense_len());
    if n == 0 {
        return Ok(NceOutput { loss: 0.0, grads });
    }

    // Unique words in first-seen order.
    let mut index: HashMap<u32, usize> = HashMap::new();
    let mut words: Vec<u32> = Vec::new();
    let all = batch
        .contexts
        .iter()
        .flatten()
        .chain(&batch.targets)
        .chain(batch.noise.iter().flatten());
    for &w in all {
        index.entry(w).or_insert_with(|| {
            words.push(w);
            words.len() - 1
        });
    }
    let untied = params.output_embedding.is_some();
    let input_rows = Array2::from_shape_vec(
        (words.len(), d),
        words.iter().flat_map(|&w| effective_row(params, w as usize, false)).collect(),
    )
    .expect("row count");
    let output_rows = if untied {
        Array2::from_shape_vec(
            (words.len(), d),
            words.iter().flat_map(|&w| effective_row(params, w as usize, true)).collect(),
        )
        .expect("row count")
    } else {
        input_rows.clone()
    };

    let mut x = Array2::zeros((n, cfg.input_dim()));
    for (b, ctx) in batch.contexts.iter().enumerate() {
        let rows = ctx.iter().map(|w| {
            input_rows
                .row(index[w])
                .to_slice()
                .expect("row-major")
        });
        fofe_into(
            rows,
            cfg.fofe_order,
            cfg.fofe_alpha,
            x.row_mut(b).as_slice_mut().expect("row-major"),
        );
    }

    let net = EffectiveNet::new(params)?;
    let (pre, acts, u) = net.run(x);

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut du = Array2::<f64>::zeros((n, d));
    let mut d_out = Array2::<f64>::zeros((words.len(), d));
    for b in 0..n {
        let ub = u.row(b);
        let mut score_term = |w: u32, positive: bool, du_row: &mut [f64]| -> Result<f64> {
            let i = index[&w];
            let row = output_rows.row(i);
            let s: f64 = ub.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            let logit = nce_logit(s, k, p_uni[w as usize])?;
            let (term, coeff) = if positive {
                (-log_sigmoid(logit), sigmoid(logit) - 1.0)
            } else {
                (-log_sigmoid(-logit), sigmoid(logit))
            };
            let c = coeff * inv_n;
            for (g, &r) in du_row.iter_mut().zip(row.iter()) {
                *g += c * r;
            }
            for (g, &x) in d_out.row_mut(i).iter_mut().zip(ub.iter()) {
                *g += c * x;
            }
            Ok(term)
        };
        let mut du_row = vec![0.0; d];
        loss += score_term(batch.targets[b], true, &mut du_row)?;
        for &w in &batch.noise[b] {
            loss += score_term(w, false, &mut du_row)?;
        }
        du.row_mut(b).assign(&Array1::from(du_row));
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("NCE loss".into()));
    }

    // Backward through projection and dense layers.
    let last = acts.last().expect("input present");
    let d_proj = last.t().dot(&du);
    let mut da = du.dot(&net.projection.t());
    let mut d_layers = Vec::with_capacity(net.layers.len());
    for i in (0..net.layers.len()).rev() {
        let mut dz = da;
        ndarray::Zip::from(&mut dz)
            .and(&pre[i])
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
        let dw = acts[i].t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        da = dz.dot(&net.layers[i].0.t());
        d_layers.push((dw, db));
    }
    d_layers.reverse();

    // Back through FOFE onto the input rows.
    let mut d_in = Array2::<f64>::zeros((words.len(), d));
    for (b, ctx) in batch.contexts.iter().enumerate() {
        fofe_backward(
            ctx.len(),
            cfg.fofe_order,
            cfg.fofe_alpha,
            da.row(b).as_slice().expect("row-major"),
            |j, g| {
                let mut row = d_in.row_mut(index[&ctx[j]]);
                for (dst, &src) in row.iter_mut().zip(g) {
                    *dst += src;
                }
            },
        );
    }
    if !untied {
        d_in += &d_out;
    }

    // Map effective-matrix gradients onto the trainable layout.
    let mut dense = Vec::with_capacity(params.dense_len());
    match &params.adapters {
        None => {
            for (i, &w) in words.iter().enumerate() {
                let mut row = d_in.row(i).to_vec();
                if untied {
                    row.extend(d_out.row(i).iter());
                }
                grads.rows.insert(w, row);
            }
            for (dw, db) in &d_layers {
                dense.extend(dw.iter());
                dense.extend(db.iter());
            }
            dense.extend(d_proj.iter());
        }
        Some(a) => {
            let to_f64 = |m: &Array2<f32>| m.mapv(|x| x as f64);
            let embed_right = |table: &Array2<f64>, f: &super::LowRank| -> (Array2<f64>, Vec<Vec<f64>>) {
                let left = to_f64(&f.left);
                let right = to_f64(&f.right);
                let mut d_right = Array2::<f64>::zeros(right.dim());
                let mut d_left_rows = Vec::with_capacity(words.len());
                for (i, &w) in words.iter().enumerate() {
                    let g = table.row(i);
                    let l = left.row(w as usize);
                    d_left_rows.push(right.dot(&g).to_vec());
                    for (r, &lr) in l.iter().enumerate() {
                        if lr != 0.0 {
                            d_right.row_mut(r).scaled_add(lr, &g);
                        }
                    }
                }
                (d_right, d_left_rows)
            };
            let (d_re, mut left_rows) = embed_right(&d_in, &a.embedding);
            dense.extend(d_re.iter());
            if let Some(o) = &a.output_embedding {
                let (d_ro, out_left) = embed_right(&d_out, o);
                dense.extend(d_ro.iter());
                for (row, extra) in left_rows.iter_mut().zip(out_left) {
                    row.extend(extra);
                }
            }
            for (&w, row) in words.iter().zip(left_rows) {
                grads.rows.insert(w, row);
            }
            for ((dw, db), f) in d_layers.iter().zip(&a.layers) {
                dense.extend(dw.dot(&to_f64(&f.right).t()).iter());
                dense.extend(to_f64(&f.left).t().dot(dw).iter());
                dense.extend(db.iter());
            }
            dense.extend(d_proj.dot(&to_f64(&a.projection.right).t()).iter());
            dense.extend(to_f64(&a.projection.left).t().dot(&d_proj).iter());
        }
    }
    debug_assert_eq!(dense.len(), params.dense_len());
    grads.dense = dense;
    Ok(NceOutput { loss, grads })
}

/// Perplexity under the full softmax over the vocabulary.
pub fn softmax_eval(params: &ModelParams, dataset: &[Example]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let cfg = &params.config;
    let v = cfg.vocab_size;
    for ex in dataset {
        for &w in ex.history.iter().chain(std::iter::once(&ex.target)) {
            if w as usize >= v {
                return Err(Error::TokenOutOfRange { id: w, vocab: v });
            }
        }
        if ex.history.is_empty() {
            return Err(Error::InvalidArgument("empty history in dataset".into()));
        }
    }
    let net = EffectiveNet::new(params)?;
    let input = effective_table(params, false)?;
    let output_t = if params.output_embedding.is_some() {
        effective_table(params, true)?.reversed_axes()
    } else {
        input.t().to_owned()
    };
    let mut nll = 0.0;
    for chunk in dataset.chunks(256) {
        let mut x = Array2::zeros((chunk.len(), cfg.input_dim()));
        for (b, ex) in chunk.iter().enumerate() {
            fofe_into(
                ex.history
                    .iter()
                    .map(|&w| input.row(w as usize).to_slice().expect("row-major")),
                cfg.fofe_order,
                cfg.fofe_alpha,
                x.row_mut(b).as_slice_mut().expect("row-major"),
            );
        }
        let (_, _, u) = net.run(x);
        let scores = u.dot(&output_t);
        for (row, ex) in scores.outer_iter().zip(chunk) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            nll += lse - row[ex.target as usize];
        }
    }
    let ppl = (nll / dataset.len() as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite("perplexity".into()));
    }
    Ok(ppl)
}
