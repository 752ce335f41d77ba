use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`; activations are row vectors multiplied on the left.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

/// Low-rank correction `left · right` added to a frozen matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    /// `rows x r`, zero at initialisation.
    pub left: Array2<f32>,
    /// `r x cols`, random at initialisation.
    pub right: Array2<f32>,
}

impl LowRank {
    pub(crate) fn zeros(rows: usize, cols: usize, rank: usize) -> Self {
        Self {
            left: Array2::zeros((rows, rank)),
            right: Array2::zeros((rank, cols)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub rank: usize,
    pub embedding: LowRank,
    pub output_embedding: Option<LowRank>,
    pub layers: Vec<LowRank>,
    pub projection: LowRank,
}

/// All model parameters.
///
/// The trainable set is laid out as a *row table* (one row per vocabulary
/// word) plus a flat *dense section*. Without adapters the row table is the
/// embedding (concatenated with the output embedding when untied) and the
/// dense section holds, in order, every layer's weight and bias followed by
/// the projection. With adapters the row table is the embedding's left factor
/// and the dense section holds the embedding right factor(s), then each
/// layer's left factor, right factor and bias, then the projection factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Array2<f32>,
    pub output_embedding: Option<Array2<f32>>,
    pub layers: Vec<Dense>,
    /// `last_hidden x embed_dim`.
    pub projection: Array2<f32>,
    pub adapters: Option<Adapters>,
}

/// A difference of two parameter sets over the trainable layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDelta {
    pub rows: Array2<f64>,
    pub dense: Vec<f64>,
}

/// Gradient over the trainable layout with only the touched rows stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub rows: BTreeMap<u32, Vec<f64>>,
    pub dense: Vec<f64>,
}

fn slice(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("parameter arrays are contiguous")
}

fn slice_mut(a: &mut Array2<f32>) -> &mut [f32] {
    a.as_slice_mut().expect("parameter arrays are contiguous")
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Array2<f32> {
    if limit == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng) as f32)
}

impl ModelParams {
    /// All-zero parameters (adapters included when the config asks for them).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.embed_dim);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense {
                weight: Array2::zeros((i, o)),
                bias: Array1::zeros(o),
            })
            .collect();
        let (pr, pc) = config.projection_shape();
        let adapters = config.lora_rank.map(|r| Adapters {
            rank: r,
            embedding: LowRank::zeros(v, d, r),
            output_embedding: (!config.tie_embeddings).then(|| LowRank::zeros(v, d, r)),
            layers: config
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| LowRank::zeros(i, o, r))
                .collect(),
            projection: LowRank::zeros(pr, pc, r),
        });
        Ok(Self {
            config: config.clone(),
            embedding: Array2::zeros((v, d)),
            output_embedding: (!config.tie_embeddings).then(|| Array2::zeros((v, d))),
            layers,
            projection: Array2::zeros((pr, pc)),
            adapters,
        })
    }

    /// Random initialisation: embeddings uniform in `±embed_init`, dense
    /// matrices He-uniform, biases zero. Adapters are attached afterwards if
    /// the config has a rank.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut base = config.clone();
        base.lora_rank = None;
        let mut params = Self::zeros(&base)?;
        let (v, d) = (config.vocab_size, config.embed_dim);
        params.embedding = uniform_matrix(v, d, config.embed_init, rng);
        if !config.tie_embeddings {
            params.output_embedding = Some(uniform_matrix(v, d, config.embed_init, rng));
        }
        for layer in &mut params.layers {
            let (i, o) = layer.weight.dim();
            layer.weight = uniform_matrix(i, o, (6.0 / i as f64).sqrt(), rng);
        }
        let (pr, pc) = config.projection_shape();
        params.projection = uniform_matrix(pr, pc, (6.0 / pr as f64).sqrt(), rng);
        match config.lora_rank {
            Some(r) => super::lora_wrap(&params, r, rng),
            None => Ok(params),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Width of one row of the trainable row table.
    pub fn row_width(&self) -> usize {
        let per_table = match &self.adapters {
            Some(a) => a.rank,
            None => self.config.embed_dim,
        };
        per_table * self.row_tables().len()
    }

    pub(crate) fn row_tables(&self) -> Vec<&Array2<f32>> {
        match &self.adapters {
            Some(a) => std::iter::once(&a.embedding.left)
                .chain(a.output_embedding.as_ref().map(|o| &o.left))
                .collect(),
            None => std::iter::once(&self.embedding)
                .chain(self.output_embedding.as_ref())
                .collect(),
        }
    }

    fn row_tables_mut(&mut self) -> Vec<&mut Array2<f32>> {
        match &mut self.adapters {
            Some(a) => std::iter::once(&mut a.embedding.left)
                .chain(a.output_embedding.as_mut().map(|o| &mut o.left))
                .collect(),
            None => std::iter::once(&mut self.embedding)
                .chain(self.output_embedding.as_mut())
                .collect(),
        }
    }

    pub(crate) fn dense_slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        match &self.adapters {
            Some(a) => {
                out.push(slice(&a.embedding.right));
                if let Some(o) = &a.output_embedding {
                    out.push(slice(&o.right));
                }
                for (lr, layer) in a.layers.iter().zip(&self.layers) {
                    out.push(slice(&lr.left));
                    out.push(slice(&lr.right));
                    out.push(layer.bias.as_slice().expect("contiguous"));
                }
                out.push(slice(&a.projection.left));
                out.push(slice(&a.projection.right));
            }
            None => {
                for layer in &self.layers {
                    out.push(slice(&layer.weight));
                    out.push(layer.bias.as_slice().expect("contiguous"));
                }
                out.push(slice(&self.projection));
            }
        }
        out
    }

    fn dense_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        match &mut self.adapters {
            Some(a) => {
                out.push(slice_mut(&mut a.embedding.right));
                if let Some(o) = &mut a.output_embedding {
                    out.push(slice_mut(&mut o.right));
                }
                for (lr, layer) in a.layers.iter_mut().zip(&mut self.layers) {
                    out.push(slice_mut(&mut lr.left));
                    out.push(slice_mut(&mut lr.right));
                    out.push(layer.bias.as_slice_mut().expect("contiguous"));
                }
                out.push(slice_mut(&mut a.projection.left));
                out.push(slice_mut(&mut a.projection.right));
            }
            None => {
                for layer in &mut self.layers {
                    out.push(slice_mut(&mut layer.weight));
                    out.push(layer.bias.as_slice_mut().expect("contiguous"));
                }
                out.push(slice_mut(&mut self.projection));
            }
        }
        out
    }

    /// Number of scalars in the dense section of the trainable layout.
    pub fn dense_len(&self) -> usize {
        self.dense_slices().iter().map(|s| s.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.vocab_size() * self.row_width() + self.dense_len()
    }

    pub fn zero_delta(&self) -> ModelDelta {
        ModelDelta::zeros(self.vocab_size(), self.row_width(), self.dense_len())
    }

    /// Copy of the trainable dense section.
    pub fn dense_vector(&self) -> Vec<f64> {
        self.dense_slices()
            .iter()
            .flat_map(|s| s.iter().map(|&x| x as f64))
            .collect()
    }

    /// One row of the trainable row table.
    pub fn trainable_row(&self, word: u32) -> Vec<f64> {
        self.row_tables()
            .iter()
            .flat_map(|t| t.row(word as usize).to_vec())
            .map(|x| x as f64)
            .collect()
    }

    fn check_layout(&self, rows: (usize, usize), dense: usize) -> Result<()> {
        let want = ((self.vocab_size(), self.row_width()), self.dense_len());
        if (rows, dense) != want {
            return Err(Error::Shape(format!(
                "trainable layout {rows:?}+{dense} does not match model layout {:?}+{}",
                want.0, want.1
            )));
        }
        Ok(())
    }

    /// `self - base` over the trainable layout, computed exactly in double
    /// precision.
    pub fn diff(&self, base: &ModelParams) -> Result<ModelDelta> {
        base.check_layout((self.vocab_size(), self.row_width()), self.dense_len())?;
        let mut delta = self.zero_delta();
        let mut col = 0;
        for (mine, theirs) in self.row_tables().into_iter().zip(base.row_tables()) {
            let w = mine.ncols();
            let mut target = delta.rows.slice_mut(ndarray::s![.., col..col + w]);
            ndarray::Zip::from(&mut target)
                .and(mine)
                .and(theirs)
                .for_each(|t, &a, &b| *t = a as f64 - b as f64);
            col += w;
        }
        let mut k = 0;
        for (a, b) in self.dense_slices().into_iter().zip(base.dense_slices()) {
            for (&x, &y) in a.iter().zip(b) {
                delta.dense[k] = x as f64 - y as f64;
                k += 1;
            }
        }
        Ok(delta)
    }

    /// `θ ← θ + scale·Δ`, rounding each result to single precision.
    pub fn apply_delta(&mut self, delta: &ModelDelta, scale: f64) -> Result<()> {
        self.check_layout(delta.rows.dim(), delta.dense.len())?;
        let mut col = 0;
        for table in self.row_tables_mut() {
            let w = table.ncols();
            let src = delta.rows.slice(ndarray::s![.., col..col + w]);
            ndarray::Zip::from(table)
                .and(&src)
                .for_each(|p, &g| *p = (*p as f64 + scale * g) as f32);
            col += w;
        }
        let mut k = 0;
        for s in self.dense_slices_mut() {
            for p in s.iter_mut() {
                *p = (*p as f64 + scale * delta.dense[k]) as f32;
                k += 1;
            }
        }
        self.ensure_finite("parameters after update")
    }

    /// `θ ← θ + scale·g`, touching only the rows present in `g`.
    pub fn apply_gradients(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        if grads.dense.len() != self.dense_len() {
            return Err(Error::Shape(format!(
                "gradient dense section has {} entries, model has {}",
                grads.dense.len(),
                self.dense_len()
            )));
        }
        let width = self.row_width();
        let vocab = self.vocab_size();
        let mut tables = self.row_tables_mut();
        for (&word, row) in &grads.rows {
            if word as usize >= vocab || row.len() != width {
                return Err(Error::Shape(format!("gradient row {word} malformed")));
            }
            let mut col = 0;
            for table in tables.iter_mut() {
                let w = table.ncols();
                let mut r = table.row_mut(word as usize);
                for (p, &g) in r.iter_mut().zip(&row[col..col + w]) {
                    *p = (*p as f64 + scale * g) as f32;
                }
                col += w;
            }
        }
        let mut k = 0;
        for s in self.dense_slices_mut() {
            for p in s.iter_mut() {
                *p = (*p as f64 + scale * grads.dense[k]) as f32;
                k += 1;
            }
        }
        self.ensure_finite("parameters after gradient step")
    }

    /// Every tensor with a stable name, frozen ones included.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        fn mat<'a>(name: String, a: &'a Array2<f32>) -> (String, Vec<usize>, &'a [f32]) {
            (name, a.shape().to_vec(), slice(a))
        }
        let mut out = vec![mat("embedding".into(), &self.embedding)];
        if let Some(o) = &self.output_embedding {
            out.push(mat("output_embedding".into(), o));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(mat(format!("layer{i}.weight"), &layer.weight));
            out.push((
                format!("layer{i}.bias"),
                vec![layer.bias.len()],
                layer.bias.as_slice().expect("contiguous"),
            ));
        }
        out.push(mat("projection".into(), &self.projection));
        if let Some(a) = &self.adapters {
            let mut factors: Vec<(String, &LowRank)> = vec![("embedding".into(), &a.embedding)];
            if let Some(o) = &a.output_embedding {
                factors.push(("output_embedding".into(), o));
            }
            for (i, f) in a.layers.iter().enumerate() {
                factors.push((format!("layer{i}"), f));
            }
            factors.push(("projection".into(), &a.projection));
            for (name, f) in factors {
                out.push(mat(format!("lora.{name}.left"), &f.left));
                out.push(mat(format!("lora.{name}.right"), &f.right));
            }
        }
        out
    }

    pub(crate) fn all_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![slice_mut(&mut self.embedding)];
        if let Some(o) = &mut self.output_embedding {
            out.push(slice_mut(o));
        }
        for layer in &mut self.layers {
            out.push(slice_mut(&mut layer.weight));
            out.push(layer.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(slice_mut(&mut self.projection));
        if let Some(a) = &mut self.adapters {
            let mut factors: Vec<&mut LowRank> = vec![&mut a.embedding];
            if let Some(o) = &mut a.output_embedding {
                factors.push(o);
            }
            factors.extend(a.layers.iter_mut());
            factors.push(&mut a.projection);
            for f in factors {
                out.push(slice_mut(&mut f.left));
                out.push(slice_mut(&mut f.right));
            }
        }
        out
    }

    /// Overwrite every tensor from `(name, data)` pairs produced by
    /// [`ModelParams::tensors`] on a model of the same config.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        let names: Vec<(String, usize)> = self
            .tensors()
            .into_iter()
            .map(|(n, _, s)| (n, s.len()))
            .collect();
        if names.len() != tensors.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} tensors, found {}", names.len(), tensors.len()),
            ));
        }
        for ((name, len), dst) in names.into_iter().zip(self.all_slices_mut()) {
            let src = tensors
                .get(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if src.len() != len {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has {} values, expected {len}", src.len()),
                ));
            }
            dst.copy_from_slice(src);
        }
        self.ensure_finite("loaded parameters")
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (name, _, data) in self.tensors() {
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{what} ({name})")));
            }
        }
        Ok(())
    }
}

impl ModelDelta {
    pub fn zeros(vocab: usize, row_width: usize, dense_len: usize) -> Self {
        Self {
            rows: Array2::zeros((vocab, row_width)),
            dense: vec![0.0; dense_len],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len() + self.dense.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn l2_norm(&self) -> f64 {
        self.rows
            .iter()
            .chain(&self.dense)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.rows.mapv_inplace(|x| x * factor);
        self.dense.iter_mut().for_each(|x| *x *= factor);
    }

    /// Largest absolute coordinate difference to `other`.
    pub fn max_abs_diff(&self, other: &ModelDelta) -> f64 {
        self.rows
            .iter()
            .zip(other.rows.iter())
            .chain(self.dense.iter().zip(&other.dense))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Gradients {
    pub fn zeros(dense_len: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            dense: vec![0.0; dense_len],
        }
    }

    /// Scatter into a dense delta over a vocabulary of `vocab` rows.
    pub fn to_delta(&self, vocab: usize, row_width: usize) -> ModelDelta {
        let mut delta = ModelDelta::zeros(vocab, row_width, self.dense.len());
        for (&w, row) in &self.rows {
            for (dst, &src) in delta.rows.row_mut(w as usize).iter_mut().zip(row) {
                *dst = src;
            }
        }
        delta.dense.clone_from(&self.dense);
        delta
    }
}
