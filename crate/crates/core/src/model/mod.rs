//! Conditioned LSTM language model.
//!
//! At every step the LSTM input is the previous token's embedding
//! concatenated with the condition vector (one embedding row per parameter
//! value, in schema order). The LSTM output feeds a one-hidden-layer tanh
//! MLP whose output is a softmax over the subword vocabulary.

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BOS_ID, EOS_ID};
use crate::schema::{ParameterSchema, SchemaError, StyleAssignment};

/// Floating-point element type of weights and activations.
pub trait Real:
    Float + LinalgScalar + ScalarOperand + AddAssign + SubAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence must start with BOS")]
    MissingBos,
    #[error("condition vector has length {got}, model expects {expected}")]
    ConditionLength { got: usize, expected: usize },
    #[error(transparent)]
    Assignment(#[from] SchemaError),
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("shape mismatch in tensor `{0}`")]
    ShapeMismatch(String),
}

/// Layer sizes. The input width is `word_emb_dim` plus the schema's summed
/// parameter embedding widths (zero for an unconditioned model).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_emb_dim: usize,
    pub lstm_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub conditioned: bool,
    pub schema: ParameterSchema,
}

impl ModelConfig {
    /// Full-size layout: 256-wide word embeddings, 1024-wide LSTM and MLP.
    pub fn paper(vocab_size: usize, schema: ParameterSchema) -> Self {
        Self::with_dims(vocab_size, schema, 256, 1024, 1024)
    }

    /// Small layout for CPU experiments and CI.
    pub fn desk(vocab_size: usize, schema: ParameterSchema) -> Self {
        Self::with_dims(vocab_size, schema, 32, 128, 128)
    }

    pub fn with_dims(
        vocab_size: usize,
        schema: ParameterSchema,
        word_emb_dim: usize,
        lstm_dim: usize,
        mlp_hidden: usize,
    ) -> Self {
        ModelConfig { word_emb_dim, lstm_dim, mlp_hidden, vocab_size, conditioned: true, schema }
    }

    pub fn unconditioned(mut self) -> Self {
        self.conditioned = false;
        self
    }

    pub fn condition_dim(&self) -> usize {
        if self.conditioned {
            self.schema.condition_dim()
        } else {
            0
        }
    }

    pub fn input_dim(&self) -> usize {
        self.word_emb_dim + self.condition_dim()
    }
}

/// All trainable tensors. Gate blocks are ordered input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub word_emb: Array2<F>,
    pub param_emb: Vec<Array2<F>>,
    pub w_input: Array2<F>,
    pub w_hidden: Array2<F>,
    pub b_gates: Array1<F>,
    pub w_mlp: Array2<F>,
    pub b_mlp: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

impl<F: Real> Weights<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.lstm_dim;
        let param_emb = if cfg.conditioned {
            cfg.schema
                .parameters()
                .iter()
                .map(|p| Array2::zeros((p.values.len(), p.embedding_dim)))
                .collect()
        } else {
            Vec::new()
        };
        Weights {
            word_emb: Array2::zeros((cfg.vocab_size, cfg.word_emb_dim)),
            param_emb,
            w_input: Array2::zeros((cfg.input_dim(), 4 * h)),
            w_hidden: Array2::zeros((h, 4 * h)),
            b_gates: Array1::zeros(4 * h),
            w_mlp: Array2::zeros((h, cfg.mlp_hidden)),
            b_mlp: Array1::zeros(cfg.mlp_hidden),
            w_out: Array2::zeros((cfg.mlp_hidden, cfg.vocab_size)),
            b_out: Array1::zeros(cfg.vocab_size),
        }
    }

    /// Uniform(-scale, scale) matrices and embeddings, zero biases except a
    /// forget-gate bias of 1.
    pub fn random<R: Rng>(cfg: &ModelConfig, scale: f64, rng: &mut R) -> Self {
        let mut w = Self::zeros(cfg);
        let h = cfg.lstm_dim;
        let mut fill = |a: &mut [F]| {
            for x in a {
                *x = F::of(rng.random_range(-scale..scale));
            }
        };
        fill(w.word_emb.as_slice_mut().unwrap());
        for p in &mut w.param_emb {
            fill(p.as_slice_mut().unwrap());
        }
        fill(w.w_input.as_slice_mut().unwrap());
        fill(w.w_hidden.as_slice_mut().unwrap());
        fill(w.w_mlp.as_slice_mut().unwrap());
        fill(w.w_out.as_slice_mut().unwrap());
        w.b_gates.slice_mut(s![h..2 * h]).fill(F::one());
        w
    }

    /// Tensor names in checkpoint order.
    pub fn tensor_names(cfg: &ModelConfig) -> Vec<String> {
        let mut names = vec!["word_emb".to_string()];
        if cfg.conditioned {
            names.extend(cfg.schema.parameters().iter().map(|p| format!("param_emb.{}", p.name)));
        }
        names.extend(
            ["w_input", "w_hidden", "b_gates", "w_mlp", "b_mlp", "w_out", "b_out"].map(String::from),
        );
        names
    }

    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![self.word_emb.as_slice().unwrap()];
        out.extend(self.param_emb.iter().map(|p| p.as_slice().unwrap()));
        out.extend([
            self.w_input.as_slice().unwrap(),
            self.w_hidden.as_slice().unwrap(),
            self.b_gates.as_slice().unwrap(),
            self.w_mlp.as_slice().unwrap(),
            self.b_mlp.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![self.word_emb.as_slice_mut().unwrap()];
        out.extend(self.param_emb.iter_mut().map(|p| p.as_slice_mut().unwrap()));
        out.extend([
            self.w_input.as_slice_mut().unwrap(),
            self.w_hidden.as_slice_mut().unwrap(),
            self.b_gates.as_slice_mut().unwrap(),
            self.w_mlp.as_slice_mut().unwrap(),
            self.b_mlp.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Weights<G> {
        let c2 = |a: &Array2<F>| a.mapv(|x| G::of(x.f64()));
        let c1 = |a: &Array1<F>| a.mapv(|x| G::of(x.f64()));
        Weights {
            word_emb: c2(&self.word_emb),
            param_emb: self.param_emb.iter().map(c2).collect(),
            w_input: c2(&self.w_input),
            w_hidden: c2(&self.w_hidden),
            b_gates: c1(&self.b_gates),
            w_mlp: c2(&self.w_mlp),
            b_mlp: c1(&self.b_mlp),
            w_out: c2(&self.w_out),
            b_out: c1(&self.b_out),
        }
    }

    /// In-place `self += other * k`.
    pub fn add_scaled(&mut self, other: &Weights<F>, k: F) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y * k;
            }
        }
    }
}

/// Concatenated parameter-value embeddings fed at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector<F>(pub Vec<F>);

impl<F> ConditionVector<F> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One training or scoring item: subword ids without framing, plus the
/// per-parameter value indices (empty for unconditioned use).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub values: Vec<usize>,
}

/// Output of a single-sequence forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// Row t is the next-token distribution after reading inputs 0..=t.
    pub probs: Array2<F>,
    pub hidden: Array1<F>,
    pub cell: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel<F = f32> {
    pub config: ModelConfig,
    pub weights: Weights<F>,
}

// Time-major batch: row t * batch + b is step t of sequence b.
struct Frame {
    steps: usize,
    batch: usize,
    inputs: Vec<u32>,
    targets: Vec<u32>,
    mask: Vec<bool>,
}

impl Frame {
    fn new(examples: &[&Example]) -> Self {
        let batch = examples.len();
        let steps = examples.iter().map(|e| e.ids.len() + 1).max().unwrap_or(0);
        let n = steps * batch;
        let mut inputs = vec![EOS_ID; n];
        let mut targets = vec![EOS_ID; n];
        let mut mask = vec![false; n];
        for (b, e) in examples.iter().enumerate() {
            for t in 0..=e.ids.len() {
                let r = t * batch + b;
                inputs[r] = if t == 0 { BOS_ID } else { e.ids[t - 1] };
                targets[r] = if t < e.ids.len() { e.ids[t] } else { EOS_ID };
                mask[r] = true;
            }
        }
        Frame { steps, batch, inputs, targets, mask }
    }
}

struct Cache<F> {
    x: Array2<F>,
    cond: Array2<F>,
    gates: Array2<F>,
    cells: Array2<F>,
    cells_tanh: Array2<F>,
    hidden: Array2<F>,
    mlp: Array2<F>,
    probs: Array2<F>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax_rows<F: Real>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = F::one() / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

fn add_row_vector<F: Real>(m: &mut Array2<F>, v: &Array1<F>) {
    for mut row in m.rows_mut() {
        row += v;
    }
}

impl<F: Real> LanguageModel<F> {
    pub fn new(config: ModelConfig, weights: Weights<F>) -> Self {
        LanguageModel { config, weights }
    }

    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Self {
        let weights = Weights::random(&config, 0.08, rng);
        LanguageModel { config, weights }
    }

    pub fn is_conditioned(&self) -> bool {
        self.config.conditioned
    }

    pub fn schema(&self) -> &ParameterSchema {
        &self.config.schema
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn cast<G: Real>(&self) -> LanguageModel<G> {
        LanguageModel { config: self.config.clone(), weights: self.weights.cast() }
    }

    /// Value indices for `a`; empty for an unconditioned model.
    pub fn condition_values(&self, a: &StyleAssignment) -> Result<Vec<usize>, ModelError> {
        if !self.config.conditioned {
            return Ok(Vec::new());
        }
        Ok(self.config.schema.value_indices(a)?)
    }

    pub fn condition_vector(&self, a: &StyleAssignment) -> Result<ConditionVector<F>, ModelError> {
        let values = self.condition_values(a)?;
        Ok(ConditionVector(self.condition_row(&values)))
    }

    fn condition_row(&self, values: &[usize]) -> Vec<F> {
        let mut out = Vec::with_capacity(self.config.condition_dim());
        for (table, &v) in self.weights.param_emb.iter().zip(values) {
            out.extend(table.row(v).iter().copied());
        }
        out
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        let vocab = self.config.vocab_size;
        match ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    pub fn example(&self, ids: Vec<u32>, a: &StyleAssignment) -> Result<Example, ModelError> {
        self.check_ids(&ids)?;
        Ok(Example { ids, values: self.condition_values(a)? })
    }

    /// Next-token distributions for a BOS-initial input sequence.
    pub fn forward(&self, ids: &[u32], c: &ConditionVector<F>) -> Result<ForwardOutput<F>, ModelError> {
        if ids.first() != Some(&BOS_ID) {
            return Err(ModelError::MissingBos);
        }
        self.check_ids(ids)?;
        let expected = self.config.condition_dim();
        if c.len() != expected {
            return Err(ModelError::ConditionLength { got: c.len(), expected });
        }
        let frame = Frame {
            steps: ids.len(),
            batch: 1,
            inputs: ids.to_vec(),
            targets: vec![EOS_ID; ids.len()],
            mask: vec![true; ids.len()],
        };
        let cond = Array2::from_shape_vec((1, expected), c.0.clone()).expect("condition shape");
        let cache = self.run(&frame, cond);
        let last = ids.len() - 1;
        Ok(ForwardOutput {
            probs: cache.probs,
            hidden: cache.hidden.row(last).to_owned(),
            cell: cache.cells.row(last).to_owned(),
        })
    }

    fn run(&self, frame: &Frame, cond: Array2<F>) -> Cache<F> {
        let w = &self.weights;
        let e = self.config.word_emb_dim;
        let h = self.config.lstm_dim;
        let (steps, batch) = (frame.steps, frame.batch);
        let n = steps * batch;

        let mut x = Array2::zeros((n, e));
        for (r, &id) in frame.inputs.iter().enumerate() {
            x.row_mut(r).assign(&w.word_emb.row(id as usize));
        }
        let mut gates = x.dot(&w.w_input.slice(s![..e, ..]));
        let mut cond_gates = if cond.ncols() > 0 {
            cond.dot(&w.w_input.slice(s![e.., ..]))
        } else {
            Array2::zeros((batch, 4 * h))
        };
        add_row_vector(&mut cond_gates, &w.b_gates);

        let mut cells = Array2::zeros((n, h));
        let mut cells_tanh = Array2::zeros((n, h));
        let mut hidden = Array2::zeros((n, h));
        for t in 0..steps {
            let rows = t * batch..(t + 1) * batch;
            let mut g = gates.slice_mut(s![rows.clone(), ..]);
            g += &cond_gates;
            if t > 0 {
                let prev = hidden.slice(s![(t - 1) * batch..t * batch, ..]);
                g += &prev.dot(&w.w_hidden);
            }
            for b in 0..batch {
                let r = t * batch + b;
                let gr = gates.row_mut(r).into_slice().unwrap();
                for j in 0..h {
                    gr[j] = sigmoid(gr[j]);
                    gr[h + j] = sigmoid(gr[h + j]);
                    gr[2 * h + j] = gr[2 * h + j].tanh();
                    gr[3 * h + j] = sigmoid(gr[3 * h + j]);
                }
                let gr = gates.row(r);
                let gr = gr.as_slice().unwrap();
                for j in 0..h {
                    let c_prev = if t > 0 { cells[[r - batch, j]] } else { F::zero() };
                    let c = gr[h + j] * c_prev + gr[j] * gr[2 * h + j];
                    let tc = c.tanh();
                    cells[[r, j]] = c;
                    cells_tanh[[r, j]] = tc;
                    hidden[[r, j]] = gr[3 * h + j] * tc;
                }
            }
        }

        let mut mlp = hidden.dot(&w.w_mlp);
        add_row_vector(&mut mlp, &w.b_mlp);
        mlp.mapv_inplace(|v| v.tanh());
        let mut probs = mlp.dot(&w.w_out);
        add_row_vector(&mut probs, &w.b_out);
        softmax_rows(&mut probs);
        Cache { x, cond, gates, cells, cells_tanh, hidden, mlp, probs }
    }

    fn condition_matrix(&self, examples: &[&Example]) -> Array2<F> {
        let c = self.config.condition_dim();
        let mut cond = Array2::zeros((examples.len(), c));
        if c > 0 {
            for (b, ex) in examples.iter().enumerate() {
                let row = self.condition_row(&ex.values);
                cond.row_mut(b).assign(&Array1::from(row));
            }
        }
        cond
    }

    /// Per-example negative log-likelihood (EOS included) and predicted-token count.
    pub fn nll_batch(&self, examples: &[&Example]) -> Vec<(f64, usize)> {
        if examples.is_empty() {
            return Vec::new();
        }
        let frame = Frame::new(examples);
        let cache = self.run(&frame, self.condition_matrix(examples));
        let mut out = vec![(0.0, 0usize); examples.len()];
        for r in 0..frame.targets.len() {
            if frame.mask[r] {
                let p = cache.probs[[r, frame.targets[r] as usize]].f64();
                let entry = &mut out[r % frame.batch];
                entry.0 -= p.ln();
                entry.1 += 1;
            }
        }
        out
    }

    /// `Σ_t −log p(w_t | w_<t, c)` over the sentence and its EOS.
    pub fn sentence_nll(&self, ids: &[u32], a: &StyleAssignment) -> Result<f64, ModelError> {
        let ex = self.example(ids.to_vec(), a)?;
        Ok(self.nll_batch(&[&ex])[0].0)
    }

    /// Mean sentence NLL of the batch and its exact gradient.
    pub fn loss_and_grad(&self, examples: &[&Example]) -> (f64, Weights<F>) {
        let mut grads = Weights::zeros(&self.config);
        if examples.is_empty() {
            return (0.0, grads);
        }
        let w = &self.weights;
        let e = self.config.word_emb_dim;
        let h = self.config.lstm_dim;
        let frame = Frame::new(examples);
        let (steps, batch) = (frame.steps, frame.batch);
        let cache = self.run(&frame, self.condition_matrix(examples));
        let scale = F::of(1.0 / batch as f64);

        let mut loss = 0.0;
        let mut dlogits = cache.probs;
        for (r, mut row) in dlogits.rows_mut().into_iter().enumerate() {
            if frame.mask[r] {
                let t = frame.targets[r] as usize;
                loss -= row[t].f64().ln();
                row[t] -= F::one();
                row *= scale;
            } else {
                row.fill(F::zero());
            }
        }
        loss /= batch as f64;

        grads.w_out = cache.mlp.t().dot(&dlogits);
        grads.b_out = dlogits.sum_axis(Axis(0));
        let mut dpre = dlogits.dot(&w.w_out.t());
        ndarray::Zip::from(&mut dpre).and(&cache.mlp).for_each(|d, &z| *d *= F::one() - z * z);
        grads.w_mlp = cache.hidden.t().dot(&dpre);
        grads.b_mlp = dpre.sum_axis(Axis(0));
        let dhidden = dpre.dot(&w.w_mlp.t());

        let mut dgates = Array2::<F>::zeros((steps * batch, 4 * h));
        let mut dh_next = Array2::<F>::zeros((batch, h));
        let mut dc_next = Array2::<F>::zeros((batch, h));
        for t in (0..steps).rev() {
            for b in 0..batch {
                let r = t * batch + b;
                let g = cache.gates.row(r);
                let g = g.as_slice().unwrap();
                let dg = dgates.row_mut(r).into_slice().unwrap();
                for j in 0..h {
                    let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = cache.cells_tanh[[r, j]];
                    let c_prev = if t > 0 { cache.cells[[r - batch, j]] } else { F::zero() };
                    let dh = dhidden[[r, j]] + dh_next[[b, j]];
                    let d_o = dh * tc;
                    let dc = dh * o_g * (F::one() - tc * tc) + dc_next[[b, j]];
                    dc_next[[b, j]] = dc * f_g;
                    dg[j] = dc * c_g * i_g * (F::one() - i_g);
                    dg[h + j] = dc * c_prev * f_g * (F::one() - f_g);
                    dg[2 * h + j] = dc * i_g * (F::one() - c_g * c_g);
                    dg[3 * h + j] = d_o * o_g * (F::one() - o_g);
                }
            }
            if t > 0 {
                let dg_t = dgates.slice(s![t * batch..(t + 1) * batch, ..]);
                dh_next = dg_t.dot(&w.w_hidden.t());
            }
        }

        if steps > 1 {
            let prev_h: ArrayView2<F> = cache.hidden.slice(s![..(steps - 1) * batch, ..]);
            grads.w_hidden = prev_h.t().dot(&dgates.slice(s![batch.., ..]));
        }
        grads.b_gates = dgates.sum_axis(Axis(0));
        let w_word = w.w_input.slice(s![..e, ..]);
        grads.w_input.slice_mut(s![..e, ..]).assign(&cache.x.t().dot(&dgates));
        let dx = dgates.dot(&w_word.t());
        for (r, &id) in frame.inputs.iter().enumerate() {
            if frame.mask[r] {
                let mut row = grads.word_emb.row_mut(id as usize);
                row += &dx.row(r);
            }
        }

        if self.config.condition_dim() > 0 {
            let mut dcond_gates = Array2::<F>::zeros((batch, 4 * h));
            for t in 0..steps {
                dcond_gates += &dgates.slice(s![t * batch..(t + 1) * batch, ..]);
            }
            grads.w_input.slice_mut(s![e.., ..]).assign(&cache.cond.t().dot(&dcond_gates));
            let dcond = dcond_gates.dot(&w.w_input.slice(s![e.., ..]).t());
            for (b, ex) in examples.iter().enumerate() {
                let mut offset = 0;
                for (table, &v) in grads.param_emb.iter_mut().zip(&ex.values) {
                    let d = table.ncols();
                    let mut row = table.row_mut(v);
                    row += &dcond.slice(s![b, offset..offset + d]);
                    offset += d;
                }
            }
        }
        (loss, grads)
    }

    /// Incremental decoder over a fixed batch of condition vectors.
    pub fn decoder(&self, conditions: &[Vec<usize>]) -> Decoder<'_, F> {
        let batch = conditions.len();
        let h = self.config.lstm_dim;
        let e = self.config.word_emb_dim;
        let mut cond_gates = if self.config.condition_dim() > 0 {
            let mut cond = Array2::zeros((batch, self.config.condition_dim()));
            for (b, v) in conditions.iter().enumerate() {
                cond.row_mut(b).assign(&Array1::from(self.condition_row(v)));
            }
            cond.dot(&self.weights.w_input.slice(s![e.., ..]))
        } else {
            Array2::zeros((batch, 4 * h))
        };
        add_row_vector(&mut cond_gates, &self.weights.b_gates);
        Decoder {
            model: self,
            cond_gates,
            hidden: Array2::zeros((batch, h)),
            cell: Array2::zeros((batch, h)),
        }
    }
}

/// Step-by-step evaluation used for sampling.
pub struct Decoder<'a, F> {
    model: &'a LanguageModel<F>,
    cond_gates: Array2<F>,
    hidden: Array2<F>,
    cell: Array2<F>,
}

impl<F: Real> Decoder<'_, F> {
    pub fn batch(&self) -> usize {
        self.hidden.nrows()
    }

    /// Feed one input token per row; returns output logits (batch x vocab).
    pub fn step(&mut self, inputs: &[u32]) -> Array2<F> {
        let w = &self.model.weights;
        let e = self.model.config.word_emb_dim;
        let h = self.model.config.lstm_dim;
        let batch = inputs.len();
        let mut x = Array2::zeros((batch, e));
        for (b, &id) in inputs.iter().enumerate() {
            x.row_mut(b).assign(&w.word_emb.row(id as usize));
        }
        let mut g = x.dot(&w.w_input.slice(s![..e, ..]));
        g += &self.cond_gates;
        g += &self.hidden.dot(&w.w_hidden);
        for b in 0..batch {
            let gr = g.row(b);
            let gr = gr.as_slice().unwrap();
            for j in 0..h {
                let i_g = sigmoid(gr[j]);
                let f_g = sigmoid(gr[h + j]);
                let c_g = gr[2 * h + j].tanh();
                let o_g = sigmoid(gr[3 * h + j]);
                let c = f_g * self.cell[[b, j]] + i_g * c_g;
                self.cell[[b, j]] = c;
                self.hidden[[b, j]] = o_g * c.tanh();
            }
        }
        let mut z = self.hidden.dot(&w.w_mlp);
        add_row_vector(&mut z, &w.b_mlp);
        z.mapv_inplace(|v| v.tanh());
        let mut logits = z.dot(&w.w_out);
        add_row_vector(&mut logits, &w.b_out);
        logits
    }
}
