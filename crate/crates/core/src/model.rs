//! Small feed-forward language model over frozen token embeddings.
//!
//! Logits at each position are produced by a dense chain applied to that
//! position's embedding, so next-token prediction depends on the current
//! token only. The embedding matrix is frozen at initialization; attribution
//! and training touch the dense layers alone, which keeps per-layer
//! Kronecker structure exact.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Self::Relu),
            "tanh" => Some(Self::Tanh),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        }
    }

    fn apply(&self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
        }
    }

    fn derivative(&self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Widths in `layer_widths` are the output dimensions of the dense chain in
/// order; the final width must equal `vocab_size` so the last layer produces
/// next-token logits. A single-layer (convex) model is `[vocab_size]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("vocab_size and embed_dim must be positive".into()));
        }
        if self.layer_widths.is_empty() {
            return Err(Error::Config("layer_widths must be nonempty".into()));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if *self.layer_widths.last().unwrap() != self.vocab_size {
            return Err(Error::Config(format!(
                "final layer width {} must equal vocab_size {}",
                self.layer_widths.last().unwrap(),
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// d_out x d_in.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab_size x embed_dim, frozen after initialization.
    pub embedding: DMatrix<f64>,
    pub layers: Vec<DenseLayer>,
    pub step_count: u64,
}

/// Per-layer input activations and pre-activations for one sequence,
/// one row per position. Logits are the last layer's pre-activations.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Vec<DMatrix<f64>>,
    pub preacts: Vec<DMatrix<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &DMatrix<f64> {
        self.preacts.last().expect("trace has at least one layer")
    }

    pub fn layer_count(&self) -> usize {
        self.preacts.len()
    }
}

/// Per-layer gradients of the dense parameters in augmented form: each
/// matrix is d_out x (d_in + 1) with the bias gradient in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<DMatrix<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.out_dim(), l.in_dim() + 1))
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape(format!(
                "bundle layer count {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        let mut acc = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("bundle layer {:?} vs {:?}", a.shape(), b.shape())));
            }
            acc += a.dot(b);
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.layers.iter().map(|l| l.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn scale_mut(&mut self, factor: f64) {
        for l in &mut self.layers {
            *l *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(factor, b, 1.0);
        }
    }

    /// Total number of scalar parameters covered by the bundle.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Concatenate all layers row-major into one vector.
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for r in 0..l.nrows() {
                for c in 0..l.ncols() {
                    out.push(l[(r, c)]);
                }
            }
        }
        DVector::from_vec(out)
    }

    pub fn from_flat(model: &Model, flat: &DVector<f64>) -> Result<Self> {
        let mut layers = Vec::with_capacity(model.layers.len());
        let mut offset = 0;
        for l in &model.layers {
            let (rows, cols) = (l.out_dim(), l.in_dim() + 1);
            if offset + rows * cols > flat.len() {
                return Err(Error::Shape("flat vector too short for model".into()));
            }
            let mut m = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    m[(r, c)] = flat[offset + r * cols + c];
                }
            }
            offset += rows * cols;
            layers.push(m);
        }
        if offset != flat.len() {
            return Err(Error::Shape("flat vector too long for model".into()));
        }
        Ok(Self { layers })
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    let normal = StandardNormal;
    DMatrix::from_fn(rows, cols, |_, _| {
        let x: f64 = normal.sample(rng);
        x * scale
    })
}

/// Initialize a model deterministically from its config seed. The embedding
/// is drawn once and never trained.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let embedding = normal_matrix(&mut rng, config.vocab_size, config.embed_dim, 1.0);
    let mut layers = Vec::with_capacity(config.layer_widths.len());
    let mut in_dim = config.embed_dim;
    for &out_dim in &config.layer_widths {
        let scale = (1.0 / in_dim as f64).sqrt();
        layers.push(DenseLayer {
            weight: normal_matrix(&mut rng, out_dim, in_dim, scale),
            bias: DVector::zeros(out_dim),
        });
        in_dim = out_dim;
    }
    Ok(Model {
        config: config.clone(),
        embedding,
        layers,
        step_count: 0,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim() * (l.in_dim() + 1)).sum()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::OutOfVocab {
                    id: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Run the dense chain at every position, caching layer inputs and
/// pre-activations.
pub fn forward(model: &Model, tokens: &[u32]) -> Result<ForwardTrace> {
    model.check_tokens(tokens)?;
    let n = tokens.len();
    let embed_dim = model.config.embed_dim;
    let mut acts = DMatrix::zeros(n, embed_dim);
    for (i, &t) in tokens.iter().enumerate() {
        acts.row_mut(i).copy_from(&model.embedding.row(t as usize));
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut preacts = Vec::with_capacity(model.layers.len());
    let last = model.layers.len() - 1;
    for (li, layer) in model.layers.iter().enumerate() {
        let mut z = &acts * layer.weight.transpose();
        for r in 0..n {
            for c in 0..layer.out_dim() {
                z[(r, c)] += layer.bias[c];
            }
        }
        inputs.push(acts);
        acts = if li == last {
            DMatrix::zeros(0, 0)
        } else {
            z.map(|v| model.config.activation.apply(v))
        };
        preacts.push(z);
    }
    Ok(ForwardTrace { inputs, preacts })
}

/// Numerically stable log-softmax over one logit row.
fn log_softmax_row(logits: &DMatrix<f64>, row: usize) -> Vec<f64> {
    let ncols = logits.ncols();
    let max = (0..ncols).map(|c| logits[(row, c)]).fold(f64::NEG_INFINITY, f64::max);
    let log_sum = (0..ncols).map(|c| (logits[(row, c)] - max).exp()).sum::<f64>().ln() + max;
    (0..ncols).map(|c| logits[(row, c)] - log_sum).collect()
}

pub(crate) fn softmax_row(logits: &DMatrix<f64>, row: usize) -> Vec<f64> {
    log_softmax_row(logits, row).into_iter().map(f64::exp).collect()
}

fn check_positions(tokens: &[u32], scored_positions: &[usize]) -> Result<()> {
    if scored_positions.is_empty() {
        return Err(Error::NoScoredPositions);
    }
    for &p in scored_positions {
        if p + 1 >= tokens.len() {
            return Err(Error::BadPosition {
                position: p,
                len: tokens.len(),
            });
        }
    }
    Ok(())
}

/// Positions carrying a next-token target: all but the last.
pub fn training_positions(tokens: &[u32]) -> Vec<usize> {
    if tokens.len() < 2 {
        Vec::new()
    } else {
        (0..tokens.len() - 1).collect()
    }
}

/// Sum of next-token cross-entropy in nats over the scored positions;
/// position `p` predicts `tokens[p + 1]`.
pub fn sequence_loss(model: &Model, tokens: &[u32], scored_positions: &[usize]) -> Result<f64> {
    check_positions(tokens, scored_positions)?;
    let trace = forward(model, tokens)?;
    Ok(loss_from_trace(&trace, tokens, scored_positions))
}

pub(crate) fn loss_from_trace(trace: &ForwardTrace, tokens: &[u32], scored_positions: &[usize]) -> f64 {
    let logits = trace.logits();
    scored_positions
        .iter()
        .map(|&p| -log_softmax_row(logits, p)[tokens[p + 1] as usize])
        .sum()
}

/// Concatenated query tokens and the positions scoring its completion.
/// With an empty prompt the first completion token has no predecessor and
/// is excluded.
pub fn completion_positions(query: &Query) -> (Vec<u32>, Vec<usize>) {
    let mut tokens = query.prompt_tokens.clone();
    tokens.extend_from_slice(&query.completion_tokens);
    let prompt_len = query.prompt_tokens.len();
    let positions = (0..query.completion_tokens.len())
        .filter_map(|j| (prompt_len + j).checked_sub(1))
        .collect();
    (tokens, positions)
}

/// Information content of the query completion: -log p(y_c | y_p) in nats.
pub fn completion_information(model: &Model, query: &Query) -> Result<f64> {
    let (tokens, positions) = completion_positions(query);
    sequence_loss(model, &tokens, &positions)
}

/// Rank-one accumulation of a layer gradient from per-position
/// pre-activation gradients and layer inputs, in augmented form
/// (bias gradient in the last column).
pub(crate) fn layer_grad(delta: &DMatrix<f64>, input: &DMatrix<f64>) -> DMatrix<f64> {
    let d_out = delta.ncols();
    let d_in = input.ncols();
    let mut g = DMatrix::zeros(d_out, d_in + 1);
    g.view_mut((0, 0), (d_out, d_in)).copy_from(&(delta.transpose() * input));
    for r in 0..delta.nrows() {
        for c in 0..d_out {
            g[(c, d_in)] += delta[(r, c)];
        }
    }
    g
}

/// Backpropagate per-position output deltas through the dense chain,
/// returning the pre-activation gradient rows at every layer.
pub(crate) fn propagate_deltas(model: &Model, trace: &ForwardTrace, delta_last: DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let n_layers = model.layers.len();
    let mut deltas = vec![DMatrix::zeros(0, 0); n_layers];
    let mut delta = delta_last;
    for li in (0..n_layers).rev() {
        if li > 0 {
            let mut prev = &delta * &model.layers[li].weight;
            let z = &trace.preacts[li - 1];
            for r in 0..prev.nrows() {
                for c in 0..prev.ncols() {
                    prev[(r, c)] *= model.config.activation.derivative(z[(r, c)]);
                }
            }
            deltas[li] = delta;
            delta = prev;
        } else {
            deltas[li] = delta;
            delta = DMatrix::zeros(0, 0);
        }
    }
    deltas
}

pub(crate) fn backward_from_deltas(model: &Model, trace: &ForwardTrace, delta: DMatrix<f64>) -> GradientBundle {
    let deltas = propagate_deltas(model, trace, delta);
    let layers = deltas
        .iter()
        .zip(&trace.inputs)
        .map(|(d, a)| layer_grad(d, a))
        .collect();
    GradientBundle { layers }
}

/// Output-layer deltas of the cross-entropy loss: softmax(z) minus the
/// one-hot target at each scored position, zero elsewhere.
fn loss_deltas(trace: &ForwardTrace, tokens: &[u32], scored_positions: &[usize]) -> DMatrix<f64> {
    let logits = trace.logits();
    let mut delta = DMatrix::zeros(logits.nrows(), logits.ncols());
    for &p in scored_positions {
        let probs = softmax_row(logits, p);
        for (c, &pr) in probs.iter().enumerate() {
            delta[(p, c)] = pr;
        }
        delta[(p, tokens[p + 1] as usize)] -= 1.0;
    }
    delta
}

/// Gradient of `sequence_loss` with respect to the dense parameters only.
pub fn per_example_gradient(model: &Model, tokens: &[u32], scored_positions: &[usize]) -> Result<GradientBundle> {
    check_positions(tokens, scored_positions)?;
    let trace = forward(model, tokens)?;
    let delta = loss_deltas(&trace, tokens, scored_positions);
    Ok(backward_from_deltas(model, &trace, delta))
}

/// Gradient of the query completion loss.
pub fn query_gradient(model: &Model, query: &Query) -> Result<GradientBundle> {
    let (tokens, positions) = completion_positions(query);
    per_example_gradient(model, &tokens, &positions)
}

/// True when greedy decoding reproduces every completion token.
pub fn greedy_correct(model: &Model, query: &Query) -> Result<bool> {
    let (tokens, positions) = completion_positions(query);
    if positions.is_empty() {
        return Err(Error::NoScoredPositions);
    }
    let trace = forward(model, &tokens)?;
    let logits = trace.logits();
    for &p in &positions {
        let mut best = 0;
        for c in 1..logits.ncols() {
            if logits[(p, c)] > logits[(p, best)] {
                best = c;
            }
        }
        if best as u32 != tokens[p + 1] {
            return Ok(false);
        }
    }
    Ok(true)
}
