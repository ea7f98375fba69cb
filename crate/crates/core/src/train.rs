//! Adam trainer for the dense layers. The embedding stays frozen.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{forward, loss_from_trace, per_example_gradient, training_positions, GradientBundle, Model};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-token loss in nats, one entry per epoch.
    pub epoch_mean_loss: Vec<f64>,
}

struct AdamState {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: u64,
}

impl AdamState {
    fn new(model: &Model) -> Self {
        let zeros: Vec<DMatrix<f64>> = model
            .layers
            .iter()
            .map(|l| DMatrix::zeros(l.out_dim(), l.in_dim() + 1))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grad: &GradientBundle, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (li, g) in grad.layers.iter().enumerate() {
            let layer = &mut model.layers[li];
            let (rows, cols) = g.shape();
            for r in 0..rows {
                for c in 0..cols {
                    let theta = if c < cols - 1 {
                        layer.weight[(r, c)]
                    } else {
                        layer.bias[r]
                    };
                    let gi = g[(r, c)] + cfg.weight_decay * theta;
                    let m = &mut self.m[li][(r, c)];
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                    let v = &mut self.v[li][(r, c)];
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
                    if c < cols - 1 {
                        layer.weight[(r, c)] -= cfg.learning_rate * update;
                    } else {
                        layer.bias[r] -= cfg.learning_rate * update;
                    }
                }
            }
        }
        model.step_count += 1;
    }
}

/// Train in place for `cfg.epochs` epochs of seeded-shuffle minibatches.
/// Gradients are per-token means over each batch; a non-finite batch loss
/// aborts with a diagnostic. Deterministic in `seed` and the corpus order.
pub fn train(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig, seed: u64) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::EmptySample);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(model);
    let mut epoch_mean_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        // Fisher-Yates shuffle; one RNG stream across epochs.
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_positions = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = GradientBundle::zeros_like(model);
            let mut batch_loss = 0.0;
            let mut batch_positions = 0usize;
            for &di in batch {
                let doc = &corpus.documents[di];
                let scored = training_positions(&doc.tokens);
                if scored.is_empty() {
                    continue;
                }
                let trace = forward(model, &doc.tokens)?;
                batch_loss += loss_from_trace(&trace, &doc.tokens, &scored);
                batch_positions += scored.len();
                let g = per_example_gradient(model, &doc.tokens, &scored)?;
                grad.add_scaled(&g, 1.0);
            }
            if batch_positions == 0 {
                continue;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            grad.scale_mut(1.0 / batch_positions as f64);
            adam.step(model, &grad, cfg);
            epoch_loss += batch_loss;
            epoch_positions += batch_positions;
        }
        if epoch_positions == 0 {
            return Err(Error::Invalid("corpus has no trainable positions".into()));
        }
        epoch_mean_loss.push(epoch_loss / epoch_positions as f64);
    }
    Ok(TrainLog { epoch_mean_loss })
}
